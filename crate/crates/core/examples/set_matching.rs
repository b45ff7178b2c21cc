//! Hungarian matching of proposals to ground truth and the resulting set
//! loss with its gradient.
//!
//! ```text
//! cargo run --release --example set_matching
//! ```

use cdiffdet::geometry::BoxXyxy;
use cdiffdet::loss::{hungarian, matching_cost, set_loss, MatchWeights, SetPredictions, Targets};
use cdiffdet::{Graph, Tensor};

fn main() -> cdiffdet::Result<()> {
    let gt = Targets {
        boxes: vec![
            BoxXyxy::new(0.1, 0.1, 0.4, 0.5),
            BoxXyxy::new(0.6, 0.5, 0.9, 0.9),
        ],
        classes: vec![0, 2],
    };
    let boxes = vec![
        BoxXyxy::new(0.55, 0.5, 0.85, 0.95),
        BoxXyxy::new(0.0, 0.0, 0.2, 0.2),
        BoxXyxy::new(0.12, 0.1, 0.42, 0.45),
    ];
    let logits = [[-2.0, -3.0, 1.0], [-4.0, -4.0, -4.0], [0.5, -2.0, -3.0]];
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let probs: Vec<Vec<f64>> = logits
        .iter()
        .map(|r| r.iter().map(|&z| sigmoid(z)).collect())
        .collect();

    let w = MatchWeights::default();
    let cost = matching_cost(&probs, &boxes, &gt, &w)?;
    for (i, row) in cost.iter().enumerate() {
        println!("proposal {i}: costs {row:.3?}");
    }
    let assignment = hungarian(&cost)?;
    println!(
        "pairs {:?}, unmatched {:?}, total {:.4}",
        assignment.pairs, assignment.unmatched, assignment.total
    );

    let g = Graph::new();
    let pred = SetPredictions {
        logits: g.param(Tensor::new(&[3, 3], logits.concat())?),
        boxes: g.param(Tensor::new(
            &[3, 4],
            boxes.iter().flat_map(|b| b.to_array()).collect(),
        )?),
        noise: None,
    };
    let (loss, parts) = set_loss(&g, &pred, &gt, &assignment, &w)?;
    println!("{parts:?}");
    let grads = g.backward(loss)?;
    println!("d loss / d boxes = {:.4?}", grads.wrt(pred.boxes).data());
    Ok(())
}
