//! Train a small detector on synthetic shapes, detect on held-out images
//! and report AP, all in-process.
//!
//! ```text
//! cargo run --release --example train_and_detect -- 600
//! ```

use std::time::Instant;

use cdiffdet::data::{generate_synthetic, SynthConfig};
use cdiffdet::detector::{infer, stream_rng, train_step, DetectorConfig, Model, TrainState};
use cdiffdet::eval::{coco_summary, Detection};

fn main() -> cdiffdet::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(600);
    let all = generate_synthetic(
        &SynthConfig {
            seed: 7,
            ..Default::default()
        },
        250,
    )?;
    let (train, test) = (all.slice(0, 200), all.slice(200, 50));

    let mut cfg = DetectorConfig::small();
    cfg.train.batch_size = 8;
    cfg.train.lr = 5e-4;
    cfg.train.warmup = 100;
    let mut model = Model::init(cfg)?;
    let mut state = TrainState::new(&model.params);
    let start = Instant::now();
    let mut running = 0.0;
    for step in 1..=steps {
        running += train_step(&mut model, &mut state, &train)?.loss.total;
        if step % 100 == 0 {
            println!(
                "step {step:5}  loss {:.4}  {:.0} s",
                running / 100.0,
                start.elapsed().as_secs_f64()
            );
            running = 0.0;
        }
    }

    let mut dets = Vec::new();
    for s in &test.samples {
        let r = infer(&model, &s.image, &mut stream_rng(0, s.id), false)?;
        for i in 0..r.len() {
            dets.push(Detection {
                image_id: s.id,
                category: r.labels[i],
                bbox: r.boxes[i],
                score: r.scores[i],
            });
        }
    }
    let report = coco_summary(&dets, &test.ground_truth());
    println!(
        "held-out AP {:.3}  AP50 {:.3}  AP75 {:.3}",
        report.ap, report.ap50, report.ap75
    );
    Ok(())
}
