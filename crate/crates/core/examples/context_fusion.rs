//! Feature extraction and context fusion on one image: backbone stages,
//! channel attention, the pyramid, the global context vector, RoI pooling,
//! and the gate that decides how much context each image injects.
//!
//! ```text
//! cargo run --release --example context_fusion
//! ```

use cdiffdet::backbone::{self, ace_gates, BackboneConfig};
use cdiffdet::data::{generate_synthetic, image_tensor, SynthConfig};
use cdiffdet::head::{self, HeadConfig};
use cdiffdet::nn::ParamStore;
use cdiffdet::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cdiffdet::Result<()> {
    let (bcfg, hcfg) = (BackboneConfig::default(), HeadConfig::default());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    backbone::init(&mut store, &bcfg, &mut rng)?;
    head::init(&mut store, &hcfg, &mut rng)?;
    println!(
        "{} parameter tensors, {} scalars",
        store.len(),
        store.num_scalars()
    );

    let ds = generate_synthetic(&SynthConfig::default(), 1)?;
    let sample = &ds.samples[0];
    let g = Graph::new();
    let p = store.bind(&g, false);
    let image = g.constant(image_tensor(&[&sample.image])?);

    let stages = backbone::backbone_forward(&p, &bcfg, image)?;
    for (i, c) in stages.c.iter().enumerate() {
        println!("C{}: {:?}", i + 2, c.shape());
    }
    let gates = ace_gates(&p, stages.c[3])?.value();
    println!(
        "channel gates: min {:.3}, max {:.3}",
        gates.data().iter().cloned().fold(1.0, f64::min),
        gates.data().iter().cloned().fold(0.0, f64::max)
    );
    let c5 = backbone::ace_forward(&p, stages.c[3])?;
    let pyramid = backbone::fpn_forward(&p, &bcfg, &stages, c5)?;
    for (i, l) in pyramid.levels.iter().enumerate() {
        println!(
            "P{} (stride {}): {:?}",
            i + pyramid.min_level,
            pyramid.stride(i),
            l.shape()
        );
    }
    let ctx = backbone::gce_forward(&p, &bcfg, image)?;
    println!("global context: {:?}", ctx.shape());

    let f_roi = backbone::roi_pool(&bcfg, &pyramid, std::slice::from_ref(&sample.boxes))?;
    let f_self = head::self_attention(&p, &hcfg, f_roi)?;
    let beta = head::context_gate(&p, ctx)?.value();
    let fused = head::cross_attention_caf(&p, &hcfg, f_self, ctx)?;
    println!(
        "{} objects pooled to {:?}; context gate {:.3}; fused {:?}",
        sample.boxes.len(),
        f_roi.shape(),
        beta.data()[0],
        fused.shape()
    );
    Ok(())
}
