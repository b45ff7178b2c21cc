//! The sampler runs any `Denoiser`. A stand-in that always predicts the
//! same clean boxes shows the whole loop: noisy proposals, DDIM steps,
//! renewal, scoring and NMS.
//!
//! ```text
//! cargo run --release --example custom_denoiser
//! ```

use cdiffdet::detector::{infer_with, Denoiser, DetectorConfig, Prediction};
use cdiffdet::diffusion::normalize;
use cdiffdet::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Predicts two fixed boxes, alternating over the proposals, with class 1
/// for the first and class 0 for the second.
struct Fixed {
    signal: Tensor,
}

impl Denoiser for Fixed {
    fn predict(&self, _image: &Tensor, x_t: &Tensor, t: usize) -> Result<Prediction> {
        let n = x_t.shape()[1];
        println!("  denoising {n} proposals at t = {t}");
        let s = self.signal.data();
        Ok(Prediction {
            x0_hat: Tensor::from_fn(&[1, n, 4], |i| s[((i / 4) % 2) * 4 + i % 4]),
            logits: Tensor::from_fn(&[1, n, 3], |i| match ((i / 3) % 2, i % 3) {
                (0, 1) | (1, 0) => 3.0,
                _ => -5.0,
            }),
        })
    }
}

fn main() -> Result<()> {
    // Center-form boxes in [0, 1].
    let unit = Tensor::new(&[2, 4], vec![0.3, 0.3, 0.25, 0.2, 0.7, 0.65, 0.3, 0.4])?;
    let denoiser = Fixed {
        signal: normalize(&unit, 2.0),
    };
    let cfg = DetectorConfig {
        num_proposals: 10,
        ddim_steps: 3,
        ..DetectorConfig::default()
    };
    let image = Tensor::zeros(&[1, 3, 64, 64]);
    let res = infer_with(
        &denoiser,
        &cfg,
        &image,
        &mut ChaCha8Rng::seed_from_u64(0),
        true,
    )?;
    for ((b, s), l) in res.boxes.iter().zip(&res.scores).zip(&res.labels) {
        println!("class {l} score {s:.3} box {:?}", b.to_array());
    }
    println!("{} trace rows", res.trace.len());
    Ok(())
}
