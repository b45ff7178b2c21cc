//! Train-time augmentation: horizontal flip and scale jitter on a fixed
//! canvas.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::Rgb8;
use crate::error::{Error, Result};
use crate::geometry::BoxXyxy;

/// Boxes narrower or shorter than this (pixels) after jitter are dropped.
const MIN_SIDE: f64 = 2.0;
const FILL: u8 = 120;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    pub flip_prob: f64,
    /// Scale factors are drawn from `[1 − j, 1 + j]`.
    pub scale_jitter: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            flip_prob: 0.5,
            scale_jitter: 0.125,
        }
    }
}

impl Augmentation {
    pub const NONE: Augmentation = Augmentation {
        flip_prob: 0.0,
        scale_jitter: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..0.5).contains(&self.scale_jitter) {
            return Err(Error::Config(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

/// Augmented image, boxes and the indices of the input boxes that survived.
pub fn augment(
    img: &Rgb8,
    boxes: &[BoxXyxy],
    aug: &Augmentation,
    rng: &mut dyn RngCore,
) -> (Rgb8, Vec<BoxXyxy>, Vec<usize>) {
    let flip = aug.flip_prob > 0.0 && rng.random::<f64>() < aug.flip_prob;
    let s = if aug.scale_jitter > 0.0 {
        rng.random_range(1.0 - aug.scale_jitter..=1.0 + aug.scale_jitter)
    } else {
        1.0
    };
    let (w, h) = (img.width, img.height);
    let mut out = Rgb8::new(w, h);
    for y in 0..h {
        for x in 0..w {
            // Nearest source pixel of the output pixel centre.
            let sx = ((x as f64 + 0.5) / s - 0.5).round();
            let sy = ((y as f64 + 0.5) / s - 0.5).round();
            let c = if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                let sx = if flip {
                    w - 1 - sx as usize
                } else {
                    sx as usize
                };
                img.get(sx, sy as usize)
            } else {
                [FILL; 3]
            };
            out.set(x, y, c);
        }
    }
    let (wf, hf) = (w as f64, h as f64);
    let mut kept = Vec::new();
    let mut out_boxes = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let b = if flip {
            BoxXyxy::new(wf - b.x2, b.y1, wf - b.x1, b.y2)
        } else {
            *b
        };
        let b = b.scaled(s, s).clipped(wf, hf);
        if b.width() >= MIN_SIDE && b.height() >= MIN_SIDE {
            kept.push(i);
            out_boxes.push(b);
        }
    }
    (out, out_boxes, kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_without_jitter() {
        let mut img = Rgb8::new(4, 4);
        img.set(1, 2, [9, 8, 7]);
        let b = [BoxXyxy::new(0.0, 0.0, 3.0, 3.0)];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (o, ob, k) = augment(&img, &b, &Augmentation::NONE, &mut rng);
        assert_eq!(o, img);
        assert_eq!(ob, b.to_vec());
        assert_eq!(k, vec![0]);
    }

    #[test]
    fn flip_mirrors_boxes() {
        let img = Rgb8::new(10, 10);
        let aug = Augmentation {
            flip_prob: 1.0,
            scale_jitter: 0.0,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (_, ob, _) = augment(&img, &[BoxXyxy::new(1.0, 2.0, 4.0, 6.0)], &aug, &mut rng);
        assert_eq!(ob, vec![BoxXyxy::new(6.0, 2.0, 9.0, 6.0)]);
    }
}
