//! DDIM sampling from Gaussian proposals to scored detections.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{denoise_forward, DetectorConfig, Model};
use crate::data::{image_tensor, DetectionRecord, Rgb8};
use crate::diffusion::{ddim_timesteps, denormalize, epsilon_from_x0};
use crate::error::{Error, Result};
use crate::geometry::{nms, BoxCxcywh, BoxXyxy};
use crate::tensor::{Graph, Tensor};

/// What the sampler needs from a denoiser for one image.
pub struct Prediction {
    /// `[1, N, 4]` clean signal.
    pub x0_hat: Tensor,
    /// `[1, N, C]`
    pub logits: Tensor,
}

/// A denoising network, or a stand-in for testing the sampler.
pub trait Denoiser {
    /// `image` is `[1, 3, H, W]`, `x_t` is `[1, N, 4]`.
    fn predict(&self, image: &Tensor, x_t: &Tensor, t: usize) -> Result<Prediction>;
}

impl Denoiser for Model {
    fn predict(&self, image: &Tensor, x_t: &Tensor, t: usize) -> Result<Prediction> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = denoise_forward(&p, &self.config, g.constant(image.clone()), x_t, &[t], None)?;
        let x0_hat = out.x0_hat.value().as_ref().clone();
        let logits = out.logits.value().as_ref().clone();
        Ok(Prediction { x0_hat, logits })
    }
}

/// One proposal at one sampling step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub t: usize,
    pub proposal: usize,
    /// Predicted clean box, pixel corners.
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Pixel corners, clipped to the image.
    pub boxes: Vec<BoxXyxy>,
    /// Descending.
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    pub trace: Vec<TraceRow>,
}

impl DetectionResult {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// COCO result records; `category_ids[label]` maps class indices to ids.
    pub fn records(&self, image_id: u64, category_ids: &[u64]) -> Result<Vec<DetectionRecord>> {
        self.boxes
            .iter()
            .zip(&self.scores)
            .zip(&self.labels)
            .map(|((b, &score), &l)| {
                let category_id = *category_ids
                    .get(l)
                    .ok_or_else(|| Error::Index(format!("label {l} of {}", category_ids.len())))?;
                Ok(DetectionRecord {
                    image_id,
                    category_id,
                    bbox: vec![b.x1, b.y1, b.width(), b.height()],
                    score,
                })
            })
            .collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Clean signal `[1, N, 4]` to clipped pixel corners.
fn signal_boxes(x0: &Tensor, scale: f64, w: usize, h: usize) -> Vec<BoxXyxy> {
    let (wf, hf) = (w as f64, h as f64);
    denormalize(x0, scale)
        .data()
        .chunks(4)
        .map(|c| {
            BoxCxcywh::new(c[0] * wf, c[1] * hf, c[2] * wf, c[3] * hf)
                .to_xyxy()
                .clipped(wf, hf)
        })
        .collect()
}

/// Best class and its probability per proposal.
fn best_classes(logits: &Tensor) -> Vec<(usize, f64)> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = (0, f64::NEG_INFINITY);
            for (k, &z) in row.iter().enumerate() {
                if z > best.1 {
                    best = (k, z);
                }
            }
            (best.0, sigmoid(best.1))
        })
        .collect()
}

/// The sampling loop over any denoiser.
///
/// Starts from clamped Gaussian signal, runs one denoising pass per DDIM
/// step, renews low-scoring proposals between steps, and turns the last
/// prediction into detections: best class per proposal, score threshold,
/// per-class NMS, descending score.
pub fn infer_with(
    denoiser: &dyn Denoiser,
    cfg: &DetectorConfig,
    image: &Tensor,
    rng: &mut dyn RngCore,
    trace: bool,
) -> Result<DetectionResult> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::shape(
            "infer",
            format!("image {s:?}, expected [1, 3, H, W]"),
        ));
    }
    let (h, w) = (s[2], s[3]);
    let diffusion = cfg.diffusion()?;
    let n = cfg.num_proposals;
    let scale = cfg.signal_scale;
    let mut x = Tensor::randn(&[1, n, 4], rng).map(|v| v.clamp(-scale, scale));
    let ts = ddim_timesteps(cfg.timesteps, cfg.ddim_steps)?;
    let mut rows = Vec::new();
    let mut last: Option<Prediction> = None;
    for i in 0..cfg.ddim_steps {
        let (t, t_prev) = (ts[i], ts[i + 1]);
        let pred = denoiser.predict(image, &x, t)?;
        if pred.x0_hat.shape() != [1, n, 4]
            || pred.logits.shape().len() != 3
            || pred.logits.shape()[1] != n
        {
            return Err(Error::Contract(format!(
                "denoiser returned {:?} and {:?} for {n} proposals",
                pred.x0_hat.shape(),
                pred.logits.shape()
            )));
        }
        if trace {
            let boxes = signal_boxes(&pred.x0_hat, scale, w, h);
            for (k, (b, (_, score))) in boxes.iter().zip(best_classes(&pred.logits)).enumerate() {
                rows.push(TraceRow {
                    step: i,
                    t,
                    proposal: k,
                    bbox: b.to_array(),
                    score,
                });
            }
        }
        let eps = epsilon_from_x0(&x, &pred.x0_hat, diffusion.schedule.alpha_bar(t)?)?;
        x = diffusion.ddim_step(&x, &pred.x0_hat, &eps, t, t_prev)?;
        if i + 1 < cfg.ddim_steps && (i + 1) % cfg.renewal_stride == 0 {
            let scores = pred.logits.map(sigmoid);
            x = diffusion.renew(&x, &scores, cfg.renewal_threshold, rng)?.0;
        }
        last = Some(pred);
    }
    let pred =
        last.ok_or_else(|| Error::Config("at least one sampling step is required".into()))?;

    let boxes = signal_boxes(&pred.x0_hat, scale, w, h);
    let best = best_classes(&pred.logits);
    let candidates: Vec<usize> = (0..n)
        .filter(|&k| best[k].1 > cfg.score_threshold)
        .collect();
    let mut keep: Vec<usize> = Vec::new();
    let mut labels: Vec<usize> = candidates.iter().map(|&k| best[k].0).collect();
    labels.sort_unstable();
    labels.dedup();
    for label in labels {
        let members: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&k| best[k].0 == label)
            .collect();
        let bx: Vec<BoxXyxy> = members.iter().map(|&k| boxes[k]).collect();
        let sc: Vec<f64> = members.iter().map(|&k| best[k].1).collect();
        keep.extend(nms(&bx, &sc, cfg.nms_iou).into_iter().map(|j| members[j]));
    }
    keep.sort_by(|&a, &b| best[b].1.total_cmp(&best[a].1).then(a.cmp(&b)));
    Ok(DetectionResult {
        boxes: keep.iter().map(|&k| boxes[k]).collect(),
        scores: keep.iter().map(|&k| best[k].1).collect(),
        labels: keep.iter().map(|&k| best[k].0).collect(),
        trace: rows,
    })
}

/// Detect objects in one image with a trained model.
pub fn infer(
    model: &Model,
    image: &Rgb8,
    rng: &mut dyn RngCore,
    trace: bool,
) -> Result<DetectionResult> {
    infer_with(model, &model.config, &image_tensor(&[image])?, rng, trace)
}
