//! One optimisation step: augment, pad ground truth to `N` proposals,
//! corrupt, denoise, match, and apply a clipped decoupled-weight-decay Adam
//! update.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{denoise_forward, round_to_f32, stream_rng, Model};
use crate::data::{augment, image_tensor, Dataset};
use crate::diffusion::normalize;
use crate::error::{Error, Result};
use crate::geometry::BoxXyxy;
use crate::loss::{hungarian, matching_cost, set_loss, LossParts, SetPredictions, Targets};
use crate::nn::ParamStore;
use crate::tensor::{Graph, Tensor};

/// Streams of one step are `step * STEP_STREAMS + k`: `k = 0` draws the
/// batch, `k = 1 + i` drives image slot `i`.
const STEP_STREAMS: u64 = 1024;

/// Optimiser moments and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl TrainState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        TrainState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// 0-based index of the step just taken.
    pub step: u64,
    /// Batch mean of the per-image losses.
    pub loss: LossParts,
    pub lr: f64,
    /// Global gradient norm before and after clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Clean training signal `[N, 4]`: normalized center-form ground truth
/// repeated over `⌊fill·N / M⌋` rounds (at least one), then unit Gaussian
/// signal boxes. With more gts than slots the first `N` are kept.
pub fn pad_targets(
    gt: &[[f64; 4]],
    n: usize,
    fill: f64,
    scale: f64,
    rng: &mut dyn RngCore,
) -> Tensor {
    let m = gt.len();
    let repeated = if m == 0 {
        0
    } else if m >= n {
        n
    } else {
        let rounds = ((fill * n as f64) as usize / m).max(1);
        (rounds * m).min(n)
    };
    let mut data = Vec::with_capacity(n * 4);
    for k in 0..repeated {
        data.extend_from_slice(&gt[k % m]);
    }
    let gt_part = normalize(&Tensor::new(&[repeated, 4], data).expect("sized"), scale);
    let mut out = gt_part.into_data();
    for _ in repeated * 4..n * 4 {
        let z: f64 = rng.sample(StandardNormal);
        out.push(z.clamp(-scale, scale));
    }
    Tensor::new(&[n, 4], out).expect("sized")
}

/// Gradients and loss of one image.
fn image_gradients(
    model: &Model,
    data: &Dataset,
    index: usize,
    rng: &mut dyn RngCore,
) -> Result<(Vec<Tensor>, LossParts)> {
    let cfg = &model.config;
    let sample = &data.samples[index];
    let (img, boxes, kept) = augment(&sample.image, &sample.boxes, &cfg.train.augmentation, rng);
    let (w, h) = (img.width as f64, img.height as f64);
    let targets = Targets {
        boxes: boxes
            .iter()
            .map(|b| BoxXyxy::new(b.x1 / w, b.y1 / h, b.x2 / w, b.y2 / h))
            .collect(),
        classes: kept.iter().map(|&i| sample.classes[i]).collect(),
    };
    let n = cfg.num_proposals;
    let gt_cxcywh: Vec<[f64; 4]> = targets
        .boxes
        .iter()
        .map(|b| b.to_cxcywh().to_array())
        .collect();
    let x0 = pad_targets(&gt_cxcywh, n, cfg.gt_fill, cfg.signal_scale, rng);
    let diffusion = cfg.diffusion()?;
    let t = rng.random_range(0..cfg.timesteps);
    let noise = Tensor::randn(&[1, n, 4], rng);
    let x_t = diffusion.q_sample(&x0.reshape(&[1, n, 4])?, t, &noise)?;

    let g = Graph::new();
    let p = model.params.bind(&g, true);
    let image = g.constant(image_tensor(&[&img])?);
    let dropout_rng: Option<&mut dyn RngCore> = if cfg.head.dropout > 0.0 {
        Some(rng)
    } else {
        None
    };
    let out = denoise_forward(&p, cfg, image, &x_t, &[t], dropout_rng)?;
    let c = cfg.head.num_classes;
    let logits = out.logits.reshape(&[n, c])?;
    let pred_boxes = out.boxes.reshape(&[n, 4])?;

    let probs: Vec<Vec<f64>> = logits
        .value()
        .data()
        .chunks(c)
        .map(|r| r.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect())
        .collect();
    let boxes_now: Vec<BoxXyxy> = pred_boxes
        .value()
        .data()
        .chunks(4)
        .map(|r| BoxXyxy::new(r[0], r[1], r[2], r[3]))
        .collect();
    let cost = matching_cost(&probs, &boxes_now, &targets, &cfg.loss)?;
    let assignment = hungarian(&cost)?;
    let pred = SetPredictions {
        logits,
        boxes: pred_boxes,
        noise: Some((out.eps_pred.reshape(&[n, 4])?, noise.reshape(&[n, 4])?)),
    };
    let (loss, parts) = set_loss(&g, &pred, &targets, &assignment, &cfg.loss)?;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grads = g.backward(loss)?;
    Ok((p.gradients(&grads), parts))
}

/// One optimisation step over a batch drawn with replacement from `data`.
///
/// Everything random is derived from `(config.seed, state.step)`, so a run
/// resumed from a checkpoint continues exactly as an uninterrupted one.
pub fn train_step(model: &mut Model, state: &mut TrainState, data: &Dataset) -> Result<StepReport> {
    if data.samples.is_empty() {
        return Err(Error::Contract("training needs at least one image".into()));
    }
    let cfg = model.config.clone();
    let tc = &cfg.train;
    let step = state.step;
    let base = step * STEP_STREAMS;
    let mut pick = stream_rng(cfg.seed, base);
    let batch: Vec<usize> = (0..tc.batch_size)
        .map(|_| pick.random_range(0..data.samples.len()))
        .collect();

    let results: Vec<Result<(Vec<Tensor>, LossParts)>> = batch
        .par_iter()
        .enumerate()
        .map(|(k, &index)| {
            let mut rng = stream_rng(cfg.seed, base + 1 + k as u64);
            image_gradients(model, data, index, &mut rng)
        })
        .collect();

    let inv = 1.0 / batch.len() as f64;
    let mut grads: Vec<Tensor> = model
        .params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut loss = LossParts::default();
    for r in results {
        let (g, parts) = r?;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
        loss.add(&parts);
    }
    let loss = loss.scaled(inv);

    let mut sq = 0.0;
    for gt in &mut grads {
        for v in gt.data_mut() {
            *v *= inv;
            sq += *v * *v;
        }
    }
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite("gradient norm"));
    }
    let clip = if grad_norm > tc.clip_norm {
        tc.clip_norm / grad_norm
    } else {
        1.0
    };
    let mut sq = 0.0;
    for gt in &mut grads {
        for v in gt.data_mut() {
            *v *= clip;
            sq += *v * *v;
        }
    }
    let clipped_norm = sq.sqrt();

    let lr = tc.lr_at(step);
    let tpow = (step + 1) as i32;
    let bc1 = 1.0 - tc.beta1.powi(tpow);
    let bc2 = 1.0 - tc.beta2.powi(tpow);
    for (((p, g), m), v) in model
        .params
        .tensors_mut()
        .iter_mut()
        .zip(&grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = tc.beta1 * md[i] + (1.0 - tc.beta1) * gi;
            vd[i] = tc.beta2 * vd[i] + (1.0 - tc.beta2) * gi * gi;
            let update =
                (md[i] / bc1) / ((vd[i] / bc2).sqrt() + tc.adam_eps) + tc.weight_decay * pd[i];
            pd[i] -= lr * update;
        }
    }
    round_to_f32(model.params.tensors_mut());
    round_to_f32(&mut state.m);
    round_to_f32(&mut state.v);
    state.step += 1;
    Ok(StepReport {
        step,
        loss,
        lr,
        grad_norm,
        clipped_norm,
    })
}
