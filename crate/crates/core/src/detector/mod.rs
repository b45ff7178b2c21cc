//! The assembled detector: configuration, parameters, the denoising
//! forward pass, training, DDIM inference and checkpoints.
//!
//! The box head predicts refinements of the noisy proposal it pooled from,
//! in the usual `(dx, dy, dw, dh)` parametrization; they are decoded into a
//! corner box and re-encoded as the clean signal `x̂_0`.

mod blocks;
mod checkpoint;
mod infer;
mod train;

pub use blocks::{gradcheck_block, BLOCKS};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use infer::{infer, infer_with, Denoiser, DetectionResult, Prediction, TraceRow};
pub use train::{pad_targets, train_step, StepReport, TrainState};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::data::Augmentation;
use crate::diffusion::{Diffusion, NoiseSchedule, COSINE_OFFSET, DEFAULT_SCALE};
use crate::error::{Error, Result};
use crate::geometry::{BoxCxcywh, BoxXyxy};
use crate::head::{self, HeadConfig};
use crate::loss::MatchWeights;
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Tensor, Var};

/// Upper clamp on predicted log-scale changes.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)
/// Proposal sides are floored at one pixel before pooling and decoding.
const MIN_PROPOSAL_SIDE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length in steps.
    pub warmup: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub augmentation: Augmentation,
    pub log_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 4,
            lr: 2.5e-5,
            warmup: 0,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            augmentation: Augmentation::default(),
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > 1023 {
            return Err(Error::Config(format!(
                "batch size {} outside 1..=1023",
                self.batch_size
            )));
        }
        let positive = [self.lr, self.clip_norm, self.adam_eps];
        if positive.iter().any(|&v| !(v > 0.0) || !v.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate, clip norm and epsilon must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        self.augmentation.validate()
    }

    /// Learning rate at a 0-based step.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            self.lr * (step + 1) as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub num_proposals: usize,
    /// Diffusion length `T`.
    pub timesteps: usize,
    pub ddim_steps: usize,
    pub signal_scale: f64,
    pub renewal_threshold: f64,
    /// Renew after every `renewal_stride`-th sampling step (never after the
    /// last).
    pub renewal_stride: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Fraction of the proposal slots filled with repeated ground truth
    /// during training; the rest are Gaussian boxes.
    pub gt_fill: f64,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub loss: MatchWeights,
    pub train: TrainConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_proposals: 500,
            timesteps: 1000,
            ddim_steps: 1,
            signal_scale: DEFAULT_SCALE,
            renewal_threshold: 0.5,
            renewal_stride: 1,
            score_threshold: 0.05,
            nms_iou: 0.5,
            gt_fill: 0.5,
            seed: 0,
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            loss: MatchWeights::default(),
            train: TrainConfig::default(),
        }
    }
}

fn unit_open(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} {v} outside (0, 1)")))
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.num_proposals == 0 {
            return Err(Error::Config("num_proposals must be at least 1".into()));
        }
        if self.ddim_steps == 0 || self.ddim_steps >= self.timesteps {
            return Err(Error::Config(format!(
                "ddim_steps {} must lie in [1, T = {})",
                self.ddim_steps, self.timesteps
            )));
        }
        if !(self.signal_scale > 0.0 && self.signal_scale.is_finite()) {
            return Err(Error::Config("signal_scale must be positive".into()));
        }
        unit_open("renewal_threshold", self.renewal_threshold)?;
        unit_open("score_threshold", self.score_threshold)?;
        unit_open("nms_iou", self.nms_iou)?;
        if !(0.0..=1.0).contains(&self.gt_fill) {
            return Err(Error::Config(format!(
                "gt_fill {} outside [0, 1]",
                self.gt_fill
            )));
        }
        if self.renewal_stride == 0 {
            return Err(Error::Config("renewal_stride must be at least 1".into()));
        }
        if self.head.dim != self.backbone.fpn_dim
            || self.head.context_dim != self.backbone.context_dim
        {
            return Err(Error::Config(format!(
                "head widths ({}, {}) must equal pyramid and context widths ({}, {})",
                self.head.dim,
                self.head.context_dim,
                self.backbone.fpn_dim,
                self.backbone.context_dim
            )));
        }
        Ok(())
    }

    pub fn diffusion(&self) -> Result<Diffusion> {
        Ok(Diffusion::new(
            NoiseSchedule::cosine(self.timesteps, COSINE_OFFSET)?,
            self.signal_scale,
        ))
    }

    /// A compact configuration for quick experiments on 64×64 images.
    pub fn small() -> Self {
        DetectorConfig {
            num_proposals: 64,
            ..Default::default()
        }
    }
}

/// Deterministic generator for one named purpose of one run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = u64::MAX;

/// Configuration plus every learned tensor.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: DetectorConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, INIT_STREAM);
        let mut params = ParamStore::new();
        backbone::init(&mut params, &config.backbone, &mut rng)?;
        head::init(&mut params, &config.head, &mut rng)?;
        round_to_f32(params.tensors_mut());
        Ok(Model { config, params })
    }
}

/// Round every value to the nearest `f32`, the checkpoint precision.
pub fn round_to_f32(ts: &mut [Tensor]) {
    for t in ts {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Noisy proposals in pixel corners, with sides floored at one pixel.
pub fn signal_to_boxes(
    x_t: &Tensor,
    scale: f64,
    width: usize,
    height: usize,
) -> Result<Vec<Vec<BoxXyxy>>> {
    let s = x_t.shape();
    if s.len() != 3 || s[2] != 4 {
        return Err(Error::shape(
            "signal_to_boxes",
            format!("{s:?}, expected [B, N, 4]"),
        ));
    }
    let norm = crate::diffusion::denormalize(x_t, scale);
    let (w, h) = (width as f64, height as f64);
    Ok(norm
        .data()
        .chunks(4 * s[1])
        .map(|img| {
            img.chunks(4)
                .map(|c| {
                    let b = BoxCxcywh::new(
                        c[0] * w,
                        c[1] * h,
                        (c[2] * w).max(MIN_PROPOSAL_SIDE),
                        (c[3] * h).max(MIN_PROPOSAL_SIDE),
                    );
                    b.to_xyxy()
                })
                .collect()
        })
        .collect())
}

/// Outputs of one denoising pass, all `[B, N, ·]`.
pub struct DenoiseOutputs<'g> {
    /// Predicted clean signal.
    pub x0_hat: Var<'g>,
    /// The same prediction as normalized corner boxes.
    pub boxes: Var<'g>,
    pub logits: Var<'g>,
    pub eps_pred: Var<'g>,
}

/// Decode `(dx, dy, dw, dh)` against pixel proposals into normalized
/// corner boxes and the clean signal.
pub fn decode_boxes<'g>(
    deltas: Var<'g>,
    proposals: &[Vec<BoxXyxy>],
    width: usize,
    height: usize,
    scale: f64,
) -> Result<(Var<'g>, Var<'g>)> {
    let g = deltas.graph();
    let s = deltas.shape();
    let (b, n) = (s[0], s[1]);
    let column = |f: &dyn Fn(&BoxCxcywh) -> f64| -> Result<Var<'g>> {
        let data = proposals
            .iter()
            .flatten()
            .map(|p| f(&p.to_cxcywh()))
            .collect();
        Ok(g.constant(Tensor::new(&[b, n, 1], data)?))
    };
    let (pcx, pcy) = (column(&|p| p.cx)?, column(&|p| p.cy)?);
    let (pw, ph) = (column(&|p| p.w)?, column(&|p| p.h)?);
    let (hw, hh) = (column(&|p| p.w / 2.0)?, column(&|p| p.h / 2.0)?);
    let d = |i: usize| deltas.narrow(i, 1);
    let cx = d(0)?.mul(hw)?.add(pcx)?;
    let cy = d(1)?.mul(hh)?.add(pcy)?;
    let w = d(2)?.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE)?.exp()?.mul(pw)?;
    let h = d(3)?.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE)?.exp()?.mul(ph)?;
    let (fw, fh) = (1.0 / width as f64, 1.0 / height as f64);
    let half_w = w.scale(0.5)?;
    let half_h = h.scale(0.5)?;
    let boxes = g.concat(&[
        cx.sub(half_w)?.scale(fw)?,
        cy.sub(half_h)?.scale(fh)?,
        cx.add(half_w)?.scale(fw)?,
        cy.add(half_h)?.scale(fh)?,
    ])?;
    let signal = |v: Var<'g>, f: f64| v.scale(2.0 * scale * f)?.shift(-scale);
    let x0 = g.concat(&[
        signal(cx, fw)?,
        signal(cy, fh)?,
        signal(w, fw)?,
        signal(h, fh)?,
    ])?;
    Ok((x0, boxes))
}

/// One pass of the denoiser: image features, RoI pooling at the noisy
/// proposals, context fusion and the heads.
///
/// `image` is `[B, 3, H, W]`, `x_t` the `[B, N, 4]` noisy signal and `t`
/// one timestep per image.
pub fn denoise_forward<'g>(
    p: &Bound<'_, 'g>,
    cfg: &DetectorConfig,
    image: Var<'g>,
    x_t: &Tensor,
    t: &[usize],
    rng: Option<&mut dyn RngCore>,
) -> Result<DenoiseOutputs<'g>> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::shape("denoise_forward", format!("image {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    if x_t.shape().first() != Some(&s[0]) {
        return Err(Error::shape(
            "denoise_forward",
            format!("signal {:?} for batch {}", x_t.shape(), s[0]),
        ));
    }
    let proposals = signal_to_boxes(x_t, cfg.signal_scale, w, h)?;
    let stages = backbone::backbone_forward(p, &cfg.backbone, image)?;
    let c5 = backbone::ace_forward(p, stages.c[3])?;
    let pyramid = backbone::fpn_forward(p, &cfg.backbone, &stages, c5)?;
    let g = backbone::gce_forward(p, &cfg.backbone, image)?;
    let f_roi = backbone::roi_pool(&cfg.backbone, &pyramid, &proposals)?;
    let out = head::head_forward(p, &cfg.head, f_roi, g, t, rng)?;
    let (x0_hat, boxes) = decode_boxes(out.box_deltas, &proposals, w, h, cfg.signal_scale)?;
    Ok(DenoiseOutputs {
        x0_hat,
        boxes,
        logits: out.logits,
        eps_pred: out.eps_pred,
    })
}
