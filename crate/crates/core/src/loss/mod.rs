//! Set-prediction loss: focal classification, L1 and GIoU box terms,
//! the pairwise matching cost and Hungarian assignment.
//!
//! Boxes in this module are normalized corner boxes (`[0, 1]` image
//! fractions). The assignment is computed from plain values and treated as
//! a constant of the differentiable loss.

mod hungarian;

pub use hungarian::{hungarian, Assignment};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, BoxXyxy};
use crate::tensor::{Graph, Tensor, Var};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    /// Weight of the noise-prediction MSE in the training loss (not used
    /// for matching).
    pub noise: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            noise: 0.0,
        }
    }
}

impl MatchWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.cls, self.l1, self.giou, self.noise];
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || self.cls + self.l1 + self.giou <= 0.0
        {
            return Err(Error::Config(format!("invalid loss weights {w:?}")));
        }
        Ok(())
    }
}

/// Focal loss of one probability against a binary target.
pub fn focal(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Ground truth of one image: normalized boxes and class ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub boxes: Vec<BoxXyxy>,
    pub classes: Vec<usize>,
}

/// `C[i][j] = λ_cls·focal(p_i[c_j], 1) + λ_L1·‖b_i − b_j‖₁ + λ_giou·(1 − giou)`.
///
/// `probs[i]` are per-class probabilities of proposal `i`.
pub fn matching_cost(
    probs: &[Vec<f64>],
    boxes: &[BoxXyxy],
    gt: &Targets,
    w: &MatchWeights,
) -> Result<Vec<Vec<f64>>> {
    if probs.len() != boxes.len() || gt.boxes.len() != gt.classes.len() {
        return Err(Error::shape(
            "matching_cost",
            "prediction or target lengths differ",
        ));
    }
    probs
        .iter()
        .zip(boxes)
        .map(|(p, b)| {
            gt.boxes
                .iter()
                .zip(&gt.classes)
                .map(|(gb, &c)| {
                    let pc = *p
                        .get(c)
                        .ok_or_else(|| Error::Index(format!("class {c} of {}", p.len())))?;
                    let l1: f64 = b
                        .to_array()
                        .iter()
                        .zip(gb.to_array())
                        .map(|(x, y)| (x - y).abs())
                        .sum();
                    Ok(w.cls * focal(pc, true, FOCAL_ALPHA, FOCAL_GAMMA)
                        + w.l1 * l1
                        + w.giou * (1.0 - giou(b, gb)))
                })
                .collect()
        })
        .collect()
}

/// Per-term values of a set loss, each already divided by `max(1, M)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub noise: f64,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.cls += o.cls;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.noise += o.noise;
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.total *= s;
        self.cls *= s;
        self.l1 *= s;
        self.giou *= s;
        self.noise *= s;
        self
    }
}

/// Sum of elementwise focal losses of `logits` against the 0/1 `targets`.
pub fn focal_sum<'g>(logits: Var<'g>, targets: &Tensor) -> Result<Var<'g>> {
    let g = logits.graph();
    let t = g.constant(targets.clone());
    let not_t = g.constant(targets.map(|v| 1.0 - v));
    let p = logits.sigmoid()?.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let q = p.one_minus()?;
    let pos = q.powf(FOCAL_GAMMA)?.mul(p.ln()?)?.scale(-FOCAL_ALPHA)?;
    let neg = p
        .powf(FOCAL_GAMMA)?
        .mul(q.ln()?)?
        .scale(-(1.0 - FOCAL_ALPHA))?;
    pos.mul(t)?.add(neg.mul(not_t)?)?.sum()
}

/// Column `i` of `[K, 4]` as `[K, 1]`.
fn coord<'g>(b: Var<'g>, i: usize) -> Result<Var<'g>> {
    b.narrow(i, 1)
}

/// `Σ (1 − giou(pred_k, gt_k))` over rows of two `[K, 4]` corner-box
/// tensors; predictions must be canonical with positive area.
pub fn giou_loss_sum<'g>(pred: Var<'g>, gt: Var<'g>) -> Result<Var<'g>> {
    let [px1, py1, px2, py2] = [0, 1, 2, 3].map(|i| coord(pred, i));
    let [gx1, gy1, gx2, gy2] = [0, 1, 2, 3].map(|i| coord(gt, i));
    let (px1, py1, px2, py2) = (px1?, py1?, px2?, py2?);
    let (gx1, gy1, gx2, gy2) = (gx1?, gy1?, gx2?, gy2?);
    let area_p = px2.sub(px1)?.mul(py2.sub(py1)?)?;
    let area_g = gx2.sub(gx1)?.mul(gy2.sub(gy1)?)?;
    let iw = px2.minimum(gx2)?.sub(px1.maximum(gx1)?)?.relu()?;
    let ih = py2.minimum(gy2)?.sub(py1.maximum(gy1)?)?.relu()?;
    let inter = iw.mul(ih)?;
    let union = area_p.add(area_g)?.sub(inter)?;
    let cw = px2.maximum(gx2)?.sub(px1.minimum(gx1)?)?;
    let ch = py2.maximum(gy2)?.sub(py1.minimum(gy1)?)?;
    let enclosing = cw.mul(ch)?;
    let iou = inter.div(union)?;
    let penalty = enclosing.sub(union)?.div(enclosing)?;
    iou.sub(penalty)?.one_minus()?.sum()
}

/// Predictions of one image entering the set loss.
pub struct SetPredictions<'g> {
    /// `[N, C]`
    pub logits: Var<'g>,
    /// `[N, 4]` normalized corner boxes.
    pub boxes: Var<'g>,
    /// `[N, 4]` predicted noise and the true noise it is compared with.
    pub noise: Option<(Var<'g>, Tensor)>,
}

/// Hungarian-matched loss of one image, normalized by `max(1, M)`.
///
/// Matched proposals take the focal loss against their gt class plus the
/// weighted L1 and GIoU terms; every other class score is a background
/// target.
pub fn set_loss<'g>(
    g: &'g Graph,
    pred: &SetPredictions<'g>,
    gt: &Targets,
    assignment: &Assignment,
    w: &MatchWeights,
) -> Result<(Var<'g>, LossParts)> {
    let ls = pred.logits.shape();
    if ls.len() != 2 || pred.boxes.shape() != [ls[0], 4] {
        return Err(Error::shape(
            "set_loss",
            format!("logits {ls:?}, boxes {:?}", pred.boxes.shape()),
        ));
    }
    let (n, c) = (ls[0], ls[1]);
    let norm = 1.0 / gt.boxes.len().max(1) as f64;

    let mut targets = Tensor::zeros(&[n, c]);
    for &(p, j) in &assignment.pairs {
        let class = gt.classes[j];
        if class >= c || p >= n {
            return Err(Error::Index(format!("pair ({p}, {j}) class {class}")));
        }
        targets.data_mut()[p * c + class] = 1.0;
    }
    let cls = focal_sum(pred.logits, &targets)?.scale(norm)?;
    let mut total = cls.scale(w.cls)?;
    let mut parts = LossParts {
        cls: cls.value().item()?,
        ..Default::default()
    };

    if !assignment.pairs.is_empty() {
        let rows: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
        let gt_rows: Vec<f64> = assignment
            .pairs
            .iter()
            .flat_map(|&(_, j)| gt.boxes[j].to_array())
            .collect();
        let k = rows.len();
        let matched = pred.boxes.index_select(&rows)?;
        let gt_t = g.constant(Tensor::new(&[k, 4], gt_rows)?);
        let l1 = matched.sub(gt_t)?.abs()?.sum()?.scale(norm)?;
        let gi = giou_loss_sum(matched, gt_t)?.scale(norm)?;
        parts.l1 = l1.value().item()?;
        parts.giou = gi.value().item()?;
        total = total.add(l1.scale(w.l1)?)?.add(gi.scale(w.giou)?)?;

        if let (Some((eps_pred, eps_true)), true) = (&pred.noise, w.noise > 0.0) {
            let picked = eps_pred.index_select(&rows)?;
            let truth = Tensor::new(
                &[k, 4],
                rows.iter()
                    .flat_map(|&r| eps_true.data()[r * 4..(r + 1) * 4].to_vec())
                    .collect(),
            )?;
            let mse = picked.sub(g.constant(truth))?.powf(2.0)?.mean()?;
            parts.noise = mse.value().item()?;
            total = total.add(mse.scale(w.noise)?)?;
        }
    }
    parts.total = total.value().item()?;
    Ok((total, parts))
}
