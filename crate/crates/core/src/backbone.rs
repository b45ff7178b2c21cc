//! Image feature extraction: a small CNN backbone, channel attention on its
//! last stage, a feature pyramid, the global context encoder, and RoI
//! pooling from the pyramid.
//!
//! The backbone stands in for a large pretrained transformer; everything
//! downstream only relies on four maps at strides 4, 8, 16 and 32.
//!
//! Initialization is fan-in scaled uniform everywhere, including the
//! context encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{assign_fpn_level, BoxXyxy};
use crate::nn::{init_conv, init_linear, Bound, ParamStore};
use crate::tensor::{RoiSample, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channels of C2..C5.
    pub channels: [usize; 4],
    /// Append normalized x/y coordinate maps to the image.
    pub coord_channels: bool,
    /// Channel-attention reduction ratio on C5.
    pub ace_reduction: usize,
    pub fpn_dim: usize,
    /// Widths of the first two context-encoder convolutions.
    pub gce_widths: [usize; 2],
    /// Global context dimension.
    pub context_dim: usize,
    /// Residual average-pool path in the context encoder; off gives the
    /// plain three-convolution encoder.
    pub gce_residual: bool,
    /// Build a stride-2 P1 level from the stem and allow level 1 assignment.
    pub use_p1: bool,
    /// Samples per side of the RoI grid.
    pub roi_grid: usize,
    /// Base size of the level assignment rule.
    pub level_base: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: [16, 32, 64, 128],
            coord_channels: true,
            ace_reduction: 16,
            fpn_dim: 64,
            gce_widths: [64, 128],
            context_dim: 64,
            gce_residual: true,
            use_p1: false,
            roi_grid: 7,
            level_base: 224.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self
            .channels
            .iter()
            .chain(&self.gce_widths)
            .any(|&c| c == 0)
            || self.fpn_dim == 0
            || self.context_dim == 0
        {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        let c5 = self.channels[3];
        if self.ace_reduction == 0 || !c5.is_multiple_of(self.ace_reduction) {
            return Err(Error::Config(format!(
                "C5 width {c5} is not divisible by the reduction ratio {}",
                self.ace_reduction
            )));
        }
        if self.roi_grid == 0 || !(self.level_base > 0.0) {
            return Err(Error::Config(
                "roi grid and level base must be positive".into(),
            ));
        }
        Ok(())
    }

    fn input_channels(&self) -> usize {
        if self.coord_channels {
            5
        } else {
            3
        }
    }

    /// Lowest pyramid level present.
    pub fn min_level(&self) -> usize {
        if self.use_p1 {
            1
        } else {
            2
        }
    }
}

/// Register every backbone, ACE, FPN and context-encoder parameter.
pub fn init<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let [c2, c3, c4, c5] = cfg.channels;
    init_conv(store, "backbone.stem0", cfg.input_channels(), c2, 3, rng)?;
    init_conv(store, "backbone.stem1", c2, c2, 3, rng)?;
    let mut prev = c2;
    for (i, &c) in [c3, c4, c5].iter().enumerate() {
        init_conv(
            store,
            &format!("backbone.stage{}.down", i + 3),
            prev,
            c,
            3,
            rng,
        )?;
        init_conv(
            store,
            &format!("backbone.stage{}.conv", i + 3),
            c,
            c,
            3,
            rng,
        )?;
        prev = c;
    }

    init_linear(store, "ace.fc1", c5, c5 / cfg.ace_reduction, rng)?;
    init_linear(store, "ace.fc2", c5 / cfg.ace_reduction, c5, rng)?;

    let mut laterals: Vec<(usize, usize)> = vec![(2, c2), (3, c3), (4, c4), (5, c5)];
    if cfg.use_p1 {
        laterals.insert(0, (1, c2));
    }
    for (level, c) in laterals {
        init_conv(
            store,
            &format!("fpn.lateral{level}"),
            c,
            cfg.fpn_dim,
            1,
            rng,
        )?;
        init_conv(
            store,
            &format!("fpn.output{level}"),
            cfg.fpn_dim,
            cfg.fpn_dim,
            3,
            rng,
        )?;
    }

    let [g1, g2] = cfg.gce_widths;
    init_conv(store, "gce.conv1", 3, g1, 3, rng)?;
    init_conv(store, "gce.conv2", g1, g2, 3, rng)?;
    init_conv(store, "gce.conv3", g2, cfg.context_dim, 3, rng)?;
    if cfg.gce_residual {
        init_conv(store, "gce.residual", 3, cfg.context_dim, 1, rng)?;
    }
    Ok(())
}

/// Backbone stage outputs. `c1` is the stride-2 stem map.
pub struct Stages<'g> {
    pub c1: Var<'g>,
    pub c: [Var<'g>; 4],
}

fn check_image(image: &Var<'_>, multiple: usize) -> Result<(usize, usize, usize)> {
    let s = image.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape(
            "image",
            format!("expected [B, 3, H, W], got {s:?}"),
        ));
    }
    if s[2] == 0 || s[3] == 0 || !s[2].is_multiple_of(multiple) || !s[3].is_multiple_of(multiple) {
        return Err(Error::Config(format!(
            "image size {}x{} is not a positive multiple of {multiple}",
            s[2], s[3]
        )));
    }
    Ok((s[0], s[2], s[3]))
}

/// `[B, 2, H, W]` maps holding x and y in `[−1, 1]` at pixel centers.
fn coordinate_maps(b: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[b, 2, h, w], |i| {
        let x = i % w;
        let y = (i / w) % h;
        let ch = (i / (w * h)) % 2;
        if ch == 0 {
            (x as f64 + 0.5) / w as f64 * 2.0 - 1.0
        } else {
            (y as f64 + 0.5) / h as f64 * 2.0 - 1.0
        }
    })
}

pub fn backbone_forward<'g>(
    p: &Bound<'_, 'g>,
    cfg: &BackboneConfig,
    image: Var<'g>,
) -> Result<Stages<'g>> {
    let (b, h, w) = check_image(&image, 32)?;
    let g = image.graph();
    let input = if cfg.coord_channels {
        let coords = g.constant(coordinate_maps(b, h, w));
        let (img, co) = (
            image.permute(&[0, 2, 3, 1])?,
            coords.permute(&[0, 2, 3, 1])?,
        );
        g.concat(&[img, co])?.permute(&[0, 3, 1, 2])?
    } else {
        image
    };
    let c1 = p.conv("backbone.stem0", input, 2, 1)?.relu()?;
    let c2 = p.conv("backbone.stem1", c1, 2, 1)?.relu()?;
    let mut out = vec![c2];
    let mut x = c2;
    for s in 3..=5 {
        x = p
            .conv(&format!("backbone.stage{s}.down"), x, 2, 1)?
            .relu()?;
        x = p
            .conv(&format!("backbone.stage{s}.conv"), x, 1, 1)?
            .relu()?;
        out.push(x);
    }
    Ok(Stages {
        c1,
        c: [out[0], out[1], out[2], out[3]],
    })
}

/// Per-channel gates `sigmoid(W2·relu(W1·GAP(x) + b1) + b2)`, shape `[B, C]`.
pub fn ace_gates<'g>(p: &Bound<'_, 'g>, c5: Var<'g>) -> Result<Var<'g>> {
    let mu = c5.global_avg_pool()?;
    let hidden = p.linear("ace.fc1", mu)?.relu()?;
    p.linear("ace.fc2", hidden)?.sigmoid()
}

/// Squeeze-excitation gating of the last backbone stage.
pub fn ace_forward<'g>(p: &Bound<'_, 'g>, c5: Var<'g>) -> Result<Var<'g>> {
    let s = c5.shape();
    let gates = ace_gates(p, c5)?.reshape(&[s[0], s[1], 1, 1])?;
    c5.mul(gates)
}

/// Pyramid maps, finest first, starting at `min_level`.
pub struct Pyramid<'g> {
    pub levels: Vec<Var<'g>>,
    pub min_level: usize,
}

impl Pyramid<'_> {
    pub fn stride(&self, index: usize) -> f64 {
        (1usize << (self.min_level + index)) as f64
    }
}

/// Top-down pathway: `P5 = Conv3(L5(C5))`, `P_i = Conv3(L_i(C_i) + Up(P_{i+1}))`.
pub fn fpn_forward<'g>(
    p: &Bound<'_, 'g>,
    cfg: &BackboneConfig,
    stages: &Stages<'g>,
    c5_enhanced: Var<'g>,
) -> Result<Pyramid<'g>> {
    let mut inputs: Vec<(usize, Var<'g>)> = vec![
        (2, stages.c[0]),
        (3, stages.c[1]),
        (4, stages.c[2]),
        (5, c5_enhanced),
    ];
    if cfg.use_p1 {
        inputs.insert(0, (1, stages.c1));
    }
    let mut levels: Vec<Var<'g>> = Vec::with_capacity(inputs.len());
    let mut above: Option<Var<'g>> = None;
    for &(level, c) in inputs.iter().rev() {
        let mut x = p.conv(&format!("fpn.lateral{level}"), c, 1, 0)?;
        if let Some(up) = above {
            x = x.add(up.upsample2x()?)?;
        }
        let out = p.conv(&format!("fpn.output{level}"), x, 1, 1)?;
        levels.push(out);
        above = Some(out);
    }
    levels.reverse();
    Ok(Pyramid {
        levels,
        min_level: cfg.min_level(),
    })
}

/// Global context vector `g = GAP(F3 + I_res)`, shape `[B, D_f]`.
pub fn gce_forward<'g>(p: &Bound<'_, 'g>, cfg: &BackboneConfig, image: Var<'g>) -> Result<Var<'g>> {
    check_image(&image, 8)?;
    let f1 = p.conv("gce.conv1", image, 2, 1)?.relu()?;
    let f2 = p.conv("gce.conv2", f1, 2, 1)?.relu()?;
    let mut f3 = p.conv("gce.conv3", f2, 2, 1)?.relu()?;
    if cfg.gce_residual {
        let ds = image
            .avg_pool2d(3, 2, 1)?
            .avg_pool2d(3, 2, 1)?
            .avg_pool2d(3, 2, 1)?;
        f3 = f3.add(p.conv("gce.residual", ds, 1, 0)?)?;
    }
    f3.global_avg_pool()
}

/// Taps for one bilinear sample at feature coordinates `(y, x)`, scaled by
/// `weight`. Samples more than one cell outside the map contribute nothing;
/// samples within that margin are clamped to the border.
fn bilinear_taps(
    y: f64,
    x: f64,
    h: usize,
    w: usize,
    level: usize,
    weight: f64,
    out: &mut Vec<RoiSample>,
) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let taps = [
        (y0, x0, (1.0 - ly) * (1.0 - lx)),
        (y0, x1, (1.0 - ly) * lx),
        (y1, x0, ly * (1.0 - lx)),
        (y1, x1, ly * lx),
    ];
    for (yy, xx, wt) in taps {
        if wt != 0.0 {
            out.push(RoiSample {
                level,
                offset: yy * w + xx,
                weight: weight * wt,
            });
        }
    }
}

/// Sampling plan pooling a `grid × grid` cell-center grid per box and
/// averaging it.
///
/// `boxes[b][i]` is in pixel coordinates; `levels[b][i]` is the pyramid
/// index (0 = finest level present) to sample from.
pub fn roi_plan(
    shapes: &[(usize, usize)],
    strides: &[f64],
    boxes: &[Vec<BoxXyxy>],
    levels: &[Vec<usize>],
    grid: usize,
) -> Result<Vec<Vec<RoiSample>>> {
    let mut plan = Vec::new();
    let cell_weight = 1.0 / (grid * grid) as f64;
    for (bb, bl) in boxes.iter().zip(levels) {
        if bb.len() != bl.len() {
            return Err(Error::shape("roi_plan", "one level per box required"));
        }
        for (bx, &li) in bb.iter().zip(bl) {
            let (h, w) = *shapes
                .get(li)
                .ok_or_else(|| Error::Index(format!("pyramid level {li}")))?;
            let s = strides[li];
            let b = bx.canonical();
            let (bw, bh) = ((b.x2 - b.x1) / s, (b.y2 - b.y1) / s);
            let mut taps = Vec::with_capacity(grid * grid * 4);
            for gy in 0..grid {
                let y = b.y1 / s + (gy as f64 + 0.5) * bh / grid as f64 - 0.5;
                for gx in 0..grid {
                    let x = b.x1 / s + (gx as f64 + 0.5) * bw / grid as f64 - 0.5;
                    bilinear_taps(y, x, h, w, li, cell_weight, &mut taps);
                }
            }
            plan.push(taps);
        }
    }
    Ok(plan)
}

/// Pyramid index for each box: the assigned level, clamped to the levels
/// present.
pub fn pyramid_indices(cfg: &BackboneConfig, boxes: &[Vec<BoxXyxy>]) -> Vec<Vec<usize>> {
    let lo = cfg.min_level();
    boxes
        .iter()
        .map(|bb| {
            bb.iter()
                .map(|b| assign_fpn_level(&b.canonical(), cfg.level_base).clamp(lo, 5) - lo)
                .collect()
        })
        .collect()
}

/// One pooled feature vector per box: `[B, N, fpn_dim]`.
pub fn roi_pool<'g>(
    cfg: &BackboneConfig,
    pyramid: &Pyramid<'g>,
    boxes: &[Vec<BoxXyxy>],
) -> Result<Var<'g>> {
    let first = pyramid
        .levels
        .first()
        .ok_or_else(|| Error::shape("roi_pool", "empty pyramid"))?;
    let n = boxes.first().map_or(0, Vec::len);
    if boxes.len() != first.shape()[0] || boxes.iter().any(|b| b.len() != n) {
        return Err(Error::shape(
            "roi_pool",
            "boxes must be [B][N] with B matching the pyramid",
        ));
    }
    let shapes: Vec<(usize, usize)> = pyramid
        .levels
        .iter()
        .map(|v| {
            let s = v.shape();
            (s[2], s[3])
        })
        .collect();
    let strides: Vec<f64> = (0..pyramid.levels.len())
        .map(|i| pyramid.stride(i))
        .collect();
    let levels = pyramid_indices(cfg, boxes);
    let plan = roi_plan(&shapes, &strides, boxes, &levels, cfg.roi_grid)?;
    first.graph().roi_pool(&pyramid.levels, n, plan)
}
