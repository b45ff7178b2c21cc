//! Finite-difference checks of every learned block at tiny sizes.
//!
//! Each block is checked with respect to its parameters and its inputs.
//! Tensor outputs are reduced with a fixed pseudo-random probe so every
//! coordinate carries an O(1) gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{denoise_forward, DetectorConfig, Model};
use crate::backbone::{self, BackboneConfig, Stages};
use crate::error::{Error, Result};
use crate::geometry::BoxXyxy;
use crate::head::{self, HeadConfig, MmfMode};
use crate::loss::{hungarian, matching_cost, set_loss, MatchWeights, SetPredictions, Targets};
use crate::nn::{Bound, ParamStore};
use crate::tensor::gradcheck::{check_gradients_with, GradCheckOptions, GradCheckReport};
use crate::tensor::{Tensor, Var};

pub const BLOCKS: &[&str] = &[
    "backbone",
    "ace",
    "fpn",
    "gce",
    "self_attn",
    "caf",
    "mmf",
    "mmf_additive",
    "final_mlp",
    "heads",
    "set_loss",
    "detector",
];

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        channels: [4, 4, 4, 8],
        coord_channels: true,
        ace_reduction: 4,
        fpn_dim: 8,
        gce_widths: [4, 4],
        context_dim: 8,
        gce_residual: true,
        use_p1: false,
        roi_grid: 2,
        level_base: 224.0,
    }
}

fn tiny_head(mmf: MmfMode) -> HeadConfig {
    HeadConfig {
        dim: 8,
        heads: 2,
        num_classes: 2,
        context_dim: 8,
        mmf,
        ..Default::default()
    }
}

fn subset(store: &ParamStore, prefixes: &[&str]) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            out.insert(name, t.clone())?;
        }
    }
    Ok(out)
}

fn probe_sum(x: Var<'_>, weight: f64) -> Result<Var<'_>> {
    let c = Tensor::from_fn(&x.shape(), |i| {
        ((i as f64 * 0.618_033_988_75 + 0.1).fract() - 0.5) * 2.0 * weight
    });
    x.mul(x.graph().constant(c))?.sum()
}

fn probe_all<'g>(xs: &[Var<'g>], weight: f64) -> Result<Var<'g>> {
    let mut acc = probe_sum(xs[0], weight)?;
    for &x in &xs[1..] {
        acc = acc.add(probe_sum(x, weight)?)?;
    }
    Ok(acc)
}

/// Probe weight of the end-to-end check. The fusion keys contain latent
/// blocks that are constant across proposals, so some key-projection rows
/// have exactly zero gradient; a small probe keeps the finite-difference
/// roundoff on those rows below the relative-error floor.
const PIPELINE_PROBE: f64 = 0.01;

fn check<F>(
    store: &ParamStore,
    inputs: Vec<Tensor>,
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'s, 'g> Fn(&Bound<'s, 'g>, &[Var<'g>]) -> Result<Var<'g>>,
{
    let k = store.len();
    let mut all: Vec<Tensor> = store.tensors().to_vec();
    all.extend(inputs);
    check_gradients_with(
        &all,
        |_, vars| {
            let p = Bound::from_vars(store, vars[..k].to_vec())?;
            f(&p, &vars[k..])
        },
        opts,
    )
}

/// Run the check for one block by name.
pub fn gradcheck_block(name: &str, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bcfg = tiny_backbone();
    let hcfg = tiny_head(if name == "mmf_additive" {
        MmfMode::Additive
    } else {
        MmfMode::Cross
    });
    let mut full = ParamStore::new();
    backbone::init(&mut full, &bcfg, &mut rng)?;
    head::init(&mut full, &hcfg, &mut rng)?;
    let mut randn = |shape: &[usize]| Tensor::randn(shape, &mut rng);
    let (n, d) = (4, 8);

    match name {
        "backbone" => {
            let store = subset(&full, &["backbone."])?;
            check(&store, vec![randn(&[1, 3, 32, 32])], opts, |p, x| {
                let s = backbone::backbone_forward(p, &bcfg, x[0])?;
                probe_all(&[s.c1, s.c[0], s.c[1], s.c[2], s.c[3]], 1.0)
            })
        }
        "ace" => {
            let store = subset(&full, &["ace."])?;
            check(&store, vec![randn(&[1, 8, 2, 2])], opts, |p, x| {
                probe_sum(backbone::ace_forward(p, x[0])?, 1.0)
            })
        }
        "fpn" => {
            let store = subset(&full, &["fpn."])?;
            let inputs = vec![
                randn(&[1, 4, 16, 16]),
                randn(&[1, 4, 8, 8]),
                randn(&[1, 4, 4, 4]),
                randn(&[1, 4, 2, 2]),
                randn(&[1, 8, 1, 1]),
            ];
            check(&store, inputs, opts, |p, x| {
                let stages = Stages {
                    c1: x[0],
                    c: [x[1], x[2], x[3], x[4]],
                };
                let pyr = backbone::fpn_forward(p, &bcfg, &stages, x[4])?;
                probe_all(&pyr.levels, 1.0)
            })
        }
        "gce" => {
            let store = subset(&full, &["gce."])?;
            check(&store, vec![randn(&[1, 3, 32, 32])], opts, |p, x| {
                probe_sum(backbone::gce_forward(p, &bcfg, x[0])?, 1.0)
            })
        }
        "self_attn" => {
            let store = subset(&full, &["caf.self."])?;
            check(&store, vec![randn(&[1, n, d])], opts, |p, x| {
                probe_sum(head::self_attention(p, &hcfg, x[0])?, 1.0)
            })
        }
        "caf" => {
            let store = subset(&full, &["caf.cross.", "caf.gate."])?;
            check(
                &store,
                vec![randn(&[1, n, d]), randn(&[1, d])],
                opts,
                |p, x| probe_sum(head::cross_attention_caf(p, &hcfg, x[0], x[1])?, 1.0),
            )
        }
        "mmf" | "mmf_additive" => {
            let store = subset(&full, &["emb.", "mmf."])?;
            check(
                &store,
                vec![randn(&[1, n, d]), randn(&[1, d])],
                opts,
                |p, x| {
                    let emb = head::build_embeddings(p, &hcfg, &[17], n, x[1])?;
                    probe_sum(head::mmf_fuse(p, &hcfg, x[0], &emb, x[1])?, 1.0)
                },
            )
        }
        "final_mlp" => {
            let store = subset(&full, &["final."])?;
            check(&store, vec![randn(&[1, n, d])], opts, |p, x| {
                probe_sum(head::final_mlp(p, &hcfg, x[0], None)?, 1.0)
            })
        }
        "heads" => {
            let store = subset(&full, &["head."])?;
            check(&store, vec![randn(&[1, n, d])], opts, |p, x| {
                let o = head::prediction_heads(p, x[0])?;
                probe_all(&[o.logits, o.box_deltas, o.eps_pred], 1.0)
            })
        }
        "set_loss" => set_loss_block(&mut rng, opts),
        "detector" => {
            let cfg = DetectorConfig {
                num_proposals: n,
                backbone: bcfg.clone(),
                head: tiny_head(MmfMode::Cross),
                seed,
                ..Default::default()
            };
            let model = Model::init(cfg.clone())?;
            let image = Tensor::randn(&[1, 3, 32, 32], &mut rng);
            let x_t = Tensor::uniform(&[1, n, 4], -1.5, 1.5, &mut rng);
            check(&model.params, vec![], opts, |p, _| {
                let g = p.vars()[0].graph();
                let out = denoise_forward(p, &cfg, g.constant(image.clone()), &x_t, &[500], None)?;
                probe_all(&[out.x0_hat, out.logits, out.eps_pred], PIPELINE_PROBE)
            })
        }
        other => Err(Error::Config(format!(
            "unknown block {other:?}; known blocks: {}",
            BLOCKS.join(", ")
        ))),
    }
}

fn set_loss_block(rng: &mut ChaCha8Rng, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (n, c) = (5, 2);
    let logits = Tensor::randn(&[n, c], rng);
    let mut boxes = Vec::new();
    for _ in 0..n {
        let u = Tensor::uniform(&[4], 0.05, 0.45, rng);
        let v = u.data();
        boxes.extend_from_slice(&[v[0], v[1], v[0] + v[2], v[1] + v[3]]);
    }
    let boxes = Tensor::new(&[n, 4], boxes)?;
    let eps_pred = Tensor::randn(&[n, 4], rng);
    let eps_true = Tensor::randn(&[n, 4], rng);
    let gt = Targets {
        boxes: vec![
            BoxXyxy::new(0.1, 0.1, 0.5, 0.4),
            BoxXyxy::new(0.3, 0.2, 0.8, 0.9),
        ],
        classes: vec![1, 0],
    };
    let w = MatchWeights {
        noise: 1.0,
        ..Default::default()
    };
    let probs: Vec<Vec<f64>> = logits
        .data()
        .chunks(c)
        .map(|r| r.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect())
        .collect();
    let bx: Vec<BoxXyxy> = boxes
        .data()
        .chunks(4)
        .map(|r| BoxXyxy::new(r[0], r[1], r[2], r[3]))
        .collect();
    let assignment = hungarian(&matching_cost(&probs, &bx, &gt, &w)?)?;
    check_gradients_with(
        &[logits, boxes, eps_pred],
        |g, v| {
            let pred = SetPredictions {
                logits: v[0],
                boxes: v[1],
                noise: Some((v[2], eps_true.clone())),
            };
            Ok(set_loss(g, &pred, &gt, &assignment, &w)?.0)
        },
        opts,
    )
}
