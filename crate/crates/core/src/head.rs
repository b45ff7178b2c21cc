//! The detection head: context-aware fusion of proposal features with the
//! global context, conditional embeddings, multi-modal fusion, the final
//! bottleneck MLP and the three prediction heads.
//!
//! Data flow per forward pass, all `[B, N, d]` unless noted:
//!
//! ```text
//! f_roi ─ self-attention ─ f_self ─ cross-attention(g) + gate ─ f_cross
//! f_cross, latent [B, N, 3d] ─ MMF ─ f_fused ─ MLP ─ f_final ─ heads
//! ```
//!
//! Cross-attention to `g` has a single key, so its attention weights are
//! identically 1 and the attended value is the projected context broadcast
//! to every proposal, whatever the queries are.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, init_matrix, init_mlp, Bound, ParamStore};
use crate::tensor::{Tensor, Var};

/// How conditional embeddings enter the proposal features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MmfMode {
    /// Cross-attention from proposal features to the concatenated latent.
    Cross,
    /// Sum of features and embeddings, layer norm, then a context term
    /// scaled by a learned gate.
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Model width `d`; equals the pyramid width.
    pub dim: usize,
    pub heads: usize,
    pub num_classes: usize,
    /// Width of the global context vector.
    pub context_dim: usize,
    pub mmf: MmfMode,
    /// Extra attention from fused-context features back to the RoI features.
    pub instance_interaction: bool,
    /// Dropout after the final MLP, training only.
    pub dropout: f64,
    /// Initial foreground probability of the classifier.
    pub prior_prob: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            dim: 64,
            heads: 4,
            num_classes: 3,
            context_dim: 64,
            mmf: MmfMode::Cross,
            instance_interaction: false,
            dropout: 0.0,
            prior_prob: 0.01,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} must be a positive multiple of the head count {}",
                self.dim, self.heads
            )));
        }
        if self.num_classes == 0 || self.context_dim == 0 {
            return Err(Error::Config(
                "class count and context width must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(Error::Config(format!(
                "prior probability {} outside (0, 1)",
                self.prior_prob
            )));
        }
        Ok(())
    }
}

fn init_attention<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    dq: usize,
    dkv: usize,
    d: usize,
    rng: &mut R,
) -> Result<()> {
    init_matrix(store, &format!("{prefix}.wq"), dq, d, rng)?;
    init_matrix(store, &format!("{prefix}.wk"), dkv, d, rng)?;
    init_matrix(store, &format!("{prefix}.wv"), dkv, d, rng)?;
    init_matrix(store, &format!("{prefix}.wo"), d, d, rng)?;
    init_layer_norm(store, &format!("{prefix}.ln"), d)
}

/// Register every head parameter.
pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &HeadConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let (d, dg) = (cfg.dim, cfg.context_dim);
    init_attention(store, "caf.self", d, d, d, rng)?;
    init_attention(store, "caf.cross", d, dg, d, rng)?;
    init_mlp(store, "caf.gate", dg, d, 1, rng)?;
    if cfg.instance_interaction {
        init_attention(store, "caf.inter", d, d, d, rng)?;
    }

    init_mlp(store, "emb.time", d, d, d, rng)?;
    init_mlp(store, "emb.pos", d, d, d, rng)?;
    init_mlp(store, "emb.ctx", dg, d, d, rng)?;
    match cfg.mmf {
        MmfMode::Cross => {
            init_matrix(store, "mmf.wq", d, d, rng)?;
            init_matrix(store, "mmf.wk", 3 * d, d, rng)?;
            init_matrix(store, "mmf.wv", 3 * d, d, rng)?;
            init_layer_norm(store, "mmf.ln", d)?;
        }
        MmfMode::Additive => {
            init_layer_norm(store, "mmf.ln", d)?;
            init_mlp(store, "mmf.mod", dg, d, 1, rng)?;
        }
    }

    init_mlp(store, "final", d, 2 * d, d, rng)?;
    init_mlp(store, "head.cls", d, d, cfg.num_classes, rng)?;
    init_mlp(store, "head.box", d, d, 4, rng)?;
    init_mlp(store, "head.noise", d, d, 4, rng)?;

    let prior = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
    store.get_mut("head.cls.1.b")?.data_mut().fill(prior);
    // Start the box head near the identity refinement.
    for v in store.get_mut("head.box.1.w")?.data_mut() {
        *v *= 0.1;
    }
    Ok(())
}

fn split_heads<'g>(x: Var<'g>, heads: usize) -> Result<Var<'g>> {
    let s = x.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    x.reshape(&[b, n, heads, d / heads])?.permute(&[0, 2, 1, 3])
}

fn merge_heads<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    let (b, h, n, dk) = (s[0], s[1], s[2], s[3]);
    x.permute(&[0, 2, 1, 3])?.reshape(&[b, n, h * dk])
}

/// Scaled dot-product weights `softmax(Q_h K_hᵀ / √d_k)`, `[B, h, Nq, Nk]`.
pub fn attention_weights<'g>(q: Var<'g>, k: Var<'g>, heads: usize) -> Result<Var<'g>> {
    let d = *q.shape().last().unwrap_or(&0);
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape(
            "attention",
            format!("width {d} not divisible by {heads} heads"),
        ));
    }
    let dk = (d / heads) as f64;
    let qh = split_heads(q, heads)?;
    let kt = split_heads(k, heads)?.transpose()?;
    qh.matmul(kt)?.scale(1.0 / dk.sqrt())?.softmax()
}

/// Multi-head attention over already projected `q: [B, Nq, d]`,
/// `k, v: [B, Nk, d]`, heads concatenated back to `[B, Nq, d]`.
pub fn multi_head<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, heads: usize) -> Result<Var<'g>> {
    let w = attention_weights(q, k, heads)?;
    merge_heads(w.matmul(split_heads(v, heads)?)?)
}

/// `LayerNorm(x_q + W_O·MultiHead(x_q W_Q, x_kv W_K, x_kv W_V))`.
fn attention_block<'g>(
    p: &Bound<'_, 'g>,
    prefix: &str,
    xq: Var<'g>,
    xkv: Var<'g>,
    heads: usize,
) -> Result<Var<'g>> {
    let q = xq.matmul(p.var(&format!("{prefix}.wq"))?)?;
    let k = xkv.matmul(p.var(&format!("{prefix}.wk"))?)?;
    let v = xkv.matmul(p.var(&format!("{prefix}.wv"))?)?;
    let attended = multi_head(q, k, v, heads)?.matmul(p.var(&format!("{prefix}.wo"))?)?;
    p.layer_norm(&format!("{prefix}.ln"), xq.add(attended)?)
}

/// Inter-proposal self-attention with residual and layer norm.
pub fn self_attention<'g>(p: &Bound<'_, 'g>, cfg: &HeadConfig, f_roi: Var<'g>) -> Result<Var<'g>> {
    attention_block(p, "caf.self", f_roi, f_roi, cfg.heads)
}

/// Context attended by every proposal before gating, `[B, 1, d]`: the
/// projected context after single-key attention and the output projection.
pub fn cross_attended<'g>(
    p: &Bound<'_, 'g>,
    cfg: &HeadConfig,
    f_self: Var<'g>,
    g: Var<'g>,
) -> Result<Var<'g>> {
    let gs = g.shape();
    let g_tok = g.reshape(&[gs[0], 1, gs[1]])?;
    let q = f_self.matmul(p.var("caf.cross.wq")?)?;
    let k = g_tok.matmul(p.var("caf.cross.wk")?)?;
    let v = g_tok.matmul(p.var("caf.cross.wv")?)?;
    // One key: the weights are softmax over a length-1 axis, exactly 1.
    multi_head(q, k, v, cfg.heads)?.matmul(p.var("caf.cross.wo")?)
}

/// Context gate `β = sigmoid(MLP(g))`, `[B, 1, 1]`.
pub fn context_gate<'g>(p: &Bound<'_, 'g>, g: Var<'g>) -> Result<Var<'g>> {
    let b = g.shape()[0];
    p.mlp("caf.gate", g)?.sigmoid()?.reshape(&[b, 1, 1])
}

/// Global-local cross-attention with gated fusion:
/// `LayerNorm(f_self + β·A + (1−β)·f_self)`.
pub fn cross_attention_caf<'g>(
    p: &Bound<'_, 'g>,
    cfg: &HeadConfig,
    f_self: Var<'g>,
    g: Var<'g>,
) -> Result<Var<'g>> {
    let attended = cross_attended(p, cfg, f_self, g)?;
    let beta = context_gate(p, g)?;
    gated_fusion(p, f_self, attended, beta)
}

/// Gated residual fusion shared by [`cross_attention_caf`] and tests that
/// force the gate.
pub fn gated_fusion<'g>(
    p: &Bound<'_, 'g>,
    f_self: Var<'g>,
    attended: Var<'g>,
    beta: Var<'g>,
) -> Result<Var<'g>> {
    let modulated = f_self.mul(beta.one_minus()?)?.add(attended.mul(beta)?)?;
    p.layer_norm("caf.cross.ln", f_self.add(modulated)?)
}

/// Interleaved `[sin(p·ω_0), cos(p·ω_0), sin(p·ω_1), …]` with
/// `ω_k = 10000^(−2k/d)`, one row per position.
pub fn sinusoidal(positions: &[f64], d: usize) -> Tensor {
    Tensor::from_fn(&[positions.len(), d], |i| {
        let (row, col) = (i / d, i % d);
        let k = (col / 2) as f64;
        let angle = positions[row] * 10000f64.powf(-2.0 * k / d as f64);
        if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Time, position and context embeddings and their concatenation.
pub struct Embeddings<'g> {
    /// `[B, d]`
    pub time: Var<'g>,
    /// `[N, d]`
    pub position: Var<'g>,
    /// `[B, d]`
    pub context: Var<'g>,
    /// `[B, N, 3d]`: time, position, context along the feature axis.
    pub latent: Var<'g>,
}

/// `t` holds one timestep per image.
pub fn build_embeddings<'g>(
    p: &Bound<'_, 'g>,
    cfg: &HeadConfig,
    t: &[usize],
    n: usize,
    g: Var<'g>,
) -> Result<Embeddings<'g>> {
    let gr = g.graph();
    let d = cfg.dim;
    let b = g.shape()[0];
    if t.len() != b {
        return Err(Error::shape(
            "embeddings",
            format!("{} timesteps for batch {b}", t.len()),
        ));
    }
    let ts: Vec<f64> = t.iter().map(|&v| v as f64).collect();
    let pos: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let time = p.mlp("emb.time", gr.constant(sinusoidal(&ts, d)))?;
    let position = p.mlp("emb.pos", gr.constant(sinusoidal(&pos, d)))?;
    let context = p.mlp("emb.ctx", g)?;
    let shape = [b, n, d];
    let latent = gr.concat(&[
        time.reshape(&[b, 1, d])?.broadcast_to(&shape)?,
        position.broadcast_to(&shape)?,
        context.reshape(&[b, 1, d])?.broadcast_to(&shape)?,
    ])?;
    Ok(Embeddings {
        time,
        position,
        context,
        latent,
    })
}

/// Multi-modal fusion of context-aware features with the embeddings.
pub fn mmf_fuse<'g>(
    p: &Bound<'_, 'g>,
    cfg: &HeadConfig,
    f_cross: Var<'g>,
    emb: &Embeddings<'g>,
    g: Var<'g>,
) -> Result<Var<'g>> {
    match cfg.mmf {
        MmfMode::Cross => {
            let q = f_cross.matmul(p.var("mmf.wq")?)?;
            let k = emb.latent.matmul(p.var("mmf.wk")?)?;
            let v = emb.latent.matmul(p.var("mmf.wv")?)?;
            let w = mmf_weights(q, k)?;
            p.layer_norm("mmf.ln", f_cross.add(w.matmul(v)?)?)
        }
        MmfMode::Additive => {
            let s = f_cross.shape();
            let (b, d) = (s[0], s[2]);
            let ctx = emb.context.reshape(&[b, 1, d])?;
            let summed = f_cross
                .add(emb.time.reshape(&[b, 1, d])?)?
                .add(emb.position)?
                .add(ctx)?;
            let fused = p.layer_norm("mmf.ln", summed)?;
            let alpha = p.mlp("mmf.mod", g)?.sigmoid()?.reshape(&[b, 1, 1])?;
            fused.add(ctx.mul(alpha)?)
        }
    }
}

/// `softmax(Q Kᵀ / √d)` over the full width, `[B, N, N]`.
pub fn mmf_weights<'g>(q: Var<'g>, k: Var<'g>) -> Result<Var<'g>> {
    let d = *q.shape().last().unwrap_or(&1) as f64;
    q.matmul(k.transpose()?)?.scale(1.0 / d.sqrt())?.softmax()
}

/// Extra attention from fused-context features back to the RoI features.
pub fn instance_interaction<'g>(
    p: &Bound<'_, 'g>,
    cfg: &HeadConfig,
    f_cross: Var<'g>,
    f_roi: Var<'g>,
) -> Result<Var<'g>> {
    attention_block(p, "caf.inter", f_cross, f_roi, cfg.heads)
}

/// `ReLU(x W1 + b1) W2 + b2` with hidden width `2d`, then inverted dropout
/// when an RNG is supplied.
pub fn final_mlp<'g>(
    p: &Bound<'_, 'g>,
    cfg: &HeadConfig,
    x: Var<'g>,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var<'g>> {
    let y = p.mlp("final", x)?;
    match rng {
        Some(rng) if cfg.dropout > 0.0 => {
            let keep = 1.0 - cfg.dropout;
            let mask = Tensor::from_fn(&y.shape(), |_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            y.mul(x.graph().constant(mask))
        }
        _ => Ok(y),
    }
}

pub struct HeadOutputs<'g> {
    /// `[B, N, C]` class logits.
    pub logits: Var<'g>,
    /// `[B, N, 4]` refinements relative to the proposal boxes.
    pub box_deltas: Var<'g>,
    /// `[B, N, 4]` predicted corruption noise.
    pub eps_pred: Var<'g>,
}

pub fn prediction_heads<'g>(p: &Bound<'_, 'g>, f_final: Var<'g>) -> Result<HeadOutputs<'g>> {
    Ok(HeadOutputs {
        logits: p.mlp("head.cls", f_final)?,
        box_deltas: p.mlp("head.box", f_final)?,
        eps_pred: p.mlp("head.noise", f_final)?,
    })
}

/// Everything from RoI features to the three heads.
pub fn head_forward<'g>(
    p: &Bound<'_, 'g>,
    cfg: &HeadConfig,
    f_roi: Var<'g>,
    g: Var<'g>,
    t: &[usize],
    rng: Option<&mut dyn RngCore>,
) -> Result<HeadOutputs<'g>> {
    let n = f_roi.shape()[1];
    let f_self = self_attention(p, cfg, f_roi)?;
    let mut f_cross = cross_attention_caf(p, cfg, f_self, g)?;
    if cfg.instance_interaction {
        f_cross = instance_interaction(p, cfg, f_cross, f_roi)?;
    }
    let emb = build_embeddings(p, cfg, t, n, g)?;
    let fused = mmf_fuse(p, cfg, f_cross, &emb, g)?;
    let f_final = final_mlp(p, cfg, fused, rng)?;
    prediction_heads(p, f_final)
}
