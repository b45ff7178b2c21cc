use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, Broadcast, Window};
use super::Tensor;
use crate::error::{Error, Result};

/// One bilinear tap of a pooled region: `weight * level[b, c, offset]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSample {
    pub level: usize,
    pub offset: usize,
    pub weight: f64,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Pow(usize, f64),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    Clamp(usize, f64, f64),
    Matmul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    BroadcastTo(usize),
    SumAll(usize),
    MeanAll(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Conv2d {
        x: usize,
        w: usize,
        win: Window,
    },
    AvgPool {
        x: usize,
        win: Window,
    },
    Upsample2x(usize),
    GlobalAvgPool(usize),
    Concat(Vec<usize>),
    Narrow {
        x: usize,
        start: usize,
    },
    IndexSelect {
        x: usize,
        indices: Vec<usize>,
    },
    RoiPool {
        levels: Vec<usize>,
        plan: Rc<Vec<Vec<RoiSample>>>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive ops for one forward pass.
///
/// Nodes are appended in execution order, so every node's parents precede
/// it and a reverse scan is a valid reverse-topological order.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, t: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, t: Tensor, op: Op, parents: &[usize], name: &'static str) -> Result<Var<'_>> {
        let t = t.ensure_finite(name)?;
        let rg = self.requires(parents);
        Ok(self.push(t, op, rg))
    }

    fn check_same(&self, a: Var<'_>, b: Var<'_>) -> Result<()> {
        if !std::ptr::eq(a.graph, self) || !std::ptr::eq(b.graph, self) {
            return Err(Error::Contract("vars belong to different graphs".into()));
        }
        Ok(())
    }

    /// Pool one feature vector per region from a set of `[B, C, H, W]` maps.
    ///
    /// `plan[b * n + i]` lists the taps for region `i` of image `b`; the
    /// result has shape `[B, n, C]`.
    pub fn roi_pool<'g>(
        &'g self,
        levels: &[Var<'g>],
        n: usize,
        plan: Vec<Vec<RoiSample>>,
    ) -> Result<Var<'g>> {
        let first = levels
            .first()
            .ok_or_else(|| Error::shape("roi_pool", "no feature levels"))?;
        let s0 = first.shape();
        if s0.len() != 4 {
            return Err(Error::shape(
                "roi_pool",
                format!("levels must be rank 4, got {s0:?}"),
            ));
        }
        let (b, c) = (s0[0], s0[1]);
        let values: Vec<Rc<Tensor>> = levels.iter().map(|v| v.value()).collect();
        for v in &values {
            if v.rank() != 4 || v.shape()[0] != b || v.shape()[1] != c {
                return Err(Error::shape(
                    "roi_pool",
                    format!("level shape {:?} mismatches {s0:?}", v.shape()),
                ));
            }
        }
        if plan.len() != b * n {
            return Err(Error::shape(
                "roi_pool",
                format!("plan has {} regions, expected {}", plan.len(), b * n),
            ));
        }
        let mut out = vec![0.0; b * n * c];
        for (r, taps) in plan.iter().enumerate() {
            let bi = r / n;
            for tap in taps {
                let v = &values[tap.level];
                let hw = v.shape()[2] * v.shape()[3];
                if tap.offset >= hw {
                    return Err(Error::Index(format!(
                        "roi tap offset {} outside {hw}",
                        tap.offset
                    )));
                }
                let data = v.data();
                let dst = &mut out[r * c..(r + 1) * c];
                for (ch, o) in dst.iter_mut().enumerate() {
                    *o += tap.weight * data[(bi * c + ch) * hw + tap.offset];
                }
            }
        }
        let ids: Vec<usize> = levels.iter().map(|v| v.id).collect();
        let t = Tensor::new(&[b, n, c], out)?;
        let rg = self.requires(&ids);
        Ok(self.push(
            t.ensure_finite("roi_pool")?,
            Op::RoiPool {
                levels: ids,
                plan: Rc::new(plan),
            },
            rg,
        ))
    }

    /// Concatenate along the last axis.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "nothing to concatenate"))?;
        let lead = {
            let s = first.shape();
            if s.is_empty() {
                return Err(Error::shape("concat", "cannot concatenate scalars"));
            }
            s[..s.len() - 1].to_vec()
        };
        let values: Vec<Rc<Tensor>> = parts.iter().map(|v| v.value()).collect();
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} does not match leading dims {lead:?}"),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        self.record(
            Tensor::new(&shape, out)?,
            Op::Concat(ids.clone()),
            &ids,
            "concat",
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(Error::Contract("loss belongs to a different graph".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                backprop(&nodes, id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, delta: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

fn reduce_into(plan: &Broadcast, n_rhs: usize, f: impl Fn(usize) -> f64, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_rhs];
    for i in 0..n {
        out[plan.index(i)] += f(i);
    }
    out
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let node = &nodes[id];
    let y = node.value.data();
    let val = |i: usize| nodes[i].value.clone();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            accumulate(nodes, grads, *a, g.to_vec());
            if nodes[*b].requires_grad {
                let bv = val(*b);
                let plan = Broadcast::plan("add", node.value.shape(), bv.shape())?;
                let d = reduce_into(&plan, bv.numel(), |i| sign * g[i], g.len());
                accumulate(nodes, grads, *b, d);
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let plan = Broadcast::plan("mul", av.shape(), bv.shape())?;
            let (ad, bd) = (av.data(), bv.data());
            let div = matches!(node.op, Op::Div(..));
            if nodes[*a].requires_grad {
                let d = (0..g.len())
                    .map(|i| {
                        let bb = bd[plan.index(i)];
                        if div {
                            g[i] / bb
                        } else {
                            g[i] * bb
                        }
                    })
                    .collect();
                accumulate(nodes, grads, *a, d);
            }
            if nodes[*b].requires_grad {
                let d = reduce_into(
                    &plan,
                    bv.numel(),
                    |i| {
                        let bb = bd[plan.index(i)];
                        if div {
                            -g[i] * ad[i] / (bb * bb)
                        } else {
                            g[i] * ad[i]
                        }
                    },
                    g.len(),
                );
                accumulate(nodes, grads, *b, d);
            }
        }
        Op::Minimum(a, b) | Op::Maximum(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let is_min = matches!(node.op, Op::Minimum(..));
            let pick_a: Vec<bool> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, z)| if is_min { x <= z } else { x >= z })
                .collect();
            let da = g
                .iter()
                .zip(&pick_a)
                .map(|(gi, &p)| if p { *gi } else { 0.0 })
                .collect();
            let db = g
                .iter()
                .zip(&pick_a)
                .map(|(gi, &p)| if p { 0.0 } else { *gi })
                .collect();
            accumulate(nodes, grads, *a, da);
            accumulate(nodes, grads, *b, db);
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.iter().map(|v| v * s).collect()),
        Op::Shift(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Pow(a, p) => {
            let x = val(*a);
            let d = g
                .iter()
                .zip(x.data())
                .map(|(gi, xi)| gi * p * xi.powf(p - 1.0))
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Exp(a) => accumulate(
            nodes,
            grads,
            *a,
            g.iter().zip(y).map(|(gi, yi)| gi * yi).collect(),
        ),
        Op::Ln(a) => {
            let x = val(*a);
            accumulate(
                nodes,
                grads,
                *a,
                g.iter().zip(x.data()).map(|(gi, xi)| gi / xi).collect(),
            );
        }
        Op::Abs(a) => {
            let x = val(*a);
            let d = g
                .iter()
                .zip(x.data())
                .map(|(gi, xi)| {
                    if *xi > 0.0 {
                        *gi
                    } else if *xi < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Relu(a) => {
            let x = val(*a);
            let d = g
                .iter()
                .zip(x.data())
                .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Sigmoid(a) => accumulate(
            nodes,
            grads,
            *a,
            g.iter().zip(y).map(|(gi, s)| gi * s * (1.0 - s)).collect(),
        ),
        Op::Clamp(a, lo, hi) => {
            let x = val(*a);
            let d = g
                .iter()
                .zip(x.data())
                .map(|(gi, xi)| if *xi >= *lo && *xi <= *hi { *gi } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (sa, sb) = (av.shape(), bv.shape());
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = sb[sb.len() - 1];
            if sb.len() == 2 {
                let rows = av.numel() / k;
                if nodes[*a].requires_grad {
                    let mut da = vec![0.0; av.numel()];
                    kernels::gemm(rows, n, k, g, false, bv.data(), true, &mut da, false);
                    accumulate(nodes, grads, *a, da);
                }
                if nodes[*b].requires_grad {
                    let mut db = vec![0.0; bv.numel()];
                    kernels::gemm(k, rows, n, av.data(), true, g, false, &mut db, false);
                    accumulate(nodes, grads, *b, db);
                }
            } else {
                let batch = av.numel() / (m * k);
                let (ra, rb) = (nodes[*a].requires_grad, nodes[*b].requires_grad);
                let mut da = vec![0.0; if ra { av.numel() } else { 0 }];
                let mut db = vec![0.0; if rb { bv.numel() } else { 0 }];
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    if ra {
                        let bs = &bv.data()[bi * k * n..(bi + 1) * k * n];
                        kernels::gemm(
                            m,
                            n,
                            k,
                            gs,
                            false,
                            bs,
                            true,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            false,
                        );
                    }
                    if rb {
                        let as_ = &av.data()[bi * m * k..(bi + 1) * m * k];
                        kernels::gemm(
                            k,
                            m,
                            n,
                            as_,
                            true,
                            gs,
                            false,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            false,
                        );
                    }
                }
                if ra {
                    accumulate(nodes, grads, *a, da);
                }
                if rb {
                    accumulate(nodes, grads, *b, db);
                }
            }
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (_, d) = kernels::permute(g, node.value.shape(), &inv);
            accumulate(nodes, grads, *a, d);
        }
        Op::BroadcastTo(a) => {
            let av = val(*a);
            let plan = Broadcast::plan("broadcast_to", node.value.shape(), av.shape())?;
            let d = reduce_into(&plan, av.numel(), |i| g[i], g.len());
            accumulate(nodes, grads, *a, d);
        }
        Op::SumAll(a) => accumulate(nodes, grads, *a, vec![g[0]; val(*a).numel()]),
        Op::MeanAll(a) => {
            let n = val(*a).numel();
            accumulate(nodes, grads, *a, vec![g[0] / n as f64; n]);
        }
        Op::Softmax(a) => {
            let d = *node.value.shape().last().unwrap();
            let mut dx = vec![0.0; g.len()];
            for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(dx.chunks_mut(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    out[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
        } => {
            let xv = val(*x);
            let gv = val(*gamma);
            let d = *xv.shape().last().unwrap();
            let gm = gv.data();
            let mut dx = vec![0.0; g.len()];
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            let mut xhat = vec![0.0; d];
            let mut dxhat = vec![0.0; d];
            for r in 0..g.len() / d {
                let xr = &xv.data()[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let (mean, rstd) = moments(xr, *eps);
                for j in 0..d {
                    xhat[j] = (xr[j] - mean) * rstd;
                    dxhat[j] = gr[j] * gm[j];
                    dg[j] += gr[j] * xhat[j];
                    db[j] += gr[j];
                }
                let s1: f64 = dxhat.iter().sum();
                let s2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                let inv_d = 1.0 / d as f64;
                for j in 0..d {
                    dx[r * d + j] = rstd * (dxhat[j] - inv_d * s1 - xhat[j] * inv_d * s2);
                }
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *gamma, dg);
            accumulate(nodes, grads, *beta, db);
        }
        Op::Conv2d { x, w, win } => {
            let (xv, wv) = (val(*x), val(*w));
            let (b, cin, h, wd) = dims4(xv.shape());
            let cout = wv.shape()[0];
            let so = node.value.shape();
            let (ho, wo) = (so[2], so[3]);
            let kk = cin * win.kh * win.kw;
            let cols = ho * wo;
            let mut col = vec![0.0; kk * cols];
            let mut dcol = vec![0.0; kk * cols];
            let (rx, rw) = (nodes[*x].requires_grad, nodes[*w].requires_grad);
            let mut dx = vec![0.0; if rx { xv.numel() } else { 0 }];
            let mut dw = vec![0.0; if rw { wv.numel() } else { 0 }];
            for bi in 0..b {
                let gs = &g[bi * cout * cols..(bi + 1) * cout * cols];
                if rw {
                    let xs = &xv.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                    kernels::im2col(xs, cin, h, wd, *win, ho, wo, &mut col);
                    kernels::gemm(cout, cols, kk, gs, false, &col, true, &mut dw, true);
                }
                if rx {
                    kernels::gemm(kk, cout, cols, wv.data(), true, gs, false, &mut dcol, false);
                    let dxs = &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                    kernels::col2im(&dcol, cin, h, wd, *win, ho, wo, dxs);
                }
            }
            if rx {
                accumulate(nodes, grads, *x, dx);
            }
            if rw {
                accumulate(nodes, grads, *w, dw);
            }
        }
        Op::AvgPool { x, win } => {
            let xv = val(*x);
            let (b, c, h, w) = dims4(xv.shape());
            let so = node.value.shape();
            let (ho, wo) = (so[2], so[3]);
            let counts = kernels::pool_counts(h, w, *win, ho, wo);
            let mut dx = vec![0.0; xv.numel()];
            for p in 0..b * c {
                let src = &g[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let share = src[oy * wo + ox] / counts[oy * wo + ox];
                        for_window(h, w, *win, oy, ox, |off| dst[off] += share);
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Upsample2x(x) => {
            let xv = val(*x);
            let (b, c, h, w) = dims4(xv.shape());
            let mut dx = vec![0.0; xv.numel()];
            let (ho, wo) = (2 * h, 2 * w);
            for p in 0..b * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        dx[p * h * w + (oy / 2) * w + ox / 2] += g[p * ho * wo + oy * wo + ox];
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::GlobalAvgPool(x) => {
            let xv = val(*x);
            let (_, _, h, w) = dims4(xv.shape());
            let hw = h * w;
            let mut dx = vec![0.0; xv.numel()];
            for (p, gi) in g.iter().enumerate() {
                dx[p * hw..(p + 1) * hw].fill(gi / hw as f64);
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Concat(ids) => {
            let total = *node.value.shape().last().unwrap();
            let rows = g.len() / total;
            let mut start = 0;
            for &pid in ids {
                let pv = val(pid);
                let w = *pv.shape().last().unwrap();
                if nodes[pid].requires_grad {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + start..r * total + start + w]);
                    }
                    accumulate(nodes, grads, pid, d);
                }
                start += w;
            }
        }
        Op::Narrow { x, start } => {
            let xv = val(*x);
            let full = *xv.shape().last().unwrap();
            let len = *node.value.shape().last().unwrap();
            let mut dx = vec![0.0; xv.numel()];
            for (r, chunk) in g.chunks(len).enumerate() {
                dx[r * full + start..r * full + start + len].copy_from_slice(chunk);
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::IndexSelect { x, indices } => {
            let xv = val(*x);
            let row = xv.numel() / xv.shape()[0];
            let mut dx = vec![0.0; xv.numel()];
            for (k, &src) in indices.iter().enumerate() {
                for j in 0..row {
                    dx[src * row + j] += g[k * row + j];
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::RoiPool { levels, plan } => {
            let so = node.value.shape();
            let (n, c) = (so[1], so[2]);
            let mut dl: Vec<Vec<f64>> = levels.iter().map(|&l| vec![0.0; val(l).numel()]).collect();
            let hw: Vec<usize> = levels
                .iter()
                .map(|&l| {
                    let s = val(l);
                    s.shape()[2] * s.shape()[3]
                })
                .collect();
            for (r, taps) in plan.iter().enumerate() {
                let bi = r / n;
                let gr = &g[r * c..(r + 1) * c];
                for tap in taps {
                    let dst = &mut dl[tap.level];
                    let stride = hw[tap.level];
                    for (ch, gv) in gr.iter().enumerate() {
                        dst[(bi * c + ch) * stride + tap.offset] += tap.weight * gv;
                    }
                }
            }
            for (&lid, d) in levels.iter().zip(dl) {
                accumulate(nodes, grads, lid, d);
            }
        }
    }
    Ok(())
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}

fn moments(x: &[f64], eps: f64) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn for_window(h: usize, w: usize, win: Window, oy: usize, ox: usize, mut f: impl FnMut(usize)) {
    for ky in 0..win.kh {
        let iy = (oy * win.stride + ky) as isize - win.pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for kx in 0..win.kw {
            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
            if ix >= 0 && (ix as usize) < w {
                f(iy as usize * w + ix as usize);
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.graph.check_same(self, other)?;
        let (a, b) = (self.value(), other.value());
        let plan = Broadcast::plan(name, a.shape(), b.shape())?;
        let (ad, bd) = (a.data(), b.data());
        let out: Vec<f64> = (0..ad.len()).map(|i| f(ad[i], bd[plan.index(i)])).collect();
        self.graph.record(
            Tensor::new(a.shape(), out)?,
            op(self.id, other.id),
            &[self.id, other.id],
            name,
        )
    }

    fn unary(self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'g>> {
        let t = self.value().map(f);
        self.graph.record(t, op, &[self.id], name)
    }

    /// Elementwise sum; `other` broadcasts onto `self`.
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    fn same_shape(self, other: Var<'g>, name: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    /// Elementwise minimum of two same-shape values; ties route the gradient to `self`.
    pub fn minimum(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_shape(other, "minimum")?;
        self.binary(other, "minimum", Op::Minimum, f64::min)
    }

    pub fn maximum(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_shape(other, "maximum")?;
        self.binary(other, "maximum", Op::Maximum, f64::max)
    }

    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        self.unary("scale", Op::Scale(self.id, s), |v| v * s)
    }

    pub fn shift(self, s: f64) -> Result<Var<'g>> {
        self.unary("shift", Op::Shift(self.id), |v| v + s)
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    /// `1 - x`
    pub fn one_minus(self) -> Result<Var<'g>> {
        self.scale(-1.0)?.shift(1.0)
    }

    pub fn powf(self, p: f64) -> Result<Var<'g>> {
        self.unary("powf", Op::Pow(self.id, p), |v| v.powf(p))
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.unary("exp", Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Result<Var<'g>> {
        self.unary("ln", Op::Ln(self.id), f64::ln)
    }

    pub fn abs(self) -> Result<Var<'g>> {
        self.unary("abs", Op::Abs(self.id), f64::abs)
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.unary("relu", Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), sigmoid)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'g>> {
        self.unary("clamp", Op::Clamp(self.id, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.check_same(self, other)?;
        let (a, b) = (self.value(), other.value());
        let t = matmul_forward(&a, &b)?;
        self.graph.record(
            t,
            Op::Matmul(self.id, other.id),
            &[self.id, other.id],
            "matmul",
        )
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let mut seen = vec![false; a.rank()];
        if perm.len() != a.rank()
            || perm
                .iter()
                .any(|&p| p >= a.rank() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", a.rank()),
            ));
        }
        let (shape, data) = kernels::permute(a.data(), a.shape(), perm);
        self.graph.record(
            Tensor::new(&shape, data)?,
            Op::Permute(self.id, perm.to_vec()),
            &[self.id],
            "permute",
        )
    }

    /// Swap the last two axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank must be at least 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let t = self.value().reshape(shape)?;
        self.graph
            .record(t, Op::Reshape(self.id), &[self.id], "reshape")
    }

    /// Repeat along unit / missing leading dims to reach `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let plan = Broadcast::plan("broadcast_to", shape, a.shape())?;
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape, (0..n).map(|i| a.data()[plan.index(i)]).collect())?;
        self.graph
            .record(t, Op::BroadcastTo(self.id), &[self.id], "broadcast_to")
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let s = self.value().sum();
        self.graph
            .record(Tensor::scalar(s), Op::SumAll(self.id), &[self.id], "sum")
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let v = self.value();
        let s = v.sum() / v.numel().max(1) as f64;
        self.graph
            .record(Tensor::scalar(s), Op::MeanAll(self.id), &[self.id], "mean")
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(self) -> Result<Var<'g>> {
        let a = self.value();
        let d = *a
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = a.data().to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        self.graph.record(
            Tensor::new(a.shape(), out)?,
            Op::Softmax(self.id),
            &[self.id],
            "softmax",
        )
    }

    /// Normalize the last axis to zero mean and unit variance, then apply
    /// `gamma * x + beta`.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let a = self.value();
        let d = *a
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        let (gv, bv) = (gamma.value(), beta.value());
        if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    a.shape(),
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let mut out = Vec::with_capacity(a.numel());
        for row in a.data().chunks(d) {
            let (mean, rstd) = moments(row, eps);
            for j in 0..d {
                out.push((row[j] - mean) * rstd * gv.data()[j] + bv.data()[j]);
            }
        }
        let ids = [self.id, gamma.id, beta.id];
        self.graph.record(
            Tensor::new(a.shape(), out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
            &ids,
            "layer_norm",
        )
    }

    /// 2-D cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin, kh, kw]`.
    pub fn conv2d(self, weight: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        self.graph.check_same(self, weight)?;
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, weight {:?}", x.shape(), w.shape()),
            ));
        }
        let (b, cin, h, wd) = dims4(x.shape());
        let (cout, _, kh, kw) = dims4(w.shape());
        let win = Window {
            kh,
            kw,
            stride,
            pad,
        };
        let (ho, wo) = win.out_dims("conv2d", h, wd)?;
        let kk = cin * kh * kw;
        let cols = ho * wo;
        let mut col = vec![0.0; kk * cols];
        let mut out = vec![0.0; b * cout * cols];
        for bi in 0..b {
            let xs = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            kernels::im2col(xs, cin, h, wd, win, ho, wo, &mut col);
            kernels::gemm(
                cout,
                kk,
                cols,
                w.data(),
                false,
                &col,
                false,
                &mut out[bi * cout * cols..(bi + 1) * cout * cols],
                false,
            );
        }
        self.graph.record(
            Tensor::new(&[b, cout, ho, wo], out)?,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                win,
            },
            &[self.id, weight.id],
            "conv2d",
        )
    }

    /// Average pool over in-bounds taps only (padding is not counted).
    pub fn avg_pool2d(self, k: usize, stride: usize, pad: usize) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(Error::shape("avg_pool2d", format!("input {:?}", x.shape())));
        }
        let (b, c, h, w) = dims4(x.shape());
        let win = Window {
            kh: k,
            kw: k,
            stride,
            pad,
        };
        let (ho, wo) = win.out_dims("avg_pool2d", h, w)?;
        let counts = kernels::pool_counts(h, w, win, ho, wo);
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for_window(h, w, win, oy, ox, |off| s += src[off]);
                    out[p * ho * wo + oy * wo + ox] = s / counts[oy * wo + ox];
                }
            }
        }
        self.graph.record(
            Tensor::new(&[b, c, ho, wo], out)?,
            Op::AvgPool { x: self.id, win },
            &[self.id],
            "avg_pool2d",
        )
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(self) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(Error::shape("upsample2x", format!("input {:?}", x.shape())));
        }
        let (b, c, h, w) = dims4(x.shape());
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[p * ho * wo + oy * wo + ox] = x.data()[p * h * w + (oy / 2) * w + ox / 2];
                }
            }
        }
        self.graph.record(
            Tensor::new(&[b, c, ho, wo], out)?,
            Op::Upsample2x(self.id),
            &[self.id],
            "upsample2x",
        )
    }

    /// Spatial mean of `[B, C, H, W]`, giving `[B, C]`.
    pub fn global_avg_pool(self) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() != 4 || x.shape()[2] == 0 || x.shape()[3] == 0 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("input {:?}", x.shape()),
            ));
        }
        let (b, c, h, w) = dims4(x.shape());
        let hw = h * w;
        let out = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        self.graph.record(
            Tensor::new(&[b, c], out)?,
            Op::GlobalAvgPool(self.id),
            &[self.id],
            "global_avg_pool",
        )
    }

    /// Slice `len` entries of the last axis starting at `start`.
    pub fn narrow(self, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let full = *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("narrow", "scalar input"))?;
        if start + len > full {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) outside axis of {full}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(x.numel() / full.max(1) * len);
        if full > 0 {
            for row in x.data().chunks(full) {
                out.extend_from_slice(&row[start..start + len]);
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.graph.record(
            Tensor::new(&shape, out)?,
            Op::Narrow { x: self.id, start },
            &[self.id],
            "narrow",
        )
    }

    /// Gather rows along axis 0; indices may repeat.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(Error::shape("index_select", "scalar input"));
        }
        let rows = x.shape()[0];
        let row = if rows == 0 { 0 } else { x.numel() / rows };
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index(format!("row {i} of {rows}")));
            }
            out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        self.graph.record(
            Tensor::new(&shape, out)?,
            Op::IndexSelect {
                x: self.id,
                indices: indices.to_vec(),
            },
            &[self.id],
            "index_select",
        )
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::shape(
            "matmul",
            format!("operands must be at least rank 2: {sa:?} x {sb:?}"),
        ));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dims differ: {sa:?} x {sb:?}"),
        ));
    }
    let mut shape = sa[..sa.len() - 1].to_vec();
    shape.push(n);
    if sb.len() == 2 {
        let rows = a.numel() / k.max(1);
        let rows = if k == 0 {
            sa[..sa.len() - 1].iter().product()
        } else {
            rows
        };
        let mut out = vec![0.0; rows * n];
        kernels::gemm(
            rows,
            k,
            n,
            a.data(),
            false,
            b.data(),
            false,
            &mut out,
            false,
        );
        return Tensor::new(&shape, out);
    }
    if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(Error::shape(
            "matmul",
            format!("batch dims differ: {sa:?} x {sb:?}"),
        ));
    }
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        kernels::gemm(
            m,
            k,
            n,
            &a.data()[bi * m * k..(bi + 1) * m * k],
            false,
            &b.data()[bi * k * n..(bi + 1) * k * n],
            false,
            &mut out[bi * m * n..(bi + 1) * m * n],
            false,
        );
    }
    Tensor::new(&shape, out)
}
