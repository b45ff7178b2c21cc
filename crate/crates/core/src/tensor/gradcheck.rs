//! Central finite-difference oracle for tape gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Multiplier applied to the tape gradient before comparison. Anything
    /// other than 1.0 simulates a broken backward rule.
    pub corrupt_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: DEFAULT_EPS,
            corrupt_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Tape and finite-difference gradients at `worst`.
    pub worst_pair: (f64, f64),
    pub coords: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8)
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&g, &vars)?;
    let v = out.value();
    v.item()
}

/// Compare tape gradients of `f` against central differences.
pub fn check_gradients<F>(params: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    check_gradients_with(params, f, &GradCheckOptions::default())
}

pub fn check_gradients_with<F>(
    params: &[Tensor],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Oracle("parameters must be finite".into()));
    }
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&g, &vars)?;
        let base = loss.value().item()?;
        let again = eval(&f, params)?;
        if base.to_bits() != again.to_bits() {
            return Err(Error::Oracle(format!(
                "function is not deterministic: {base} vs {again}"
            )));
        }
        let grads = g.backward(loss)?;
        vars.iter().map(|v| grads.wrt(*v)).collect()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_pair: (0.0, 0.0),
        coords: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.numel() {
            let orig = p.data()[ci];
            work[pi].data_mut()[ci] = orig + opts.eps;
            let up = eval(&f, &work)?;
            work[pi].data_mut()[ci] = orig - opts.eps;
            let down = eval(&f, &work)?;
            work[pi].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * opts.eps);
            let ad = analytic[pi].data()[ci] * opts.corrupt_scale;
            let err = relative_error(ad, fd);
            report.coords += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((pi, ci));
                report.worst_pair = (ad, fd);
            }
        }
    }
    Ok(report)
}
