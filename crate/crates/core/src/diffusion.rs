//! Cosine noise schedule, forward corruption, DDIM reverse step and box
//! renewal, all over box *signals*.
//!
//! A box in normalized center form `(cx, cy, w, h) ∈ [0, 1]⁴` becomes the
//! signal `(2b − 1)·scale`. Corruption and sampling happen in signal space;
//! [`normalize`] and [`denormalize`] convert between the two.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;
pub const DEFAULT_SCALE: f64 = 2.0;

/// `β_t` and `ᾱ_t` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with offset `s`: `ᾱ_t = f(t)/f(0)`,
    /// `f(t) = cos²(((t/T) + s)/(1 + s) · π/2)`, with each `β_t` clipped to
    /// [`MAX_BETA`] and `ᾱ` re-accumulated from the clipped betas.
    pub fn cosine(t_max: usize, s: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("schedule needs T >= 1".into()));
        }
        let f = |t: usize| {
            let x = ((t as f64 / t_max as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        let raw: Vec<f64> = (0..=t_max).map(|t| f(t) / f0).collect();
        let mut beta = vec![0.0; t_max + 1];
        let mut alpha_bar = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            beta[t] = (1.0 - raw[t] / raw[t - 1]).min(MAX_BETA);
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        Ok(NoiseSchedule {
            t_max,
            beta,
            alpha_bar,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// `β_t` for `t ∈ [1, T]`; `β_0` is defined as 0.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta[t])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bar[t])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::Index(format!(
                "timestep {t} outside [0, {}]",
                self.t_max
            )));
        }
        Ok(())
    }

    /// `t, beta, alpha_bar` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,beta,alpha_bar\n");
        for t in 0..=self.t_max {
            s.push_str(&format!("{t},{:e},{:e}\n", self.beta[t], self.alpha_bar[t]));
        }
        s
    }
}

/// Normalized `[0, 1]` boxes to signals in `[−scale, scale]`.
pub fn normalize(boxes: &Tensor, scale: f64) -> Tensor {
    boxes.map(|b| ((b * 2.0 - 1.0) * scale).clamp(-scale, scale))
}

/// Signals back to normalized boxes; out-of-range signals are clamped first.
pub fn denormalize(signal: &Tensor, scale: f64) -> Tensor {
    signal.map(|s| (s.clamp(-scale, scale) / scale + 1.0) / 2.0)
}

/// Schedule plus signal-range policy.
#[derive(Clone, Debug)]
pub struct Diffusion {
    pub schedule: NoiseSchedule,
    pub scale: f64,
    /// Clamp every produced signal to `[−scale, scale]`.
    pub clamp: bool,
}

impl Diffusion {
    pub fn new(schedule: NoiseSchedule, scale: f64) -> Self {
        Diffusion {
            schedule,
            scale,
            clamp: true,
        }
    }

    fn limit(&self, t: Tensor) -> Tensor {
        if self.clamp {
            let s = self.scale;
            t.map(|v| v.clamp(-s, s))
        } else {
            t
        }
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        let ab = self.schedule.alpha_bar(t)?;
        same_shape("q_sample", x0, noise)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x0
            .data()
            .iter()
            .zip(noise.data())
            .map(|(x, e)| a * x + b * e)
            .collect();
        Ok(self.limit(Tensor::new(x0.shape(), data)?))
    }

    /// Deterministic DDIM update from `t` to `t_prev`:
    /// `√ᾱ_{t_prev}·x̂_0 + √(1−ᾱ_{t_prev})·ε̂`.
    pub fn ddim_step(
        &self,
        x_t: &Tensor,
        x0_hat: &Tensor,
        eps_hat: &Tensor,
        t: usize,
        t_prev: usize,
    ) -> Result<Tensor> {
        if t_prev >= t {
            return Err(Error::Contract(format!(
                "ddim step needs t_prev < t, got {t_prev} >= {t}"
            )));
        }
        self.schedule.alpha_bar(t)?;
        let ab = self.schedule.alpha_bar(t_prev)?;
        same_shape("ddim_step", x_t, x0_hat)?;
        same_shape("ddim_step", x_t, eps_hat)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x0_hat
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(x, e)| a * x + b * e)
            .collect();
        Ok(self.limit(Tensor::new(x_t.shape(), data)?))
    }

    /// Replace every proposal whose best class score is not above
    /// `threshold` with fresh Gaussian signal. Kept rows are untouched.
    ///
    /// `x` is `[.., N, 4]` and `scores` `[.., N, C]` with matching leading
    /// dims. Returns the new signal and the keep mask.
    pub fn renew<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        scores: &Tensor,
        threshold: f64,
        rng: &mut R,
    ) -> Result<(Tensor, Vec<bool>)> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!(
                "renewal threshold {threshold} outside (0, 1)"
            )));
        }
        let rows = x.numel() / 4;
        let c = *scores.shape().last().unwrap_or(&0);
        if x.shape().last() != Some(&4) || c == 0 || scores.numel() / c != rows {
            return Err(Error::shape(
                "box_renewal",
                format!("boxes {:?} vs scores {:?}", x.shape(), scores.shape()),
            ));
        }
        let mut out = x.clone();
        let mut keep = Vec::with_capacity(rows);
        for r in 0..rows {
            let best = scores.data()[r * c..(r + 1) * c]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let kept = best > threshold;
            keep.push(kept);
            if !kept {
                for v in &mut out.data_mut()[r * 4..(r + 1) * 4] {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = z.clamp(-self.scale, self.scale);
                }
            }
        }
        Ok((out, keep))
    }
}

/// `ε̂ = (x_t − √ᾱ_t·x̂_0)/√(1−ᾱ_t)`.
pub fn epsilon_from_x0(x_t: &Tensor, x0_hat: &Tensor, alpha_bar_t: f64) -> Result<Tensor> {
    if !(alpha_bar_t < 1.0) {
        return Err(Error::Domain(format!(
            "epsilon_from_x0 needs alpha_bar < 1, got {alpha_bar_t}"
        )));
    }
    same_shape("epsilon_from_x0", x_t, x0_hat)?;
    let (a, b) = (alpha_bar_t.max(0.0).sqrt(), (1.0 - alpha_bar_t).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(x0_hat.data())
        .map(|(x, x0)| (x - a * x0) / b)
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// `steps + 1` descending timesteps from `T − 1` to 0.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps >= t_max {
        return Err(Error::Config(format!(
            "ddim steps must lie in [1, {}), got {steps}",
            t_max
        )));
    }
    let top = t_max - 1;
    Ok((0..=steps)
        .map(|i| (top * (steps - i) + steps / 2) / steps)
        .collect())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::cosine(1000, COSINE_OFFSET).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!(s.alpha_bar(1000).unwrap() < 1e-3);
        assert!(s.alpha_bar(1001).is_err());
        assert!(NoiseSchedule::cosine(0, COSINE_OFFSET).is_err());
        assert!(s.betas()[1..].iter().all(|&b| b > 0.0 && b <= MAX_BETA));
    }

    #[test]
    fn timesteps_are_strictly_descending() {
        assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![999, 0]);
        assert_eq!(
            ddim_timesteps(1000, 4).unwrap(),
            vec![999, 749, 500, 250, 0]
        );
        for steps in 1..50 {
            let ts = ddim_timesteps(50, steps).unwrap();
            assert!(ts.windows(2).all(|w| w[0] > w[1]));
        }
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn normalize_round_trip() {
        let b = Tensor::new(&[1, 4], vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let s = normalize(&b, 2.0);
        assert_eq!(s.data(), &[-2.0, -1.0, 0.0, 2.0]);
        assert_eq!(denormalize(&s, 2.0), b);
    }
}
