//! Noise schedules and the closed-form DDPM transitions.
//!
//! Timesteps are 1-based: `t ∈ {1, ..., T}`.

use crate::error::{config, usage, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// β interpolated linearly from β_min to β_max.
    Linear,
    /// −ln(1 − β) interpolated linearly, the discretized variance-preserving SDE.
    VariancePreserving,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::VariancePreserving => "vp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "vp" | "variance-preserving" => Ok(ScheduleKind::VariancePreserving),
            other => Err(Error::Parse(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return config("diffusion horizon T must be at least 1");
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return config(format!("need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"));
        }
        let frac = |t: usize| if steps == 1 { 0.0 } else { t as f64 / (steps - 1) as f64 };
        let betas = match kind {
            ScheduleKind::Linear => (0..steps).map(|t| beta_min + (beta_max - beta_min) * frac(t)).collect(),
            ScheduleKind::VariancePreserving => {
                let lo = -(1.0 - beta_min).ln();
                let hi = -(1.0 - beta_max).ln();
                (0..steps).map(|t| 1.0 - (-(lo + (hi - lo) * frac(t))).exp()).collect()
            }
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return config("empty beta schedule");
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return config(format!("every beta must lie in (0, 1), got {b}"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    /// Diffusion horizon T.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return usage(format!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Scales `(signal, noise)` with x_t = signal * x0 + noise * ε.
    pub fn noising_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Coefficients of a_{t-1} = c_x * a_t − c_eps * eps_pred + c_noise * noise.
    pub fn reverse_coeffs(&self, t: usize) -> Result<ReverseCoeffs> {
        self.check_t(t)?;
        let alpha = self.alpha(t);
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        Ok(ReverseCoeffs {
            x: inv_sqrt_alpha,
            eps: inv_sqrt_alpha * (1.0 - alpha) / (1.0 - self.alpha_bar(t)).sqrt(),
            noise: self.beta(t).sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseCoeffs {
    pub x: f64,
    pub eps: f64,
    pub noise: f64,
}

/// Closed-form q(x_t | x_0) sample: √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if eps.len() != x0.len() {
        return usage(format!("noise has length {}, signal has {}", eps.len(), x0.len()));
    }
    let (a, b) = sched.noising_coeffs(t)?;
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// One reverse DDPM step. Callers pass `noise = 0` at t = 1.
pub fn reverse_step(
    a_t: &[f64],
    eps_pred: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    noise: &[f64],
) -> Result<Vec<f64>> {
    if eps_pred.len() != a_t.len() || noise.len() != a_t.len() {
        return usage("reverse step inputs must share one length");
    }
    let c = sched.reverse_coeffs(t)?;
    let out: Vec<f64> =
        a_t.iter().zip(eps_pred).zip(noise).map(|((a, e), n)| c.x * a - c.eps * e + c.noise * n).collect();
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::Numeric(format!("non-finite value in reverse step at t={t}")))
    }
}
