//! Noise schedule tables for the diffusion chain.
//!
//! All tables are computed and stored in double precision. Steps are indexed
//! `t = 1..=T`; the convention `alpha_bar(0) = 1` makes the posterior variance
//! at `t = 1` exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};

/// Precomputed beta/alpha tables governing the diffusion chain.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    num_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_betas: Vec<f64>,
}

impl NoiseSchedule {
    /// Build a schedule from an explicit beta sequence.
    pub fn from_betas(betas: Vec<f64>) -> CoreResult<Self> {
        if betas.is_empty() {
            return Err(CoreError::InvalidRange("empty beta sequence".into()));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(CoreError::InvalidRange(format!(
                    "beta[{}] = {} outside (0, 1)",
                    i, b
                )));
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|&b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0f64;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let mut posterior_betas = Vec::with_capacity(betas.len());
        for t in 1..=betas.len() {
            let ab_prev = if t == 1 { 1.0 } else { alpha_bars[t - 2] };
            let ab = alpha_bars[t - 1];
            posterior_betas.push((1.0 - ab_prev) / (1.0 - ab) * betas[t - 1]);
        }
        Ok(Self {
            num_steps: betas.len(),
            betas,
            alphas,
            alpha_bars,
            posterior_betas,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    fn check_t(&self, t: usize) -> CoreResult<()> {
        if t < 1 || t > self.num_steps {
            return Err(CoreError::StepOutOfRange {
                t,
                lo: 1,
                hi: self.num_steps,
            });
        }
        Ok(())
    }

    /// β_t, t in [1, T].
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// α_t = 1 − β_t.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t = Π_{s≤t} α_s, with ᾱ_0 = 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior variance β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t. Zero at t = 1.
    pub fn posterior_beta(&self, t: usize) -> f64 {
        self.posterior_betas[t - 1]
    }

    /// Posterior variance with the t=1 floor applied: max(β̃_t, β̃_2).
    ///
    /// Keeps the log-domain variance interpolation well-defined at t = 1,
    /// where β̃_1 = 0. For T = 1 there is no β̃_2; β_1 is used as the floor.
    pub fn posterior_beta_floored(&self, t: usize) -> f64 {
        let floor = if self.num_steps >= 2 {
            self.posterior_betas[1]
        } else {
            self.betas[0]
        };
        self.posterior_betas[t - 1].max(floor)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_betas(&self) -> &[f64] {
        &self.posterior_betas
    }

    /// Fallible accessors used by operations that take caller-supplied t.
    pub fn try_alpha_bar(&self, t: usize) -> CoreResult<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar(t))
    }
}

/// Build a linear beta schedule from `beta_start` to `beta_end` inclusive.
pub fn make_linear_schedule(
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> CoreResult<NoiseSchedule> {
    if num_steps < 1 {
        return Err(CoreError::InvalidRange("num_steps must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(CoreError::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got ({}, {})",
            beta_start, beta_end
        )));
    }
    let betas = if num_steps == 1 {
        vec![beta_start]
    } else {
        (0..num_steps)
            .map(|i| {
                beta_start + (beta_end - beta_start) * (i as f64) / ((num_steps - 1) as f64)
            })
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// Default linear schedule: endpoints 1e-4 and 0.02 at T = 1000, scaled by
/// 1000/T for other T so the total noise budget is preserved.
pub fn default_linear_schedule(num_steps: usize) -> CoreResult<NoiseSchedule> {
    let scale = 1000.0 / num_steps as f64;
    make_linear_schedule(num_steps, 1e-4 * scale, 0.02 * scale)
}
