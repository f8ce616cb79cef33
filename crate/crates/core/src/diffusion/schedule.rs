use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Number of diffusion timesteps `T`; the sampler visits every one.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Linear-β schedule over timesteps `1..=T`. Timestep 0 is the clean sample
/// (`ᾱ_0 = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Schedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        } = *cfg;
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(Schedule { betas, alpha_bar })
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_1 … β_T`.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Domain(format!("timestep {t} outside 0..={}", self.steps())))
    }

    /// Sampler timesteps `T, T−1, …, 0`.
    pub fn timesteps(&self) -> Vec<usize> {
        (0..=self.steps()).rev().collect()
    }

    /// Timestep a sampler step starts from (step 0 starts at `T`).
    pub fn step_timestep(&self, step: usize) -> usize {
        self.steps() - step
    }

    /// Fingerprint of the β sequence.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.betas {
            h.update(b.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn add_noise<T: Scalar>(s: &Schedule, x0: &Tensor<T>, eps: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let ab = s.alpha_bar(t)?;
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Deterministic (η = 0) DDIM update from `t` to `t_next`, either direction.
pub fn ddim_step<T: Scalar>(
    s: &Schedule,
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    t_next: usize,
) -> Result<Tensor<T>> {
    let (ab, ab_next) = (s.alpha_bar(t)?, s.alpha_bar(t_next)?);
    if t == t_next {
        return Ok(x_t.clone());
    }
    let (sa, sb) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    let (na, nb) = (T::of(ab_next.sqrt()), T::of((1.0 - ab_next).sqrt()));
    x_t.zip_map(eps, |x, e| {
        let x0 = (x - sb * e) / sa;
        na * x0 + nb * e
    })
}
