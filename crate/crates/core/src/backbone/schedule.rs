use serde::{Deserialize, Serialize};

use super::codec::LatentTensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Linear-β DDPM schedule. Timesteps are 1-based: `t ∈ 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(ScheduleConfig::default()).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn new(cfg: ScheduleConfig) -> Result<Self> {
        if cfg.steps < 2 {
            return Err(Error::config("schedule needs at least 2 steps"));
        }
        if !(0.0 < cfg.beta_start && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::config(format!(
                "betas must satisfy 0 < start < end < 1, got {} .. {}",
                cfg.beta_start, cfg.beta_end
            )));
        }
        let n = cfg.steps;
        let betas: Vec<f64> = (0..n)
            .map(|i| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64)
            .collect();
        let alphas_bar = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas_bar })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    /// `ᾱ_t` for `t ∈ 1..=T`; `ᾱ_0 = 1` is the clean endpoint used by DDIM.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.num_steps() => Ok(self.alphas_bar[t - 1]),
            t => Err(Error::Index(format!(
                "timestep {t} outside 0..={}",
                self.num_steps()
            ))),
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::Index(format!(
                "timestep {t} outside 1..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
    pub fn add_noise(&self, z0: &LatentTensor, t: usize, eps: &LatentTensor) -> Result<LatentTensor> {
        self.check_step(t)?;
        if z0.shape() != eps.shape() {
            return Err(Error::dim(format!(
                "noise shape {:?} differs from latent {:?}",
                eps.shape(),
                z0.shape()
            )));
        }
        let ab = self.alphas_bar[t - 1];
        let out = z0.values() * ab.sqrt() + eps.values() * (1.0 - ab).sqrt();
        LatentTensor::new(out)
    }

    /// Per-sample variant: sample `b` of the batch is noised at `ts[b]`.
    pub fn add_noise_batch(
        &self,
        z0: &LatentTensor,
        ts: &[usize],
        eps: &LatentTensor,
    ) -> Result<LatentTensor> {
        if z0.shape() != eps.shape() || ts.len() != z0.shape()[0] {
            return Err(Error::dim("batched noise shapes disagree"));
        }
        let mut out = z0.values().clone();
        for (b, &t) in ts.iter().enumerate() {
            self.check_step(t)?;
            let ab = self.alphas_bar[t - 1];
            let mut dst = out.index_axis_mut(ndarray::Axis(0), b);
            dst *= ab.sqrt();
            dst.scaled_add((1.0 - ab).sqrt(), &eps.values().index_axis(ndarray::Axis(0), b));
        }
        LatentTensor::new(out)
    }
}
