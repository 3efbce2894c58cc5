//! Deterministic DDIM (η = 0).

use super::codec::LatentTensor;
use super::schedule::NoiseSchedule;
use super::text::TokenSequence;
use super::unet::{ConditioningBundle, UNetContext};
use crate::{Error, Result};

pub const DEFAULT_DDIM_STEPS: usize = 20;

/// Descending visit order `τ_S > … > τ_1`, with `τ_k = ⌊k·t_start/S⌋`.
pub fn ddim_timesteps(t_start: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::config("DDIM needs at least one step"));
    }
    if steps > t_start {
        return Err(Error::config(format!(
            "{steps} DDIM steps exceed the {t_start} available timesteps"
        )));
    }
    Ok((1..=steps).rev().map(|k| k * t_start / steps).collect())
}

/// One update from `t` to `t_prev` given the noise estimate.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    z: &LatentTensor,
    eps: &LatentTensor,
    t: usize,
    t_prev: usize,
) -> Result<LatentTensor> {
    if z.shape() != eps.shape() {
        return Err(Error::dim("noise estimate shape differs from latent"));
    }
    let a = schedule.alpha_bar(t)?;
    let a_prev = schedule.alpha_bar(t_prev)?;
    let x0 = (z.values() - &(eps.values() * (1.0 - a).sqrt())) / a.sqrt();
    let next = &x0 * a_prev.sqrt() + &(eps.values() * (1.0 - a_prev).sqrt());
    LatentTensor::new(next)
}

/// DDIM over an arbitrary ε-predictor, starting at `t_start`.
pub fn ddim_sample_with<F>(
    schedule: &NoiseSchedule,
    z_init: &LatentTensor,
    t_start: usize,
    steps: usize,
    mut eps_fn: F,
) -> Result<LatentTensor>
where
    F: FnMut(&LatentTensor, usize) -> Result<LatentTensor>,
{
    if t_start > schedule.num_steps() {
        return Err(Error::config(format!(
            "start step {t_start} beyond schedule length {}",
            schedule.num_steps()
        )));
    }
    let ts = ddim_timesteps(t_start, steps)?;
    let mut z = z_init.clone();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = eps_fn(&z, t)?;
        z = ddim_step(schedule, &z, &eps, t, t_prev)?;
    }
    Ok(z)
}

/// Full-length sampling from pure noise at `T`.
pub fn ddim_sample(
    ctx: &mut UNetContext,
    schedule: &NoiseSchedule,
    z_init: &LatentTensor,
    steps: usize,
    tokens: &TokenSequence,
    cond: &ConditioningBundle<'_>,
) -> Result<LatentTensor> {
    ddim_sample_from(ctx, schedule, z_init, schedule.num_steps(), steps, tokens, cond)
}

/// Sampling from an intermediate step (partial denoising).
pub fn ddim_sample_from(
    ctx: &mut UNetContext,
    schedule: &NoiseSchedule,
    z_init: &LatentTensor,
    t_start: usize,
    steps: usize,
    tokens: &TokenSequence,
    cond: &ConditioningBundle<'_>,
) -> Result<LatentTensor> {
    let batch = z_init.shape()[0];
    ddim_sample_with(schedule, z_init, t_start, steps, |z, t| {
        ctx.unet_forward(z, &vec![t; batch], tokens, cond)
    })
}
