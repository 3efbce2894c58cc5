use std::sync::Arc;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::net::{repeat_pose, ControlNet};
use crate::backbone::{
    ForwardArgs, ImageRGBA, LatentCodec, LatentTensor, NoiseSchedule, TokenSequence, UNetContext,
};
use crate::tensor::{rng_for, Adam, AdamConfig, Binder, Graph, Tensor};
use crate::vcm::InjectionConfig;
use crate::{Error, Result};

/// One (pose, image) training example with its description.
#[derive(Debug, Clone)]
pub struct ControlPair {
    pub pose: Array3<f64>,
    pub image: ImageRGBA,
    pub tokens: TokenSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlPretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ControlPretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Trains the control branch with the backbone frozen: each step draws one
/// pair, a timestep and noise, and minimises the ε-prediction error of the
/// backbone with the branch's residuals added. Returns the loss curve.
pub fn pretrain_control(
    ctx: &mut UNetContext,
    control: &mut ControlNet,
    dataset: &[ControlPair],
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    cfg: &ControlPretrainConfig,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::config("control pretraining needs at least one pair"));
    }
    let mut rng = rng_for(cfg.seed, "control.pretrain");
    let mut opt = Adam::new(AdamConfig {
        fp32_state: false,
        ..AdamConfig::with_lr(cfg.lr)
    });
    let names = control.param_names();
    let injection = InjectionConfig::default();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let pair = &dataset[rng.random_range(0..dataset.len())];
        let t = rng.random_range(1..=schedule.num_steps());
        let z0 = codec.encode_image(&pair.image);
        let eps: Tensor = z0.values().mapv(|_| StandardNormal.sample(&mut rng));
        let eps = LatentTensor::new(eps)?;
        let zt = schedule.add_noise(&z0, t, &eps)?;

        let mut g = Graph::new();
        let mut binder = Binder::training(names.iter().cloned());
        let z = g.constant(zt.into_values());
        let pose = repeat_pose(&pair.pose, 1);
        let residuals = control.forward_graph(&mut g, &mut binder, &pose, z, &[t], &pair.tokens)?;
        let args = ForwardArgs {
            tokens: &pair.tokens,
            timesteps: &[t],
            lora: None,
            vcm: None,
            injection: &injection,
            face: None,
            style: None,
            control: Some(residuals),
        };
        let out = ctx.forward(&mut g, &mut binder, z, &args)?;
        let loss = g.mse(out.eps, Arc::new(eps.into_values()));
        let value = g.value(loss).iter().next().copied().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::Numeric { step, value });
        }
        losses.push(value);
        let grads = binder.gradients(&g, &g.backward(loss));
        opt.step(&mut [control.params_mut()], &grads);
    }
    Ok(losses)
}
