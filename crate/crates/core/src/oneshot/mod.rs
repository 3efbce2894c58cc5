//! One-shot test-time tuning: reconstruct the segmented source foreground
//! from noise while updating only the LoRA factors and the style half of the
//! VCM.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adapters::{
    attach_lora, default_scale_map, detach_lora, AdapterCheckpoint, CheckpointMeta, LoraSet, ScaleMap,
};
use crate::backbone::{
    ForwardArgs, ImageRGBA, LatentCodec, LatentTensor, NoiseSchedule, TokenSequence, UNetContext,
};
use crate::control::PoseSpec;
use crate::tensor::{rng_for, Adam, AdamConfig, Binder, Graph, Tensor};
use crate::vcm::{style_tokens_graph, InjectionConfig, VcmParams};
use crate::{Error, Result};

/// Reported single-GPU tuning time; kept as metadata only.
pub const REFERENCE_WALL_TIME_S: f64 = 48.0;

/// Probe timesteps used to compare tuned and untuned reconstructions.
pub const PROBE_TIMESTEPS: [usize; 5] = [10, 30, 50, 70, 90];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub rank: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub train_face_modules: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            rank: 32,
            iterations: 60,
            batch_size: 2,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            train_face_modules: false,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.batch_size == 0 {
            return Err(Error::config("rank and batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} is not positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::with_lr(self.learning_rate)
        }
    }
}

/// The image being personalised and its description.
#[derive(Debug, Clone, Copy)]
pub struct Subject<'a> {
    pub source_fg: &'a ImageRGBA,
    pub tokens: &'a TokenSequence,
}

/// Names of every tensor the tuning loop may update: all LoRA factors, the
/// style encoder and the style K′/V′ projections at whitelisted blocks, plus
/// the face Projection/Linear when `train_face_modules` is set.
pub fn build_trainable_set(
    ctx: &UNetContext,
    lora: Option<&LoraSet>,
    vcm: &VcmParams,
    injection: &InjectionConfig,
    train_face_modules: bool,
) -> Result<Vec<String>> {
    let lora = match lora {
        Some(l) if ctx.lora_attached() => l,
        _ => return Err(Error::Precondition("no LoRA set is attached to the context".into())),
    };
    let mut names = lora.param_names();
    names.extend(vcm.style_param_names(&injection.whitelist));
    if train_face_modules {
        names.extend(vcm.face_param_names());
    }
    Ok(names)
}

/// Result of one tuning run.
#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub checkpoint: AdapterCheckpoint,
    pub losses: Vec<f64>,
    pub trainable: Vec<String>,
    /// Trainable tensors that received a nonzero gradient at some step.
    pub touched: BTreeSet<String>,
}

impl TuneOutcome {
    pub fn loss_csv(&self) -> String {
        loss_csv(&self.losses)
    }
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

fn batch_latent(z0: &LatentTensor, n: usize) -> Result<LatentTensor> {
    let v = z0.values();
    let views: Vec<_> = (0..n).map(|_| v.index_axis(ndarray::Axis(0), 0)).collect();
    LatentTensor::new(ndarray::stack(ndarray::Axis(0), &views).expect("equal shapes"))
}

/// Loss value and gradients.
pub type LossAndGrads = (f64, BTreeMap<String, Tensor>);

/// ε-prediction MSE for `source_fg` noised at `timesteps` with `eps`, style
/// tokens taken from the source and LoRA applied at uniform scale 1. Returns
/// gradients for the names in `trainable` (none when it is empty).
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_loss(
    ctx: &mut UNetContext,
    lora: Option<&LoraSet>,
    vcm: &VcmParams,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    injection: &InjectionConfig,
    subject: Subject<'_>,
    timesteps: &[usize],
    eps: &LatentTensor,
    trainable: &[String],
) -> Result<LossAndGrads> {
    let z0 = batch_latent(&codec.encode_image(subject.source_fg), timesteps.len())?;
    let zt = schedule.add_noise_batch(&z0, timesteps, eps)?;
    let scale = ScaleMap::uniform(1.0)?;
    let mut g = Graph::new();
    let mut binder = Binder::training(trainable.iter().cloned());
    let z = g.constant(zt.into_values());
    let style = style_tokens_graph(&mut g, &mut binder, vcm, subject.source_fg)?;
    let args = ForwardArgs {
        tokens: subject.tokens,
        timesteps,
        lora: lora.map(|l| (l, &scale)),
        vcm: Some(vcm.store()),
        injection,
        face: None,
        style: Some(style),
        control: None,
    };
    let out = ctx.forward(&mut g, &mut binder, z, &args)?;
    let loss = g.mse(out.eps, Arc::new(eps.values().clone()));
    let value = g.value(loss).iter().next().copied().unwrap_or(f64::NAN);
    let grads = if trainable.is_empty() || !value.is_finite() {
        BTreeMap::new()
    } else {
        binder.gradients(&g, &g.backward(loss))
    };
    Ok((value, grads))
}

fn sample_noise(rng: &mut impl Rng, shape: &[usize]) -> Result<LatentTensor> {
    LatentTensor::new(crate::tensor::zeros(shape).mapv(|_| StandardNormal.sample(&mut *rng)))
}

/// Tunes a fresh LoRA set and a copy of the trainable VCM tensors on one
/// subject. `pose` is accepted for interface symmetry and ignored: the
/// reconstruction objective has no pose term. The context's base weights and
/// `vcm` are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn tune(
    ctx: &mut UNetContext,
    vcm: &VcmParams,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    injection: &InjectionConfig,
    subject: Subject<'_>,
    pose: Option<&PoseSpec>,
    cfg: &TuneConfig,
) -> Result<TuneOutcome> {
    let _ = pose;
    cfg.validate()?;
    injection.validate(ctx.registry())?;
    if subject.source_fg.batch() != 1 {
        return Err(Error::dim("tuning takes a single source image"));
    }
    let mut lora = attach_lora(ctx, cfg.rank, cfg.seed)?;
    let result = run_loop(ctx, &mut lora, vcm, codec, schedule, injection, subject, cfg);
    detach_lora(ctx);
    let (tuned_vcm, losses, trainable, touched) = result?;

    let vcm_names: Vec<String> = trainable.iter().filter(|n| n.starts_with("vcm.")).cloned().collect();
    let mut hyper = BTreeMap::new();
    hyper.insert("rank".into(), json!(cfg.rank));
    hyper.insert("iterations".into(), json!(cfg.iterations));
    hyper.insert("batch_size".into(), json!(cfg.batch_size));
    hyper.insert("learning_rate".into(), json!(cfg.learning_rate));
    hyper.insert("optimizer".into(), json!({"name": "adam", "beta1": cfg.beta1, "beta2": cfg.beta2}));
    hyper.insert("train_face_modules".into(), json!(cfg.train_face_modules));
    hyper.insert("reference_wall_time_s".into(), json!(REFERENCE_WALL_TIME_S));
    let meta = CheckpointMeta {
        rank: lora.rank(),
        alpha: lora.alpha(),
        seed: cfg.seed,
        scale_map: default_scale_map(),
        hyperparameters: hyper,
        loss_curve: losses.clone(),
    };
    Ok(TuneOutcome {
        checkpoint: AdapterCheckpoint::new(&lora, &tuned_vcm, &vcm_names, meta)?,
        losses,
        trainable,
        touched,
    })
}

type LoopResult = (VcmParams, Vec<f64>, Vec<String>, BTreeSet<String>);

#[allow(clippy::too_many_arguments)]
fn run_loop(
    ctx: &mut UNetContext,
    lora: &mut LoraSet,
    vcm: &VcmParams,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    injection: &InjectionConfig,
    subject: Subject<'_>,
    cfg: &TuneConfig,
) -> Result<LoopResult> {
    let mut vcm = vcm.clone();
    let trainable = build_trainable_set(ctx, Some(lora), &vcm, injection, cfg.train_face_modules)?;
    let mut opt = Adam::new(cfg.adam());
    let mut rng = rng_for(cfg.seed, "tune.noise");
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut touched = BTreeSet::new();
    let l = ctx.config().latent_size();
    let shape = [cfg.batch_size, crate::backbone::LATENT_CHANNELS, l, l];
    for step in 0..cfg.iterations {
        let ts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(1..=schedule.num_steps()))
            .collect();
        let eps = sample_noise(&mut rng, &shape)?;
        let (value, grads) = reconstruction_loss(
            ctx,
            Some(lora),
            &vcm,
            codec,
            schedule,
            injection,
            subject,
            &ts,
            &eps,
            &trainable,
        )?;
        if !value.is_finite() {
            return Err(Error::Numeric { step, value });
        }
        losses.push(value);
        for (name, g) in &grads {
            if g.iter().any(|&x| x != 0.0) {
                touched.insert(name.clone());
            }
        }
        opt.step(&mut [lora.params_mut(), vcm.store_mut()], &grads);
    }
    Ok((vcm, losses, trainable, touched))
}

/// Mean ε-loss over `probe` timesteps with noise drawn from `eps_seed`,
/// using the LoRA and VCM tensors of `checkpoint` (or the base model when
/// `None`). Deterministic given its inputs.
#[allow(clippy::too_many_arguments)]
pub fn eval_reconstruction(
    ctx: &mut UNetContext,
    vcm: &VcmParams,
    checkpoint: Option<&AdapterCheckpoint>,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    injection: &InjectionConfig,
    subject: Subject<'_>,
    probe: &[usize],
    eps_seed: u64,
) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::config("probe timestep set is empty"));
    }
    let mut vcm = vcm.clone();
    let lora = match checkpoint {
        Some(c) => {
            c.apply_vcm(&mut vcm)?;
            Some(c.lora_set(ctx)?)
        }
        None => None,
    };
    let l = ctx.config().latent_size();
    let mut total = 0.0;
    for &t in probe {
        let mut rng = rng_for(eps_seed, &format!("probe.{t}"));
        let eps = sample_noise(&mut rng, &[1, crate::backbone::LATENT_CHANNELS, l, l])?;
        let (v, _) =
            reconstruction_loss(ctx, lora.as_ref(), &vcm, codec, schedule, injection, subject, &[t], &eps, &[])?;
        total += v;
    }
    Ok(total / probe.len() as f64)
}
