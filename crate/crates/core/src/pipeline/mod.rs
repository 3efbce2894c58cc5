//! Inference: weight offset, scaled LoRA, style injection, face identity and
//! pose control assembled into one DDIM run; alpha compositing; and the
//! control-free refining pass.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapters::{
    apply_weight_offset, default_scale_map, AdapterCheckpoint, LoraSet, ScaleMap, WeightOffset,
};
use crate::backbone::{
    ddim_sample_with, AuditLog, ConditioningBundle, ImageRGBA, LatentCodec, LatentTensor, NoiseSchedule,
    ScheduleConfig, TextEncoder, TokenSequence, UNetConfig, UNetContext, DEFAULT_DDIM_STEPS, LATENT_CHANNELS,
};
use crate::control::{repeat_pose, ControlNet, PoseInput};
use crate::tensor::{rng_for, zeros};
use crate::vcm::{
    apply_identity_strategy, encode_style, project_face, FaceConditioning, FaceEmbedding, InjectionConfig,
    VcmConfig, VcmParams,
};
use crate::{Error, Result};

/// Architecture and seeds of every frozen component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub unet: UNetConfig,
    pub vcm: VcmConfig,
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

impl ModelSpec {
    pub fn tiny() -> Self {
        Self {
            unet: UNetConfig::tiny(),
            vcm: VcmConfig::tiny(),
            ..Self::default()
        }
    }
}

/// Backbone, VCM, codec, schedule, text encoder and control branch.
pub struct Models {
    pub spec: ModelSpec,
    pub unet: UNetContext,
    pub vcm: VcmParams,
    pub codec: LatentCodec,
    pub schedule: NoiseSchedule,
    pub text: TextEncoder,
    pub control: ControlNet,
}

impl Models {
    /// Builds every component from `spec`; the control branch starts at its
    /// zero initialisation.
    pub fn build(spec: ModelSpec) -> Result<Self> {
        let unet = UNetContext::new(spec.unet, spec.seed)?;
        let vcm = VcmParams::new(&spec.unet, spec.vcm, spec.seed)?;
        let control = ControlNet::from_backbone(&unet, spec.seed);
        Ok(Self {
            spec,
            vcm,
            codec: LatentCodec::default(),
            schedule: NoiseSchedule::new(spec.schedule)?,
            text: TextEncoder::new(spec.unet.text_dim, spec.seed),
            control,
            unet,
        })
    }

    pub fn set_control(&mut self, control: ControlNet) -> Result<()> {
        if control.config() != self.unet.config() {
            return Err(Error::config("control branch was built for a different backbone"));
        }
        self.control = control;
        Ok(())
    }

    pub fn encode_text(&self, description: &str) -> TokenSequence {
        self.text.encode(description)
    }

    fn latent_shape(&self) -> [usize; 4] {
        let l = self.spec.unet.latent_size();
        [1, LATENT_CHANNELS, l, l]
    }
}

/// Switches for each inference mechanism; all on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mechanisms {
    pub offset: bool,
    pub lora: bool,
    pub style: bool,
    pub face: bool,
    pub control: bool,
}

impl Default for Mechanisms {
    fn default() -> Self {
        Self {
            offset: true,
            lora: true,
            style: true,
            face: true,
            control: true,
        }
    }
}

/// Seeded small-norm weight offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetSpec {
    pub seed: u64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub ddim_steps: usize,
    pub scale_map: ScaleMap,
    pub injection: InjectionConfig,
    pub refine_strength: f64,
    pub seed: u64,
    pub offset: Option<OffsetSpec>,
    pub mechanisms: Mechanisms,
    /// Ablation control: `v*` becomes the description's own face-slot row and
    /// `λ_face` zero, so no identity strategy changes the output.
    pub identity_neutral: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ddim_steps: DEFAULT_DDIM_STEPS,
            scale_map: default_scale_map(),
            injection: InjectionConfig::default(),
            refine_strength: 0.3,
            seed: 0,
            offset: Some(OffsetSpec { seed: 0, std: 1e-3 }),
            mechanisms: Mechanisms::default(),
            identity_neutral: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ddim_steps == 0 {
            return Err(Error::config("ddim_steps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.refine_strength) {
            return Err(Error::config(format!(
                "refine_strength {} outside [0, 1]",
                self.refine_strength
            )));
        }
        if let Some(o) = self.offset {
            if !(o.std >= 0.0 && o.std.is_finite()) {
                return Err(Error::config("offset std must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Output of a sampling run plus what happened inside it.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub image: ImageRGBA,
    pub audit: AuditLog,
    pub timings_ms: BTreeMap<String, f64>,
}

/// Inputs to [`transfer`].
#[derive(Debug, Clone, Copy)]
pub struct TransferRequest<'a> {
    pub checkpoint: &'a AdapterCheckpoint,
    pub source_fg: &'a ImageRGBA,
    pub tokens: &'a TokenSequence,
    pub pose: &'a PoseInput,
    pub face: &'a FaceEmbedding,
}

/// Inputs to [`refine`]. Style tokens come from `style_source`, normally the
/// transferred foreground.
#[derive(Debug, Clone, Copy)]
pub struct RefineRequest<'a> {
    pub checkpoint: &'a AdapterCheckpoint,
    pub composited: &'a ImageRGBA,
    pub style_source: &'a ImageRGBA,
    pub tokens: &'a TokenSequence,
    pub face: Option<&'a FaceEmbedding>,
}

/// Everything derived from the checkpoint and conditioning inputs.
struct Prepared {
    lora: Option<LoraSet>,
    vcm: VcmParams,
    style: Option<Array2<f64>>,
    face: Option<FaceConditioning>,
}

fn prepare(
    models: &Models,
    checkpoint: &AdapterCheckpoint,
    style_source: &ImageRGBA,
    tokens: &TokenSequence,
    face: Option<&FaceEmbedding>,
    cfg: &PipelineConfig,
) -> Result<Prepared> {
    let mech = cfg.mechanisms;
    let mut vcm = models.vcm.clone();
    checkpoint.apply_vcm(&mut vcm)?;
    let lora = if mech.lora {
        Some(checkpoint.lora_set(&models.unet)?)
    } else {
        None
    };
    let style = if mech.style {
        Some(encode_style(&vcm, style_source)?)
    } else {
        None
    };
    let face = match face {
        Some(f) if mech.face => {
            let strategy = cfg.injection.strategy;
            if strategy.needs_face_slot() && tokens.face_slot().is_none() {
                return Err(Error::config(format!(
                    "strategy {strategy} needs a <face> slot in the description"
                )));
            }
            let t_face = project_face(&vcm, f)?;
            let mut cond = apply_identity_strategy(strategy, tokens, &t_face, &cfg.injection)?;
            if cfg.identity_neutral {
                if let Some(slot) = tokens.face_slot() {
                    cond.v_star = tokens.embeddings().row(slot).to_owned();
                }
                cond.lambda_face = 0.0;
            }
            Some(cond)
        }
        _ => None,
    };
    Ok(Prepared { lora, vcm, style, face })
}

/// Runs `body` with the configured weight offset applied to the backbone and
/// the exact original parameters restored afterwards.
fn with_offset<T>(
    models: &mut Models,
    cfg: &PipelineConfig,
    body: impl FnOnce(&mut Models) -> Result<T>,
) -> Result<T> {
    let offset = match cfg.offset {
        Some(o) if cfg.mechanisms.offset => Some(WeightOffset::seeded(&models.unet, o.seed, o.std)),
        _ => None,
    };
    let snapshot = models.unet.params().clone();
    if let Some(o) = &offset {
        apply_weight_offset(&mut models.unet, o)?;
    }
    let out = body(models);
    *models.unet.params_mut() = snapshot;
    out
}

fn seeded_latent(seed: u64, label: &str, shape: &[usize]) -> Result<LatentTensor> {
    let mut rng = rng_for(seed, label);
    LatentTensor::new(zeros(shape).mapv(|_| StandardNormal.sample(&mut rng)))
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Generates the subject in the target pose.
pub fn transfer(models: &mut Models, req: TransferRequest<'_>, cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let mut timings = BTreeMap::new();
    with_offset(models, cfg, |m| {
        let t = Instant::now();
        let prep = prepare(m, req.checkpoint, req.source_fg, req.tokens, Some(req.face), cfg)?;
        let pose_img: Option<ArrayD<f64>> = if cfg.mechanisms.control {
            Some(repeat_pose(&req.pose.render(m.spec.unet.image_size)?, 1))
        } else {
            None
        };
        timings.insert("prepare".to_string(), ms(t));

        let z_init = seeded_latent(cfg.seed, "transfer.noise", &m.latent_shape())?;
        let bundle = ConditioningBundle {
            control: None,
            style_tokens: prep.style.as_ref(),
            face: prep.face.as_ref(),
            lora: prep.lora.as_ref().map(|l| (l, &cfg.scale_map)),
            vcm: Some(prep.vcm.store()),
            injection: cfg.injection.clone(),
        };
        let t = Instant::now();
        m.unet.enable_audit();
        let Models {
            unet,
            control,
            schedule,
            ..
        } = m;
        let sampled = ddim_sample_with(schedule, &z_init, schedule.num_steps(), cfg.ddim_steps, |z, t| {
            let residuals = match &pose_img {
                Some(p) => Some(control.control_forward(p, z, &[t], req.tokens)?),
                None => None,
            };
            let cond = ConditioningBundle {
                control: residuals.as_ref(),
                ..bundle.clone_refs()
            };
            unet.unet_forward(z, &[t], req.tokens, &cond)
        });
        let audit = m.unet.take_audit().unwrap_or_default();
        let z = sampled?;
        timings.insert("sample".to_string(), ms(t));
        let image = m.codec.decode_rgba(&z);
        timings.insert("total".to_string(), ms(start));
        Ok(RunOutput {
            image,
            audit,
            timings_ms: timings,
        })
    })
}

impl<'a> ConditioningBundle<'a> {
    fn clone_refs(&self) -> ConditioningBundle<'a> {
        ConditioningBundle {
            control: self.control,
            style_tokens: self.style_tokens,
            face: self.face,
            lora: self.lora,
            vcm: self.vcm,
            injection: self.injection.clone(),
        }
    }
}

/// Alpha-over: `α·fg + (1 − α)·bg` per pixel, for a single foreground.
pub fn composite(fg: &ImageRGBA, bg: &Array3<f64>) -> Result<Array3<f64>> {
    if fg.batch() != 1 || bg.dim() != (3, fg.height(), fg.width()) {
        return Err(Error::dim(format!(
            "background {:?} does not match foreground [1, 4, {}, {}]",
            bg.shape(),
            fg.height(),
            fg.width()
        )));
    }
    let px = fg.pixels();
    let mut out = bg.clone();
    for ((c, y, x), v) in out.indexed_iter_mut() {
        let a = px[[0, 3, y, x]];
        *v = a * px[[0, c, y, x]] + (1.0 - a) * *v;
    }
    Ok(out)
}

/// Wraps an RGB image `[3, H, W]` as an opaque RGBA batch of one.
pub fn opaque(rgb: &Array3<f64>) -> Result<ImageRGBA> {
    let (c, h, w) = rgb.dim();
    if c != 3 {
        return Err(Error::dim(format!("expected 3 channels, got {c}")));
    }
    let mut px = ArrayD::zeros(IxDyn(&[1, 4, h, w]));
    for ((c, y, x), v) in rgb.indexed_iter() {
        px[[0, c, y, x]] = *v;
    }
    px.index_axis_mut(ndarray::Axis(1), 3).fill(1.0);
    ImageRGBA::new(px)
}

/// Timestep the refiner noises to: `round(strength·T)`.
pub fn refine_start(strength: f64, num_steps: usize) -> Result<usize> {
    let t = (strength * num_steps as f64).round() as usize;
    if t == 0 {
        return Err(Error::config(format!(
            "refine_strength {strength} rounds to timestep 0 of {num_steps}"
        )));
    }
    Ok(t)
}

/// Partial noising then control-free denoising of a composited image. Style
/// injection and identity conditioning stay active. A zero strength returns
/// the input unchanged.
pub fn refine(models: &mut Models, req: RefineRequest<'_>, cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.refine_strength == 0.0 {
        return Ok(RunOutput {
            image: req.composited.clone(),
            audit: AuditLog::default(),
            timings_ms: BTreeMap::new(),
        });
    }
    let start = Instant::now();
    let t_star = refine_start(cfg.refine_strength, models.schedule.num_steps())?;
    let steps = ((cfg.ddim_steps as f64 * cfg.refine_strength).round() as usize).clamp(1, t_star);
    with_offset(models, cfg, |m| {
        let prep = prepare(m, req.checkpoint, req.style_source, req.tokens, req.face, cfg)?;
        let z0 = m.codec.encode_image(req.composited);
        let eps = seeded_latent(cfg.seed, "refine.noise", z0.shape())?;
        let z_t = m.schedule.add_noise(&z0, t_star, &eps)?;
        let bundle = ConditioningBundle {
            control: None,
            style_tokens: prep.style.as_ref(),
            face: prep.face.as_ref(),
            lora: prep.lora.as_ref().map(|l| (l, &cfg.scale_map)),
            vcm: Some(prep.vcm.store()),
            injection: cfg.injection.clone(),
        };
        m.unet.enable_audit();
        let Models { unet, schedule, .. } = m;
        let batch = z_t.shape()[0];
        let sampled = ddim_sample_with(schedule, &z_t, t_star, steps, |z, t| {
            unet.unet_forward(z, &vec![t; batch], req.tokens, &bundle)
        });
        let audit = m.unet.take_audit().unwrap_or_default();
        let image = m.codec.decode_rgba(&sampled?);
        let mut timings = BTreeMap::new();
        timings.insert("total".to_string(), ms(start));
        Ok(RunOutput {
            image,
            audit,
            timings_ms: timings,
        })
    })
}

/// JSON record written next to every generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub timings_ms: BTreeMap<String, f64>,
    /// Event counts per block.
    pub audit_summary: BTreeMap<String, BTreeMap<String, usize>>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}
