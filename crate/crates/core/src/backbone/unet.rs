//! Toy ε-prediction UNet with SDXL-style attention block names.
//!
//! Three resolution levels (latent, /2, /4) with channel widths `channels`.
//! `down.blocks.0` and `up.blocks.2` are convolution-only; every other block
//! pairs each residual block with a cross-attention sublayer, which is where
//! LoRA, style injection and face identity enter. Skip connections are
//! additive and are also where control residuals are added.

use std::cell::RefCell;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::blocks::{
    AuditLog, BlockInfo, BlockPath, BlockRegistry, HookHandle, HookRecord, HookTable,
    InjectionEvent, Observer,
};
use super::codec::{LatentTensor, LATENT_CHANNELS, PATCH};
use super::text::TokenSequence;
use crate::adapters::{LoraSet, Projection, ScaleMap};
use crate::tensor::{randn, rng_for, zeros, Binder, Graph, ParamStore, Tensor, Var};
use crate::vcm::{FaceConditioning, IdentityStrategy, InjectionConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub channels: [usize; 3],
    pub text_dim: usize,
    pub heads: usize,
    pub time_embed_dim: usize,
    pub image_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            channels: [64, 96, 128],
            text_dim: 64,
            heads: 4,
            time_embed_dim: 128,
            image_size: 64,
        }
    }
}

impl UNetConfig {
    /// Small geometry for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            channels: [8, 8, 8],
            text_dim: 8,
            heads: 2,
            time_embed_dim: 16,
            image_size: 16,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / PATCH
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        if self.heads == 0 || self.channels.iter().any(|c| *c == 0 || c % self.heads != 0) {
            return Err(Error::config("every channel width must be a positive multiple of heads"));
        }
        if self.text_dim == 0 || self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("text_dim must be positive and time_embed_dim even"));
        }
        Ok(())
    }

    /// Attention-bearing blocks: (prefix, channels, level).
    fn attention_blocks(&self) -> [(&'static str, usize); 5] {
        let [_, c1, c2] = self.channels;
        [
            ("down.blocks.1", c1),
            ("down.blocks.2", c2),
            ("mid.block", c2),
            ("up.blocks.0", c2),
            ("up.blocks.1", c1),
        ]
    }

    pub(crate) fn registry(&self) -> BlockRegistry {
        let mut blocks = Vec::new();
        for (prefix, c) in self.attention_blocks() {
            for i in 0..2 {
                blocks.push(BlockInfo {
                    path: BlockPath::from_parts(prefix, i),
                    channels: c,
                });
            }
        }
        BlockRegistry::new(blocks)
    }

    /// Shapes of the skip features (levels 0..3) and the mid-block output.
    pub fn residual_shapes(&self, batch: usize) -> ([Vec<usize>; 3], Vec<usize>) {
        let l = self.latent_size();
        let [c0, c1, c2] = self.channels;
        (
            [
                vec![batch, c0, l, l],
                vec![batch, c1, l / 2, l / 2],
                vec![batch, c2, l / 4, l / 4],
            ],
            vec![batch, c2, l / 4, l / 4],
        )
    }
}

pub(crate) const SKIP_SITES: [&str; 3] = ["down.blocks.0", "down.blocks.1", "down.blocks.2"];
pub(crate) const MID_SITE: &str = "mid.block";

/// Additive residuals for the three skip connections and the mid block.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlResiduals {
    pub skips: [Tensor; 3],
    pub mid: Tensor,
}

impl ControlResiduals {
    pub fn zeros(cfg: &UNetConfig, batch: usize) -> Self {
        let (skips, mid) = cfg.residual_shapes(batch);
        Self {
            skips: skips.map(|s| zeros(&s)),
            mid: zeros(&mid),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.skips.iter().chain(std::iter::once(&self.mid))
    }

    pub fn is_all_zero(&self) -> bool {
        self.iter().all(|t| t.iter().all(|&v| v == 0.0))
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            skips: [0, 1, 2].map(|i| &self.skips[i] + &other.skips[i]),
            mid: &self.mid + &other.mid,
        }
    }
}

/// Graph-resident control residuals.
#[derive(Debug, Clone, Copy)]
pub struct ResidualVars {
    pub skips: [Var; 3],
    pub mid: Var,
}

/// Everything a UNet forward pass may consume besides `z_t`. Absent entries
/// mean the corresponding mechanism is inactive.
pub struct ForwardArgs<'a> {
    pub tokens: &'a TokenSequence,
    pub timesteps: &'a [usize],
    pub lora: Option<(&'a LoraSet, &'a ScaleMap)>,
    /// VCM parameter store holding the style and face attention projections.
    pub vcm: Option<&'a ParamStore>,
    pub injection: &'a InjectionConfig,
    pub face: Option<&'a FaceConditioning>,
    /// Style tokens `[M, d_text]` on the same graph.
    pub style: Option<Var>,
    pub control: Option<ResidualVars>,
}

pub struct UNetOutputs {
    pub eps: Var,
    /// Skip features after control residuals were added.
    pub skips: [Var; 3],
    pub mid: Var,
}

/// Array-level conditioning for [`UNetContext::unet_forward`].
#[derive(Default)]
pub struct ConditioningBundle<'a> {
    pub control: Option<&'a ControlResiduals>,
    pub style_tokens: Option<&'a Array2<f64>>,
    pub face: Option<&'a FaceConditioning>,
    pub lora: Option<(&'a LoraSet, &'a ScaleMap)>,
    pub vcm: Option<&'a ParamStore>,
    pub injection: InjectionConfig,
}

/// Parameters of the backbone plus its block registry, hooks and audit log.
pub struct UNetContext {
    cfg: UNetConfig,
    seed: u64,
    params: ParamStore,
    registry: BlockRegistry,
    hooks: HookTable,
    audit: Option<AuditLog>,
    pass: usize,
    lora_attached: bool,
}

pub(crate) const UNET_PREFIX: &str = "unet.";

impl UNetContext {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        init_params(&mut params, &cfg, seed, UNET_PREFIX);
        Ok(Self {
            cfg,
            seed,
            registry: cfg.registry(),
            params,
            hooks: HookTable::default(),
            audit: None,
            pass: 0,
            lora_attached: false,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn registry(&self) -> &BlockRegistry {
        &self.registry
    }

    pub fn list_blocks(&self) -> Vec<BlockPath> {
        self.registry.paths()
    }

    pub fn register_hook(&mut self, path: &str, observer: Observer) -> Result<HookHandle> {
        let info = self.registry.resolve(path)?;
        Ok(self.hooks.add(info.path.clone(), observer))
    }

    pub fn remove_hook(&mut self, handle: HookHandle) -> bool {
        self.hooks.remove(handle)
    }

    /// Starts recording every injection event into a fresh audit log.
    pub fn enable_audit(&mut self) {
        self.audit = Some(AuditLog::default());
    }

    pub fn take_audit(&mut self) -> Option<AuditLog> {
        self.audit.take()
    }

    pub fn audit(&self) -> Option<&AuditLog> {
        self.audit.as_ref()
    }

    pub fn pass_count(&self) -> usize {
        self.pass
    }

    pub fn lora_attached(&self) -> bool {
        self.lora_attached
    }

    pub(crate) fn mark_lora_attached(&mut self, attached: bool) {
        self.lora_attached = attached;
    }

    pub fn projection_weight(&self, path: &BlockPath, proj: Projection) -> Result<&Tensor> {
        self.registry.resolve(path.as_str())?;
        let name = format!("{UNET_PREFIX}{path}.{}.weight", proj.module_name());
        self.params
            .get(&name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    fn check_args(&self, z_shape: &[usize], args: &ForwardArgs<'_>) -> Result<()> {
        let l = self.cfg.latent_size();
        if z_shape.len() != 4 || z_shape[1] != LATENT_CHANNELS || z_shape[2] != l || z_shape[3] != l {
            return Err(Error::dim(format!(
                "latent {z_shape:?} does not match [B, {LATENT_CHANNELS}, {l}, {l}]"
            )));
        }
        if args.timesteps.len() != z_shape[0] {
            return Err(Error::dim(format!(
                "{} timesteps for a batch of {}",
                args.timesteps.len(),
                z_shape[0]
            )));
        }
        self.check_conditioning(args)
    }

    fn check_conditioning(&self, args: &ForwardArgs<'_>) -> Result<()> {
        if args.tokens.dim() != self.cfg.text_dim {
            return Err(Error::dim(format!(
                "token width {} differs from text_dim {}",
                args.tokens.dim(),
                self.cfg.text_dim
            )));
        }
        args.injection.validate(&self.registry)?;
        if let Some((_, map)) = args.lora {
            map.validate(&self.registry)?;
        }
        let needs_vcm = args.style.is_some()
            || args
                .face
                .is_some_and(|f| f.strategy == IdentityStrategy::AddedCrossAttention);
        if needs_vcm && args.vcm.is_none() {
            return Err(Error::config("style or face attention requires VCM parameters"));
        }
        if let Some(face) = args.face {
            if face.v_star.len() != self.cfg.text_dim || face.face_tokens.ncols() != self.cfg.text_dim {
                return Err(Error::dim("face conditioning width differs from text_dim"));
            }
            if face.strategy.needs_face_slot() && args.tokens.face_slot().is_none() {
                return Err(Error::config(format!(
                    "strategy {} needs a <face> slot in the description",
                    face.strategy
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass on `g`. Base parameters are bound through
    /// `binder` under the `unet.` prefix.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        binder: &mut Binder,
        z_t: Var,
        args: &ForwardArgs<'_>,
    ) -> Result<UNetOutputs> {
        self.check_args(g.value(z_t).shape(), args)?;
        if let Some(c) = args.control {
            let batch = g.value(z_t).shape()[0];
            let (skips, mid) = self.cfg.residual_shapes(batch);
            for (v, s) in c.skips.iter().zip(skips.iter()) {
                if g.value(*v).shape() != s.as_slice() {
                    return Err(Error::dim(format!(
                        "control residual {:?} does not match skip {s:?}",
                        g.value(*v).shape()
                    )));
                }
            }
            if g.value(c.mid).shape() != mid.as_slice() {
                return Err(Error::dim("control mid residual has the wrong shape"));
            }
        }
        self.pass += 1;
        let pass = self.pass;
        let env = attn_env(g, &self.cfg, args)?;

        let scope = Scope {
            store: &self.params,
            prefix: UNET_PREFIX,
        };
        let hooks = &mut self.hooks;
        let audit = RefCell::new(self.audit.take());
        let mut on_attention = |g: &Graph, out: &SublayerOut| {
            if let Some(log) = audit.borrow_mut().as_mut() {
                for e in &out.events {
                    log.push(out.path.as_str(), e, pass);
                }
            }
            if hooks.watches(&out.path) {
                let probs = g.attention_probs(out.text_attention).unwrap_or(&[]);
                hooks.fire(&HookRecord {
                    path: &out.path,
                    pass,
                    events: &out.events,
                    text_attention: probs,
                    input: g.value(out.input),
                    output: g.value(out.residual),
                });
            }
        };

        let temb = time_embedding(g, binder, &scope, args.timesteps, self.cfg.time_embed_dim);
        let enc = encoder(g, binder, &scope, &self.cfg, z_t, None, temb, &env, &mut on_attention);

        let mut skips = enc.skips;
        let mut mid = enc.mid;
        if let Some(c) = args.control {
            for (i, site) in SKIP_SITES.iter().enumerate() {
                skips[i] = g.add(skips[i], c.skips[i]);
                if let Some(log) = audit.borrow_mut().as_mut() {
                    log.push(site, &InjectionEvent::ControlResidual, pass);
                }
            }
            mid = g.add(mid, c.mid);
            if let Some(log) = audit.borrow_mut().as_mut() {
                log.push(MID_SITE, &InjectionEvent::ControlResidual, pass);
            }
        }

        // up path
        let mut h = g.add(mid, skips[2]);
        h = resblock(g, binder, &scope, "up.blocks.0.resnets.0", h, enc.temb_act);
        h = attention_step(g, binder, &scope, "up.blocks.0", 0, h, &env, &mut on_attention);
        h = resblock(g, binder, &scope, "up.blocks.0.resnets.1", h, enc.temb_act);
        h = attention_step(g, binder, &scope, "up.blocks.0", 1, h, &env, &mut on_attention);
        h = g.upsample2x(h);
        h = conv(g, binder, &scope, "up.blocks.0.upsample.conv", h, 1, 1);

        h = g.add(h, skips[1]);
        h = resblock(g, binder, &scope, "up.blocks.1.resnets.0", h, enc.temb_act);
        h = attention_step(g, binder, &scope, "up.blocks.1", 0, h, &env, &mut on_attention);
        h = resblock(g, binder, &scope, "up.blocks.1.resnets.1", h, enc.temb_act);
        h = attention_step(g, binder, &scope, "up.blocks.1", 1, h, &env, &mut on_attention);
        h = g.upsample2x(h);
        h = conv(g, binder, &scope, "up.blocks.1.upsample.conv", h, 1, 1);

        h = g.add(h, skips[0]);
        h = resblock(g, binder, &scope, "up.blocks.2.resnets.0", h, enc.temb_act);
        h = g.silu(h);
        let eps = conv(g, binder, &scope, "conv_out", h, 1, 1);
        self.audit = audit.into_inner();
        Ok(UNetOutputs { eps, skips, mid })
    }

    /// Convenience wrapper: one inference forward pass on plain arrays.
    pub fn unet_forward(
        &mut self,
        z_t: &LatentTensor,
        timesteps: &[usize],
        tokens: &TokenSequence,
        cond: &ConditioningBundle<'_>,
    ) -> Result<LatentTensor> {
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let z = g.constant(z_t.values().clone());
        let style = cond.style_tokens.map(|s| g.constant(s.clone().into_dyn()));
        let control = cond.control.map(|c| ResidualVars {
            skips: [0, 1, 2].map(|i| g.constant(c.skips[i].clone())),
            mid: g.constant(c.mid.clone()),
        });
        let args = ForwardArgs {
            tokens,
            timesteps,
            lora: cond.lora,
            vcm: cond.vcm,
            injection: &cond.injection,
            face: cond.face,
            style,
            control,
        };
        let out = self.forward(&mut g, &mut binder, z, &args)?;
        LatentTensor::new(g.value(out.eps).clone())
    }

    /// Runs the attention sublayer at `path` alone on a hidden state
    /// `[B, C, H, W]` under `cond` (control residuals do not apply here).
    /// Returns the residual and the per-head text attention probabilities.
    /// Hooks and the audit log are not involved.
    pub fn replay_sublayer(
        &self,
        path: &str,
        input: &Tensor,
        tokens: &TokenSequence,
        cond: &ConditioningBundle<'_>,
    ) -> Result<(Tensor, Vec<Array2<f64>>)> {
        let info = self.registry.resolve(path)?;
        if input.ndim() != 4 || input.shape()[1] != info.channels {
            return Err(Error::dim(format!(
                "hidden state {:?} does not fit {path} ({} channels)",
                input.shape(),
                info.channels
            )));
        }
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let style = cond.style_tokens.map(|s| g.constant(s.clone().into_dyn()));
        let args = ForwardArgs {
            tokens,
            timesteps: &[],
            lora: cond.lora,
            vcm: cond.vcm,
            injection: &cond.injection,
            face: cond.face,
            style,
            control: None,
        };
        self.check_conditioning(&args)?;
        let env = attn_env(&mut g, &self.cfg, &args)?;
        let x = g.constant(input.clone());
        let scope = Scope {
            store: &self.params,
            prefix: UNET_PREFIX,
        };
        let out = attention_sublayer(&mut g, &mut binder, &scope, info.path.clone(), x, &env);
        let probs = g.attention_probs(out.text_attention).map(|p| p.to_vec()).unwrap_or_default();
        Ok((g.value(out.residual).clone(), probs))
    }
}

/// Attention environment shared by every sublayer of one forward pass.
fn attn_env<'a>(g: &mut Graph, cfg: &UNetConfig, args: &ForwardArgs<'a>) -> Result<AttnEnv<'a>> {
    let (keys_src, values_src, face_event) = token_sources(args.tokens, args.face)?;
    let text_keys = g.constant(keys_src.into_dyn());
    let text_values = if face_event.is_some() {
        g.constant(values_src.into_dyn())
    } else {
        text_keys
    };
    let face_tokens = match args.face {
        Some(f) if f.strategy == IdentityStrategy::AddedCrossAttention && f.lambda_face != 0.0 => {
            Some((g.constant(f.face_tokens.clone().into_dyn()), f.lambda_face))
        }
        _ => None,
    };
    Ok(AttnEnv {
        heads: cfg.heads,
        text_keys,
        text_values,
        lora: args.lora,
        vcm: args.vcm,
        injection: Some(args.injection),
        style: args.style,
        face_tokens,
        face_event,
    })
}

/// Key and value token rows after applying the identity strategy.
fn token_sources(
    tokens: &TokenSequence,
    face: Option<&FaceConditioning>,
) -> Result<(Array2<f64>, Array2<f64>, Option<InjectionEvent>)> {
    let base = tokens.embeddings().clone();
    let Some(face) = face else {
        return Ok((base.clone(), base, None));
    };
    match face.strategy {
        IdentityStrategy::ValueOnly => {
            let (k, v) = crate::vcm::replace_value_token(tokens, &face.v_star)?;
            Ok((k, v, Some(InjectionEvent::FaceValueReplacement)))
        }
        IdentityStrategy::FullReplacement => {
            let slot = tokens
                .face_slot()
                .ok_or_else(|| Error::Precondition("face slot unset".into()))?;
            let replaced = tokens.with_row(slot, &face.v_star)?.embeddings().clone();
            Ok((replaced.clone(), replaced, Some(InjectionEvent::FaceFullReplacement)))
        }
        IdentityStrategy::AddedCrossAttention => Ok((base.clone(), base, None)),
    }
}

/// Parameter namespace: a store plus a name prefix.
pub(crate) struct Scope<'a> {
    pub store: &'a ParamStore,
    pub prefix: &'a str,
}

impl Scope<'_> {
    pub(crate) fn bind(&self, g: &mut Graph, binder: &mut Binder, local: &str) -> Var {
        let name = format!("{}{local}", self.prefix);
        let value = self
            .store
            .get_arc(&name)
            .unwrap_or_else(|| panic!("parameter {name} not initialised"));
        binder.bind(g, &name, value)
    }

    fn has(&self, local: &str) -> bool {
        self.store.contains(&format!("{}{local}", self.prefix))
    }
}

pub(crate) struct AttnEnv<'a> {
    pub heads: usize,
    pub text_keys: Var,
    pub text_values: Var,
    pub lora: Option<(&'a LoraSet, &'a ScaleMap)>,
    pub vcm: Option<&'a ParamStore>,
    pub injection: Option<&'a InjectionConfig>,
    pub style: Option<Var>,
    pub face_tokens: Option<(Var, f64)>,
    pub face_event: Option<InjectionEvent>,
}

impl<'a> AttnEnv<'a> {
    /// Plain text cross-attention with no mechanisms (control branch).
    pub(crate) fn plain(heads: usize, text: Var) -> Self {
        Self {
            heads,
            text_keys: text,
            text_values: text,
            lora: None,
            vcm: None,
            injection: None,
            style: None,
            face_tokens: None,
            face_event: None,
        }
    }
}

pub(crate) struct SublayerOut {
    pub path: BlockPath,
    pub input: Var,
    pub events: Vec<InjectionEvent>,
    pub text_attention: Var,
    pub residual: Var,
}

pub(crate) type AttentionCallback<'c> = dyn FnMut(&Graph, &SublayerOut) + 'c;

pub(crate) struct EncoderOut {
    pub skips: [Var; 3],
    pub mid: Var,
    pub temb_act: Var,
}

/// Shared by the backbone and the control copy: conv_in, down blocks and mid.
#[allow(clippy::too_many_arguments)]
pub(crate) fn encoder(
    g: &mut Graph,
    binder: &mut Binder,
    scope: &Scope<'_>,
    cfg: &UNetConfig,
    z_t: Var,
    hint: Option<Var>,
    temb: Var,
    env: &AttnEnv<'_>,
    on_attention: &mut AttentionCallback<'_>,
) -> EncoderOut {
    let _ = cfg;
    let temb_act = g.silu(temb);
    let mut h = conv(g, binder, scope, "conv_in", z_t, 1, 1);
    if let Some(hint) = hint {
        h = g.add(h, hint);
    }

    h = resblock(g, binder, scope, "down.blocks.0.resnets.0", h, temb_act);
    let s0 = h;
    h = conv(g, binder, scope, "down.blocks.0.downsample.conv", h, 2, 1);

    h = resblock(g, binder, scope, "down.blocks.1.resnets.0", h, temb_act);
    h = attention_step(g, binder, scope, "down.blocks.1", 0, h, env, on_attention);
    h = resblock(g, binder, scope, "down.blocks.1.resnets.1", h, temb_act);
    h = attention_step(g, binder, scope, "down.blocks.1", 1, h, env, on_attention);
    let s1 = h;
    h = conv(g, binder, scope, "down.blocks.1.downsample.conv", h, 2, 1);

    h = resblock(g, binder, scope, "down.blocks.2.resnets.0", h, temb_act);
    h = attention_step(g, binder, scope, "down.blocks.2", 0, h, env, on_attention);
    h = resblock(g, binder, scope, "down.blocks.2.resnets.1", h, temb_act);
    h = attention_step(g, binder, scope, "down.blocks.2", 1, h, env, on_attention);
    let s2 = h;

    h = resblock(g, binder, scope, "mid.block.resnets.0", h, temb_act);
    h = attention_step(g, binder, scope, "mid.block", 0, h, env, on_attention);
    h = resblock(g, binder, scope, "mid.block.resnets.1", h, temb_act);
    h = attention_step(g, binder, scope, "mid.block", 1, h, env, on_attention);

    EncoderOut {
        skips: [s0, s1, s2],
        mid: h,
        temb_act,
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_step(
    g: &mut Graph,
    binder: &mut Binder,
    scope: &Scope<'_>,
    block: &str,
    index: usize,
    x: Var,
    env: &AttnEnv<'_>,
    on_attention: &mut AttentionCallback<'_>,
) -> Var {
    let path = BlockPath::from_parts(block, index);
    let out = attention_sublayer(g, binder, scope, path, x, env);
    on_attention(g, &out);
    g.add(x, out.residual)
}

pub(crate) fn attention_sublayer(
    g: &mut Graph,
    binder: &mut Binder,
    scope: &Scope<'_>,
    path: BlockPath,
    x: Var,
    env: &AttnEnv<'_>,
) -> SublayerOut {
    let shape = g.value(x).shape().to_vec();
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let mut events = Vec::new();
    let tokens = g.to_tokens(x);

    let mut weights = Projection::ALL.map(|p| {
        scope.bind(g, binder, &format!("{path}.{}.weight", p.module_name()))
    });
    if let Some((lora, map)) = env.lora {
        let s = map.lookup(path.as_str());
        for (i, p) in Projection::ALL.into_iter().enumerate() {
            weights[i] = lora.compose(g, binder, weights[i], &path, p, s);
        }
        events.push(InjectionEvent::LoraScale { scale: s });
    }
    let [wq, wk, wv, wo] = weights;
    let q = g.linear(tokens, wq);
    let k = g.linear(env.text_keys, wk);
    let v = g.linear(env.text_values, wv);
    let text_attention = g.attention(q, k, v, env.heads);
    let mut attn = text_attention;
    if let Some(e) = &env.face_event {
        events.push(e.clone());
    }

    if let (Some(style), Some(cfg), Some(vcm)) = (env.style, env.injection, env.vcm) {
        if cfg.style_active_at(&path) {
            let ks_name = format!("vcm.style_attn.{path}.to_k.weight");
            let vs_name = format!("vcm.style_attn.{path}.to_v.weight");
            let wks = binder.bind(g, &ks_name, vcm.get_arc(&ks_name).expect("style projection"));
            let wvs = binder.bind(g, &vs_name, vcm.get_arc(&vs_name).expect("style projection"));
            let ks = g.linear(style, wks);
            let vs = g.linear(style, wvs);
            let sa = g.attention(q, ks, vs, env.heads);
            let sa = g.scale(sa, cfg.lambda_style);
            attn = g.add(attn, sa);
            events.push(InjectionEvent::StyleInjection {
                lambda: cfg.lambda_style,
            });
        }
    }

    if let (Some((face, lambda)), Some(vcm)) = (env.face_tokens, env.vcm) {
        let kf_name = format!("vcm.face_attn.{path}.to_k.weight");
        let vf_name = format!("vcm.face_attn.{path}.to_v.weight");
        let wkf = binder.bind(g, &kf_name, vcm.get_arc(&kf_name).expect("face projection"));
        let wvf = binder.bind(g, &vf_name, vcm.get_arc(&vf_name).expect("face projection"));
        let kf = g.linear(face, wkf);
        let vf = g.linear(face, wvf);
        let fa = g.attention(q, kf, vf, env.heads);
        let fa = g.scale(fa, lambda);
        attn = g.add(attn, fa);
        events.push(InjectionEvent::FaceCrossAttention { lambda });
    }

    let o = g.linear(attn, wo);
    let bo = scope.bind(g, binder, &format!("{path}.to_out.bias"));
    let o = g.add_bias(o, bo);
    let residual = g.from_tokens(o, b, h, w);
    SublayerOut {
        path,
        input: x,
        events,
        text_attention,
        residual,
    }
}

pub(crate) fn conv(
    g: &mut Graph,
    binder: &mut Binder,
    scope: &Scope<'_>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let w = scope.bind(g, binder, &format!("{name}.weight"));
    let b = scope.bind(g, binder, &format!("{name}.bias"));
    let y = g.conv2d(x, w, stride, pad);
    g.add_bias(y, b)
}

pub(crate) fn resblock(
    g: &mut Graph,
    binder: &mut Binder,
    scope: &Scope<'_>,
    name: &str,
    x: Var,
    temb_act: Var,
) -> Var {
    let mut h = g.silu(x);
    h = conv(g, binder, scope, &format!("{name}.conv1"), h, 1, 1);
    let wt = scope.bind(g, binder, &format!("{name}.time_emb_proj.weight"));
    let bt = scope.bind(g, binder, &format!("{name}.time_emb_proj.bias"));
    let t = g.linear(temb_act, wt);
    let t = g.add_bias(t, bt);
    h = g.add_bias(h, t);
    h = g.silu(h);
    h = conv(g, binder, scope, &format!("{name}.conv2"), h, 1, 1);
    let shortcut = if scope.has(&format!("{name}.conv_shortcut.weight")) {
        conv(g, binder, scope, &format!("{name}.conv_shortcut"), x, 1, 0)
    } else {
        x
    };
    g.add(shortcut, h)
}

pub(crate) fn time_embedding(
    g: &mut Graph,
    binder: &mut Binder,
    scope: &Scope<'_>,
    timesteps: &[usize],
    dim: usize,
) -> Var {
    let sinus = g.constant(sinusoidal_embedding(timesteps, dim));
    let w1 = scope.bind(g, binder, "time_embedding.linear_1.weight");
    let b1 = scope.bind(g, binder, "time_embedding.linear_1.bias");
    let w2 = scope.bind(g, binder, "time_embedding.linear_2.weight");
    let b2 = scope.bind(g, binder, "time_embedding.linear_2.bias");
    let h = g.linear(sinus, w1);
    let h = g.add_bias(h, b1);
    let h = g.silu(h);
    let h = g.linear(h, w2);
    g.add_bias(h, b2)
}

pub fn sinusoidal_embedding(timesteps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = ArrayD::zeros(IxDyn(&[timesteps.len(), dim]));
    for (b, &t) in timesteps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[[b, i]] = arg.cos();
            out[[b, half + i]] = arg.sin();
        }
    }
    out
}

fn insert_conv(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    gain: f64,
) {
    let wname = format!("{name}.weight");
    let mut rng = rng_for(seed, &wname);
    let std = gain / ((cin * k * k) as f64).sqrt();
    store.insert(wname, randn(&mut rng, &[cout, cin, k, k], std));
    store.insert(format!("{name}.bias"), zeros(&[cout]));
}

fn insert_linear(store: &mut ParamStore, seed: u64, name: &str, out: usize, inp: usize, std: f64, bias: bool) {
    let wname = format!("{name}.weight");
    let mut rng = rng_for(seed, &wname);
    store.insert(wname, randn(&mut rng, &[out, inp], std));
    if bias {
        store.insert(format!("{name}.bias"), zeros(&[out]));
    }
}

fn insert_resblock(store: &mut ParamStore, seed: u64, name: &str, cin: usize, cout: usize, te: usize) {
    insert_conv(store, seed, &format!("{name}.conv1"), cout, cin, 3, 1.4);
    insert_linear(
        store,
        seed,
        &format!("{name}.time_emb_proj"),
        cout,
        te,
        1.0 / (te as f64).sqrt(),
        true,
    );
    insert_conv(store, seed, &format!("{name}.conv2"), cout, cout, 3, 0.5);
    if cin != cout {
        insert_conv(store, seed, &format!("{name}.conv_shortcut"), cout, cin, 1, 1.0);
    }
}

fn insert_attention(store: &mut ParamStore, seed: u64, path: &str, c: usize, d: usize) {
    let sc = 1.0 / (c as f64).sqrt();
    let sd = 1.0 / (d as f64).sqrt();
    insert_linear(store, seed, &format!("{path}.to_q"), c, c, sc, false);
    insert_linear(store, seed, &format!("{path}.to_k"), c, d, sd, false);
    insert_linear(store, seed, &format!("{path}.to_v"), c, d, sd, false);
    insert_linear(store, seed, &format!("{path}.to_out"), c, c, 0.5 * sc, true);
}

/// Names the init uses are exactly the names the forward binds.
pub(crate) fn init_params(store: &mut ParamStore, cfg: &UNetConfig, seed: u64, prefix: &str) {
    let p = |n: &str| format!("{prefix}{n}");
    let [c0, c1, c2] = cfg.channels;
    let te = cfg.time_embed_dim;
    let d = cfg.text_dim;
    let st = 1.0 / (te as f64).sqrt();
    insert_linear(store, seed, &p("time_embedding.linear_1"), te, te, st, true);
    insert_linear(store, seed, &p("time_embedding.linear_2"), te, te, st, true);
    insert_conv(store, seed, &p("conv_in"), c0, LATENT_CHANNELS, 3, 1.0);

    insert_resblock(store, seed, &p("down.blocks.0.resnets.0"), c0, c0, te);
    insert_conv(store, seed, &p("down.blocks.0.downsample.conv"), c0, c0, 3, 1.0);
    insert_resblock(store, seed, &p("down.blocks.1.resnets.0"), c0, c1, te);
    insert_resblock(store, seed, &p("down.blocks.1.resnets.1"), c1, c1, te);
    insert_conv(store, seed, &p("down.blocks.1.downsample.conv"), c1, c1, 3, 1.0);
    insert_resblock(store, seed, &p("down.blocks.2.resnets.0"), c1, c2, te);
    insert_resblock(store, seed, &p("down.blocks.2.resnets.1"), c2, c2, te);
    insert_resblock(store, seed, &p("mid.block.resnets.0"), c2, c2, te);
    insert_resblock(store, seed, &p("mid.block.resnets.1"), c2, c2, te);

    insert_resblock(store, seed, &p("up.blocks.0.resnets.0"), c2, c2, te);
    insert_resblock(store, seed, &p("up.blocks.0.resnets.1"), c2, c2, te);
    insert_conv(store, seed, &p("up.blocks.0.upsample.conv"), c1, c2, 3, 1.0);
    insert_resblock(store, seed, &p("up.blocks.1.resnets.0"), c1, c1, te);
    insert_resblock(store, seed, &p("up.blocks.1.resnets.1"), c1, c1, te);
    insert_conv(store, seed, &p("up.blocks.1.upsample.conv"), c0, c1, 3, 1.0);
    insert_resblock(store, seed, &p("up.blocks.2.resnets.0"), c0, c0, te);
    insert_conv(store, seed, &p("conv_out"), LATENT_CHANNELS, c0, 3, 1.0);

    for (block, c) in cfg.attention_blocks() {
        for i in 0..2 {
            insert_attention(store, seed, &p(&format!("{block}.attentions.{i}")), c, d);
        }
    }
}

/// Names of encoder-side parameters (shared with the control copy).
pub(crate) fn is_encoder_param(local: &str) -> bool {
    local.starts_with("time_embedding.")
        || local.starts_with("conv_in.")
        || local.starts_with("down.blocks.")
        || local.starts_with("mid.block.")
}
