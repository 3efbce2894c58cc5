use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::adapters::checkpoint::{decode_container, encode_container};
use crate::backbone::{
    encoder, is_encoder_param, space_to_depth_factor, time_embedding, AttnEnv, ControlResiduals, LatentTensor,
    ResidualVars, Scope, TokenSequence, UNetConfig, UNetContext, PATCH, UNET_PREFIX,
};
use crate::tensor::{rng_for, randn, zeros, Binder, Graph, ParamStore, Var};
use crate::{Error, Result};

pub(crate) const CONTROL_PREFIX: &str = "control.";
const POSE_CHANNELS: usize = 3;

/// Pose branch: a trainable copy of the backbone encoder whose outputs pass
/// through zero-initialised 1×1 convolutions.
#[derive(Debug, Clone)]
pub struct ControlNet {
    cfg: UNetConfig,
    params: ParamStore,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ControlMeta {
    kind: String,
    config: UNetConfig,
}

impl ControlNet {
    /// Copies the encoder of `ctx` and adds the pose hint and zero convs.
    pub fn from_backbone(ctx: &UNetContext, seed: u64) -> Self {
        let cfg = *ctx.config();
        let mut params = ParamStore::new();
        for (name, t) in ctx.params().iter() {
            if let Some(local) = name.strip_prefix(UNET_PREFIX) {
                if is_encoder_param(local) {
                    params.insert(format!("{CONTROL_PREFIX}{local}"), t.clone());
                }
            }
        }
        let [c0, c1, c2] = cfg.channels;
        let hint_in = POSE_CHANNELS * PATCH * PATCH;
        let w = format!("{CONTROL_PREFIX}hint.conv1.weight");
        let std = 1.0 / ((hint_in * 9) as f64).sqrt();
        params.insert(w.clone(), randn(&mut rng_for(seed, &w), &[c0, hint_in, 3, 3], std));
        params.insert(format!("{CONTROL_PREFIX}hint.conv1.bias"), zeros(&[c0]));
        params.insert(format!("{CONTROL_PREFIX}hint.conv2.weight"), zeros(&[c0, c0, 3, 3]));
        params.insert(format!("{CONTROL_PREFIX}hint.conv2.bias"), zeros(&[c0]));
        for (site, c) in [("0", c0), ("1", c1), ("2", c2), ("mid", c2)] {
            params.insert(format!("{CONTROL_PREFIX}zero_convs.{site}.weight"), zeros(&[c, c, 1, 1]));
            params.insert(format!("{CONTROL_PREFIX}zero_convs.{site}.bias"), zeros(&[c]));
        }
        Self { cfg, params }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.names().map(str::to_string).collect()
    }

    fn check_inputs(&self, pose: &ArrayD<f64>, z_shape: &[usize], timesteps: &[usize]) -> Result<()> {
        let s = self.cfg.image_size;
        if pose.ndim() != 4 || pose.shape()[1..] != [POSE_CHANNELS, s, s] {
            return Err(Error::dim(format!(
                "pose image {:?} does not match [B, 3, {s}, {s}]",
                pose.shape()
            )));
        }
        if pose.shape()[0] != z_shape[0] || timesteps.len() != z_shape[0] {
            return Err(Error::dim("pose, latent and timestep batches differ"));
        }
        let l = self.cfg.latent_size();
        if z_shape[1..] != [crate::backbone::LATENT_CHANNELS, l, l] {
            return Err(Error::dim(format!("latent {z_shape:?} does not fit the control branch")));
        }
        Ok(())
    }

    /// Records the branch on `g`; parameters are bound under `control.`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        pose: &ArrayD<f64>,
        z_t: Var,
        timesteps: &[usize],
        tokens: &TokenSequence,
    ) -> Result<ResidualVars> {
        self.check_inputs(pose, g.value(z_t).shape(), timesteps)?;
        if tokens.dim() != self.cfg.text_dim {
            return Err(Error::dim("token width differs from the control branch"));
        }
        let scope = Scope {
            store: &self.params,
            prefix: CONTROL_PREFIX,
        };
        let hint_in = g.constant(space_to_depth_factor(pose, PATCH));
        let w1 = scope.bind(g, binder, "hint.conv1.weight");
        let b1 = scope.bind(g, binder, "hint.conv1.bias");
        let w2 = scope.bind(g, binder, "hint.conv2.weight");
        let b2 = scope.bind(g, binder, "hint.conv2.bias");
        let h = g.conv2d(hint_in, w1, 1, 1);
        let h = g.add_bias(h, b1);
        let h = g.silu(h);
        let h = g.conv2d(h, w2, 1, 1);
        let hint = g.add_bias(h, b2);

        let text = g.constant(tokens.embeddings().clone().into_dyn());
        let env = AttnEnv::plain(self.cfg.heads, text);
        let temb = time_embedding(g, binder, &scope, timesteps, self.cfg.time_embed_dim);
        let enc = encoder(g, binder, &scope, &self.cfg, z_t, Some(hint), temb, &env, &mut |_, _| {});
        let mut zero_conv = |g: &mut Graph, site: &str, x: Var| {
            let w = scope.bind(g, binder, &format!("zero_convs.{site}.weight"));
            let b = scope.bind(g, binder, &format!("zero_convs.{site}.bias"));
            let y = g.conv2d(x, w, 1, 0);
            g.add_bias(y, b)
        };
        let skips = [
            zero_conv(g, "0", enc.skips[0]),
            zero_conv(g, "1", enc.skips[1]),
            zero_conv(g, "2", enc.skips[2]),
        ];
        let mid = zero_conv(g, "mid", enc.mid);
        Ok(ResidualVars { skips, mid })
    }

    /// Residuals for a batch of pose images `[B, 3, H, W]`.
    pub fn control_forward(
        &self,
        pose: &ArrayD<f64>,
        z_t: &LatentTensor,
        timesteps: &[usize],
        tokens: &TokenSequence,
    ) -> Result<ControlResiduals> {
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let z = g.constant(z_t.values().clone());
        let r = self.forward_graph(&mut g, &mut binder, pose, z, timesteps, tokens)?;
        Ok(ControlResiduals {
            skips: r.skips.map(|v| g.value(v).clone()),
            mid: g.value(r.mid).clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ControlMeta {
            kind: "control".into(),
            config: self.cfg,
        };
        std::fs::write(path, encode_container(&meta, &self.params)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (meta, params): (ControlMeta, ParamStore) = decode_container(&bytes, path)?;
        if meta.kind != "control" {
            return Err(Error::format(path, format!("expected a control checkpoint, found {}", meta.kind)));
        }
        Ok(Self {
            cfg: meta.config,
            params,
        })
    }
}

/// Broadcasts a single pose image `[3, H, W]` to a batch.
pub fn repeat_pose(pose: &ndarray::Array3<f64>, batch: usize) -> ArrayD<f64> {
    let (c, h, w) = pose.dim();
    let mut out = ArrayD::zeros(IxDyn(&[batch, c, h, w]));
    for mut slot in out.outer_iter_mut() {
        slot.assign(&pose.view().into_dyn());
    }
    out
}
