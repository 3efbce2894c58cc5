use serde::{Deserialize, Serialize};

use crate::backbone::{BlockPath, UNetConfig};
use crate::tensor::{randn_f32_exact, rng_for, zeros, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VcmConfig {
    pub d_face: usize,
    /// Number of face tokens `N`.
    pub face_tokens: usize,
    pub d_mid: usize,
    pub face_hidden: usize,
    pub style_channels: usize,
}

impl Default for VcmConfig {
    fn default() -> Self {
        Self {
            d_face: 64,
            face_tokens: 4,
            d_mid: 64,
            face_hidden: 128,
            style_channels: 32,
        }
    }
}

impl VcmConfig {
    pub fn tiny() -> Self {
        Self {
            d_face: 8,
            face_tokens: 2,
            d_mid: 8,
            face_hidden: 8,
            style_channels: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_face, self.face_tokens, self.d_mid, self.face_hidden, self.style_channels]
            .contains(&0)
        {
            return Err(Error::config("VCM dimensions must be positive"));
        }
        Ok(())
    }
}

/// Style tokens produced by the style encoder: a 2×4 grid.
pub const STYLE_TOKENS: usize = 8;
pub(crate) const STYLE_GRID: (usize, usize) = (2, 4);

pub(crate) const FACE_MLP_0: &str = "vcm.face_proj.mlp.0";
pub(crate) const FACE_MLP_2: &str = "vcm.face_proj.mlp.2";
pub(crate) const FACE_LINEAR: &str = "vcm.face_proj.linear";
pub(crate) const STYLE_CONV_1: &str = "vcm.style_enc.conv1";
pub(crate) const STYLE_CONV_2: &str = "vcm.style_enc.conv2";
pub(crate) const STYLE_OUT: &str = "vcm.style_enc.proj";
pub(crate) const STYLE_POS: &str = "vcm.style_enc.pos";

/// Parameters of the Visual Consistency Module: face Projection/Linear,
/// style encoder, and the per-block style and face attention projections.
#[derive(Debug, Clone)]
pub struct VcmParams {
    cfg: VcmConfig,
    text_dim: usize,
    store: ParamStore,
}

impl VcmParams {
    pub fn new(unet: &UNetConfig, cfg: VcmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = unet.text_dim;
        let mut store = ParamStore::new();
        let lin = |store: &mut ParamStore, name: &str, shape: &[usize], fan_in: usize, gain: f64| {
            let w = format!("{name}.weight");
            let mut rng = rng_for(seed, &w);
            store.insert(w, randn_f32_exact(&mut rng, shape, gain / (fan_in as f64).sqrt()));
            store.insert(format!("{name}.bias"), zeros(&shape[..1]));
        };
        lin(&mut store, FACE_MLP_0, &[cfg.face_hidden, cfg.d_face], cfg.d_face, 1.0);
        lin(
            &mut store,
            FACE_MLP_2,
            &[cfg.face_tokens * cfg.d_mid, cfg.face_hidden],
            cfg.face_hidden,
            1.0,
        );
        lin(&mut store, FACE_LINEAR, &[d, cfg.d_mid], cfg.d_mid, 1.0);

        let sc = cfg.style_channels;
        lin(&mut store, STYLE_CONV_1, &[sc, 3, 3, 3], 27, 1.4);
        lin(&mut store, STYLE_CONV_2, &[sc, sc, 3, 3], sc * 9, 1.4);
        lin(&mut store, STYLE_OUT, &[d, sc], sc, 1.0);
        let mut rng = rng_for(seed, STYLE_POS);
        store.insert(STYLE_POS, randn_f32_exact(&mut rng, &[STYLE_TOKENS, d], 0.1));

        for info in unet.registry().blocks() {
            for kind in ["style_attn", "face_attn"] {
                for proj in ["to_k", "to_v"] {
                    let name = format!("vcm.{kind}.{}.{proj}.weight", info.path);
                    let mut rng = rng_for(seed, &name);
                    let w = randn_f32_exact(&mut rng, &[info.channels, d], 1.0 / (d as f64).sqrt());
                    store.insert(name, w);
                }
            }
        }
        Ok(Self {
            cfg,
            text_dim: d,
            store,
        })
    }

    pub fn config(&self) -> &VcmConfig {
        &self.cfg
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Style encoder tensors plus style K′/V′ at the given blocks.
    pub fn style_param_names<'a>(&self, blocks: impl IntoIterator<Item = &'a BlockPath>) -> Vec<String> {
        let mut names: Vec<String> = self
            .store
            .names()
            .filter(|n| n.starts_with("vcm.style_enc."))
            .map(str::to_string)
            .collect();
        for path in blocks {
            for proj in ["to_k", "to_v"] {
                names.push(format!("vcm.style_attn.{path}.{proj}.weight"));
            }
        }
        names
    }

    /// Face Projection (MLP) and Linear tensors.
    pub fn face_param_names(&self) -> Vec<String> {
        self.store
            .names()
            .filter(|n| n.starts_with("vcm.face_proj."))
            .map(str::to_string)
            .collect()
    }
}
