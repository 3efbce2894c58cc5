//! TOML project configuration: `[backbone]`, `[tune]`, `[pipeline]`,
//! `[injection]` and `[eval]`. Every section and field is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::DEFAULT_EXTRACTOR;
use crate::oneshot::TuneConfig;
use crate::pipeline::{ModelSpec, PipelineConfig};
use crate::vcm::InjectionConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub extractor: String,
    pub extractor_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            extractor: DEFAULT_EXTRACTOR.into(),
            extractor_seed: 0,
        }
    }
}

/// `[pipeline]` without the injection settings, which live in their own section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub ddim_steps: usize,
    pub scale_map: crate::adapters::ScaleMap,
    pub refine_strength: f64,
    pub seed: u64,
    pub offset: Option<crate::pipeline::OffsetSpec>,
    pub mechanisms: crate::pipeline::Mechanisms,
    pub identity_neutral: bool,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            ddim_steps: p.ddim_steps,
            scale_map: p.scale_map,
            refine_strength: p.refine_strength,
            seed: p.seed,
            offset: p.offset,
            mechanisms: p.mechanisms,
            identity_neutral: p.identity_neutral,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub backbone: ModelSpec,
    pub tune: TuneConfig,
    pub pipeline: PipelineSection,
    pub injection: InjectionConfig,
    pub eval: EvalConfig,
}

impl ProjectConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Configuration(reason) => Error::format(path, reason),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.unet.validate()?;
        self.backbone.vcm.validate()?;
        self.tune.validate()?;
        self.pipeline_config().validate()
    }

    /// The full pipeline configuration, with `[injection]` folded in.
    pub fn pipeline_config(&self) -> PipelineConfig {
        let p = &self.pipeline;
        PipelineConfig {
            ddim_steps: p.ddim_steps,
            scale_map: p.scale_map.clone(),
            injection: self.injection.clone(),
            refine_strength: p.refine_strength,
            seed: p.seed,
            offset: p.offset,
            mechanisms: p.mechanisms,
            identity_neutral: p.identity_neutral,
        }
    }
}
