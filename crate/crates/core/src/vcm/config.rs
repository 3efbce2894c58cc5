use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::backbone::{BlockPath, BlockRegistry};
use crate::{Error, Result};

/// Blocks that receive style injection by default.
pub const STYLE_BLOCKS: [&str; 2] = ["up.blocks.0.attentions.0", "up.blocks.0.attentions.1"];
pub const DEFAULT_WRAP_SCALE: f64 = 4.0;

/// How the face identity enters cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityStrategy {
    /// `v*` replaces the face row of the value sequence only; keys and queries
    /// keep the original tokens.
    ValueOnly,
    /// `v*` replaces the face row of the sequence used for both keys and values.
    FullReplacement,
    /// Tokens untouched; an extra `λ_face·Attn(Q, K_f, V_f)` over the face tokens.
    AddedCrossAttention,
}

impl IdentityStrategy {
    pub const ALL: [IdentityStrategy; 3] = [
        Self::ValueOnly,
        Self::FullReplacement,
        Self::AddedCrossAttention,
    ];

    /// Row label used in ablation reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::ValueOnly => "VCM (Ours)",
            Self::FullReplacement => "Full Token Replacement",
            Self::AddedCrossAttention => "Cross-Attention",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::ValueOnly => "value_only",
            Self::FullReplacement => "full_replacement",
            Self::AddedCrossAttention => "added_cross_attention",
        }
    }

    pub fn needs_face_slot(self) -> bool {
        matches!(self, Self::ValueOnly | Self::FullReplacement)
    }
}

impl fmt::Display for IdentityStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for IdentityStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        match norm.as_str() {
            "value_only" | "vcm" => Ok(Self::ValueOnly),
            "full_replacement" | "full_token_replacement" => Ok(Self::FullReplacement),
            "added_cross_attention" | "cross_attention" => Ok(Self::AddedCrossAttention),
            _ => Err(Error::config(format!("unknown identity strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionConfig {
    pub whitelist: BTreeSet<BlockPath>,
    pub lambda_style: f64,
    /// Wrapped-token intensity `s`.
    pub s: f64,
    pub strategy: IdentityStrategy,
    /// Weight of the extra face attention under `AddedCrossAttention`.
    pub lambda_face: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            whitelist: STYLE_BLOCKS
                .iter()
                .map(|p| BlockPath::parse(p).expect("valid path"))
                .collect(),
            lambda_style: 1.0,
            s: DEFAULT_WRAP_SCALE,
            strategy: IdentityStrategy::ValueOnly,
            lambda_face: 1.0,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self, registry: &BlockRegistry) -> Result<()> {
        for p in &self.whitelist {
            registry.resolve(p.as_str())?;
        }
        if !(self.lambda_style >= 0.0 && self.lambda_style.is_finite()) {
            return Err(Error::config(format!(
                "lambda_style must be a finite non-negative number, got {}",
                self.lambda_style
            )));
        }
        if !self.s.is_finite() || !self.lambda_face.is_finite() {
            return Err(Error::config("s and lambda_face must be finite"));
        }
        Ok(())
    }

    pub fn style_active_at(&self, path: &BlockPath) -> bool {
        self.lambda_style != 0.0 && self.whitelist.contains(path)
    }

    /// Whitelist widened to every registered block.
    pub fn widened(&self, registry: &BlockRegistry) -> Self {
        Self {
            whitelist: registry.paths().into_iter().collect(),
            ..self.clone()
        }
    }
}

/// Face identity inputs for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceConditioning {
    pub v_star: Array1<f64>,
    /// `[N, d_text]` projected face tokens (used by `AddedCrossAttention`).
    pub face_tokens: Array2<f64>,
    pub strategy: IdentityStrategy,
    pub lambda_face: f64,
}
