//! Hierarchical attention-block names, the registry that resolves them, and
//! the observer hooks used to audit what each sublayer injected.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Dot-separated attention sublayer name such as `up.blocks.0.attentions.1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockPath(String);

impl BlockPath {
    /// Syntactic check only; use [`BlockRegistry::resolve`] to check existence.
    pub fn parse(s: &str) -> Result<Self> {
        let ok = !s.is_empty()
            && s.split('.')
                .all(|seg| !seg.is_empty() && seg.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'));
        if ok {
            Ok(Self(s.to_string()))
        } else {
            Err(Error::config(format!("malformed block path {s:?}")))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub(crate) fn from_parts(prefix: &str, index: usize) -> Self {
        Self(format!("{prefix}.attentions.{index}"))
    }
}

impl fmt::Display for BlockPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockInfo {
    pub path: BlockPath,
    pub channels: usize,
}

/// Attention sublayers in forward (topological) order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockRegistry {
    blocks: Vec<BlockInfo>,
}

impl BlockRegistry {
    pub(crate) fn new(blocks: Vec<BlockInfo>) -> Self {
        Self { blocks }
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn paths(&self) -> Vec<BlockPath> {
        self.blocks.iter().map(|b| b.path.clone()).collect()
    }

    pub fn resolve(&self, path: &str) -> Result<&BlockInfo> {
        self.blocks
            .iter()
            .find(|b| b.path.as_str() == path)
            .ok_or_else(|| Error::config(format!("{path:?} is not a registered attention sublayer")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.blocks.iter().any(|b| b.path.as_str() == path)
    }
}

/// Something a mechanism did inside one attention sublayer (or, for control
/// residuals, at a skip connection) during a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum InjectionEvent {
    LoraScale { scale: f64 },
    StyleInjection { lambda: f64 },
    FaceValueReplacement,
    FaceFullReplacement,
    FaceCrossAttention { lambda: f64 },
    ControlResidual,
}

impl InjectionEvent {
    pub fn name(&self) -> &'static str {
        match self {
            Self::LoraScale { .. } => "lora_scale",
            Self::StyleInjection { .. } => "style_injection",
            Self::FaceValueReplacement => "face_value_replacement",
            Self::FaceFullReplacement => "face_full_replacement",
            Self::FaceCrossAttention { .. } => "face_cross_attention",
            Self::ControlResidual => "control_residual",
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Self::LoraScale { scale } => Some(*scale),
            Self::StyleInjection { lambda } | Self::FaceCrossAttention { lambda } => Some(*lambda),
            _ => None,
        }
    }
}

/// What an observer sees after a hooked sublayer ran.
pub struct HookRecord<'a> {
    pub path: &'a BlockPath,
    /// Forward-pass counter of the owning context.
    pub pass: usize,
    pub events: &'a [InjectionEvent],
    /// Text cross-attention probabilities, one `[queries, tokens]` matrix per head.
    pub text_attention: &'a [Array2<f64>],
    /// Hidden state entering the sublayer, `[B, C, H, W]`.
    pub input: &'a Tensor,
    /// Residual the sublayer added to its input, `[B, C, H, W]`.
    pub output: &'a Tensor,
}

pub type Observer = Box<dyn FnMut(&HookRecord<'_>) + Send>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HookHandle(u64);

#[derive(Default)]
pub(crate) struct HookTable {
    next: u64,
    hooks: Vec<(BlockPath, HookHandle, Observer)>,
}

impl HookTable {
    pub(crate) fn add(&mut self, path: BlockPath, observer: Observer) -> HookHandle {
        let handle = HookHandle(self.next);
        self.next += 1;
        self.hooks.push((path, handle, observer));
        handle
    }

    pub(crate) fn remove(&mut self, handle: HookHandle) -> bool {
        let before = self.hooks.len();
        self.hooks.retain(|(_, h, _)| *h != handle);
        before != self.hooks.len()
    }

    pub(crate) fn watches(&self, path: &BlockPath) -> bool {
        self.hooks.iter().any(|(p, _, _)| p == path)
    }

    pub(crate) fn fire(&mut self, record: &HookRecord<'_>) {
        for (p, _, obs) in &mut self.hooks {
            if p == record.path {
                obs(record);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub path: String,
    pub event: String,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

/// Every injection event of every forward pass, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
}

impl AuditLog {
    pub(crate) fn push(&mut self, path: &str, event: &InjectionEvent, step: usize) {
        self.records.push(AuditRecord {
            path: path.to_string(),
            event: event.name().to_string(),
            step,
            value: event.value(),
        });
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: AuditLog) {
        self.records.extend(other.records);
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("audit record serializes"));
            out.push('\n');
        }
        out
    }

    /// Paths at which `event` occurred, deduplicated.
    pub fn paths_with(&self, event: &str) -> Vec<String> {
        let mut paths: Vec<String> = self
            .records
            .iter()
            .filter(|r| r.event == event)
            .map(|r| r.path.clone())
            .collect();
        paths.sort();
        paths.dedup();
        paths
    }

    /// Distinct values recorded for `event` at each path.
    pub fn values_by_path(&self, event: &str) -> BTreeMap<String, Vec<f64>> {
        let mut map: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.event == event) {
            if let Some(v) = r.value {
                let entry = map.entry(r.path.clone()).or_default();
                if !entry.contains(&v) {
                    entry.push(v);
                }
            }
        }
        map
    }

    /// Event counts per (event, path), for manifests.
    pub fn summary(&self) -> BTreeMap<String, BTreeMap<String, usize>> {
        let mut out: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.event.clone())
                .or_default()
                .entry(r.path.clone())
                .or_default() += 1;
        }
        out
    }
}
