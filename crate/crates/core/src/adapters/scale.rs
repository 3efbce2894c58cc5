use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{BlockPath, BlockRegistry};
use crate::{Error, Result};

/// Block whose LoRA runs at full strength by default.
pub const FULL_SCALE_BLOCK: &str = "up.blocks.0.attentions.1";
/// Strength for every other attention block by default.
pub const REDUCED_SCALE: f64 = 0.2;

/// Per-block LoRA multipliers, consulted when effective weights are composed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleMap {
    entries: BTreeMap<BlockPath, f64>,
    default_scale: f64,
}

impl Default for ScaleMap {
    fn default() -> Self {
        default_scale_map()
    }
}

pub fn default_scale_map() -> ScaleMap {
    let mut entries = BTreeMap::new();
    entries.insert(BlockPath::parse(FULL_SCALE_BLOCK).expect("valid path"), 1.0);
    ScaleMap {
        entries,
        default_scale: REDUCED_SCALE,
    }
}

impl ScaleMap {
    pub fn new(entries: BTreeMap<BlockPath, f64>, default_scale: f64) -> Result<Self> {
        for (path, &s) in entries.iter().map(|(p, s)| (p.as_str(), s)).chain([("<default>", &default_scale)]) {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::config(format!("scale {s} for {path} outside [0, 1]")));
            }
        }
        Ok(Self {
            entries,
            default_scale,
        })
    }

    /// Same scale at every block.
    pub fn uniform(scale: f64) -> Result<Self> {
        Self::new(BTreeMap::new(), scale)
    }

    pub fn lookup(&self, path: &str) -> f64 {
        self.entries
            .iter()
            .find(|(p, _)| p.as_str() == path)
            .map_or(self.default_scale, |(_, s)| *s)
    }

    pub fn default_scale(&self) -> f64 {
        self.default_scale
    }

    pub fn entries(&self) -> &BTreeMap<BlockPath, f64> {
        &self.entries
    }

    pub fn validate(&self, registry: &BlockRegistry) -> Result<()> {
        for path in self.entries.keys() {
            registry.resolve(path.as_str())?;
        }
        Ok(())
    }
}
