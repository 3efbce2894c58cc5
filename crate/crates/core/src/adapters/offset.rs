use std::collections::BTreeMap;

use crate::backbone::UNetContext;
use crate::tensor::{randn, rng_for, Tensor};
use crate::{Error, Result};

/// Plug-and-play additive weight offset `w ← w + w′`, keyed by full
/// parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightOffset {
    deltas: BTreeMap<String, Tensor>,
}

impl WeightOffset {
    pub fn new(deltas: BTreeMap<String, Tensor>) -> Self {
        Self { deltas }
    }

    pub fn deltas(&self) -> &BTreeMap<String, Tensor> {
        &self.deltas
    }

    pub fn insert(&mut self, name: impl Into<String>, delta: Tensor) {
        self.deltas.insert(name.into(), delta);
    }

    /// Small Gaussian offset over every backbone parameter; stands in for a
    /// shipped offset file.
    pub fn seeded(ctx: &UNetContext, seed: u64, std: f64) -> Self {
        let deltas = ctx
            .params()
            .iter()
            .map(|(name, w)| {
                let mut rng = rng_for(seed, &format!("offset.{name}"));
                (name.to_string(), randn(&mut rng, w.shape(), std))
            })
            .collect();
        Self { deltas }
    }

    /// Elementwise sum of two offsets; keys present in only one side are kept.
    pub fn combine(&self, other: &Self) -> Result<Self> {
        let mut out = self.deltas.clone();
        for (k, v) in &other.deltas {
            match out.get_mut(k) {
                Some(t) if t.shape() == v.shape() => *t += v,
                Some(t) => {
                    return Err(Error::config(format!(
                        "offset {k}: {:?} vs {:?}",
                        t.shape(),
                        v.shape()
                    )))
                }
                None => {
                    out.insert(k.clone(), v.clone());
                }
            }
        }
        Ok(Self { deltas: out })
    }

    fn validate(&self, ctx: &UNetContext) -> Result<()> {
        for (name, delta) in &self.deltas {
            let w = ctx
                .params()
                .get(name)
                .ok_or_else(|| Error::config(format!("offset targets unknown parameter {name}")))?;
            if w.shape() != delta.shape() {
                return Err(Error::config(format!(
                    "offset for {name} has shape {:?}, parameter is {:?}",
                    delta.shape(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }
}

/// `w ← w + w′` for every entry. Nothing is modified if any entry is invalid.
pub fn apply_weight_offset(ctx: &mut UNetContext, offset: &WeightOffset) -> Result<()> {
    shift(ctx, offset, 1.0)
}

/// `w ← w − w′`; the inverse of [`apply_weight_offset`].
pub fn remove_weight_offset(ctx: &mut UNetContext, offset: &WeightOffset) -> Result<()> {
    shift(ctx, offset, -1.0)
}

fn shift(ctx: &mut UNetContext, offset: &WeightOffset, sign: f64) -> Result<()> {
    offset.validate(ctx)?;
    for (name, delta) in &offset.deltas {
        let w = ctx.params_mut().get_mut(name).expect("validated");
        w.zip_mut_with(delta, |a, &d| *a += sign * d);
    }
    Ok(())
}
