//! Low-rank adapters over the q/k/v/out projections of every attention sublayer.
//!
//! The effective weight is `W + scale·(alpha/rank)·B·A`. `B` starts at zero so a
//! freshly attached set leaves the network untouched; the per-block `scale`
//! comes from a [`ScaleMap`] at composition time and is never folded into the
//! stored factors.

use std::fmt;

use ndarray::{Array2, Ix2};
use serde::{Deserialize, Serialize};

use super::ScaleMap;
use crate::backbone::{BlockPath, UNetContext};
use crate::tensor::{randn_f32_exact, rng_for, zeros, Binder, Graph, ParamStore, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_RANK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    Out,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Self::Q, Self::K, Self::V, Self::Out];

    pub fn module_name(self) -> &'static str {
        match self {
            Self::Q => "to_q",
            Self::K => "to_k",
            Self::V => "to_v",
            Self::Out => "to_out",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.module_name())
    }
}

/// One adapter: `a: [rank, d_in]`, `b: [d_out, rank]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraParam {
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
}

impl LoraParam {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `scale·(alpha/r)·B·A`.
    pub fn scaled_delta(&self, scale: f64) -> Result<Array2<f64>> {
        Ok(self.delta()? * scale)
    }

    pub fn delta(&self) -> Result<Array2<f64>> {
        let a = as_matrix(&self.a, "lora A")?;
        let b = as_matrix(&self.b, "lora B")?;
        if b.ncols() != a.nrows() {
            return Err(Error::dim(format!(
                "B is {:?} but A is {:?}",
                b.shape(),
                a.shape()
            )));
        }
        Ok(b.dot(&a) * (self.alpha / self.rank() as f64))
    }
}

/// `W + scale·(alpha/r)·B·A`.
pub fn effective_weight(w: &Tensor, lora: &LoraParam, scale: f64) -> Result<Tensor> {
    let delta = lora.delta()?;
    if w.shape() != delta.shape() {
        return Err(Error::dim(format!(
            "weight {:?} does not match adapter product {:?}",
            w.shape(),
            delta.shape()
        )));
    }
    if scale == 0.0 {
        return Ok(w.clone());
    }
    Ok(w + &lora.scaled_delta(scale)?.into_dyn())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoraTarget {
    pub path: BlockPath,
    pub projection: Projection,
    pub d_out: usize,
    pub d_in: usize,
}

/// All adapters attached to one context.
#[derive(Debug, Clone)]
pub struct LoraSet {
    rank: usize,
    alpha: f64,
    targets: Vec<LoraTarget>,
    params: ParamStore,
}

pub fn lora_name(path: &BlockPath, proj: Projection, factor: &str) -> String {
    format!("lora.{path}.{proj}.{factor}")
}

/// Attaches one adapter per q/k/v/out projection of every attention sublayer.
pub fn attach_lora(ctx: &mut UNetContext, rank: usize, seed: u64) -> Result<LoraSet> {
    if rank == 0 {
        return Err(Error::config("LoRA rank must be at least 1"));
    }
    if ctx.lora_attached() {
        return Err(Error::config("a LoRA set is already attached to this context"));
    }
    let mut targets = Vec::new();
    let mut params = ParamStore::new();
    for block in ctx.registry().blocks() {
        for proj in Projection::ALL {
            let w = ctx.projection_weight(&block.path, proj)?;
            let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
            let a_name = lora_name(&block.path, proj, "A");
            let mut rng = rng_for(seed, &a_name);
            params.insert(a_name, randn_f32_exact(&mut rng, &[rank, d_in], 1.0 / rank as f64));
            params.insert(lora_name(&block.path, proj, "B"), zeros(&[d_out, rank]));
            targets.push(LoraTarget {
                path: block.path.clone(),
                projection: proj,
                d_out,
                d_in,
            });
        }
    }
    ctx.mark_lora_attached(true);
    Ok(LoraSet {
        rank,
        alpha: rank as f64,
        targets,
        params,
    })
}

/// Releases the context so another set can be attached. Existing sets stay
/// usable as explicit forward arguments.
pub fn detach_lora(ctx: &mut UNetContext) {
    ctx.mark_lora_attached(false);
}

impl LoraSet {
    /// Rebuilds a set from stored factors (checkpoint loading). Every target of
    /// `ctx` must be present with matching shapes.
    pub fn from_params(ctx: &UNetContext, rank: usize, alpha: f64, params: ParamStore) -> Result<Self> {
        let mut targets = Vec::new();
        for block in ctx.registry().blocks() {
            for proj in Projection::ALL {
                let w = ctx.projection_weight(&block.path, proj)?;
                let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
                for (factor, shape) in [("A", [rank, d_in]), ("B", [d_out, rank])] {
                    let name = lora_name(&block.path, proj, factor);
                    let t = params
                        .get(&name)
                        .ok_or_else(|| Error::config(format!("missing LoRA tensor {name}")))?;
                    if t.shape() != shape {
                        return Err(Error::dim(format!(
                            "{name} has shape {:?}, expected {shape:?}",
                            t.shape()
                        )));
                    }
                }
                targets.push(LoraTarget {
                    path: block.path.clone(),
                    projection: proj,
                    d_out,
                    d_in,
                });
            }
        }
        Ok(Self {
            rank,
            alpha,
            targets,
            params: params.filter_prefix("lora."),
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn targets(&self) -> &[LoraTarget] {
        &self.targets
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

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn get(&self, path: &BlockPath, proj: Projection) -> Option<LoraParam> {
        Some(LoraParam {
            a: self.params.get(&lora_name(path, proj, "A"))?.clone(),
            b: self.params.get(&lora_name(path, proj, "B"))?.clone(),
            alpha: self.alpha,
        })
    }

    /// Composes the effective weight on the tape. A zero scale leaves `w`
    /// untouched.
    pub(crate) fn compose(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        w: Var,
        path: &BlockPath,
        proj: Projection,
        scale: f64,
    ) -> Var {
        if scale == 0.0 {
            return w;
        }
        let a_name = lora_name(path, proj, "A");
        let b_name = lora_name(path, proj, "B");
        let a = binder.bind(g, &a_name, self.params.get_arc(&a_name).expect("registered"));
        let b = binder.bind(g, &b_name, self.params.get_arc(&b_name).expect("registered"));
        let ba = g.matmul(b, a);
        let delta = g.scale(ba, scale * self.alpha / self.rank as f64);
        g.add(w, delta)
    }

    /// Effective weights for every target at the scales of `map`.
    pub fn merged_weights(&self, ctx: &UNetContext, map: &ScaleMap) -> Result<Vec<(String, Tensor)>> {
        self.targets
            .iter()
            .map(|t| {
                let w = ctx.projection_weight(&t.path, t.projection)?;
                let lora = self.get(&t.path, t.projection).expect("target registered");
                let name = format!("{}.{}", t.path, t.projection);
                Ok((name, effective_weight(w, &lora, map.lookup(t.path.as_str()))?))
            })
            .collect()
    }
}

fn as_matrix<'a>(t: &'a Tensor, what: &str) -> Result<ndarray::ArrayView2<'a, f64>> {
    t.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::dim(format!("{what} must be a matrix, got {:?}", t.shape())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::UNetConfig;
    use ndarray::{arr2, ArrayD, IxDyn};

    fn tiny_ctx() -> UNetContext {
        UNetContext::new(UNetConfig::tiny(), 0).unwrap()
    }

    #[test]
    fn effective_weight_hand_example() {
        let w = ArrayD::zeros(IxDyn(&[2, 2]));
        let lora = LoraParam {
            a: arr2(&[[1.0, 0.0]]).into_dyn(),
            b: arr2(&[[2.0], [0.0]]).into_dyn(),
            alpha: 1.0,
        };
        let eff = effective_weight(&w, &lora, 1.0).unwrap();
        assert_eq!(eff, arr2(&[[2.0, 0.0], [0.0, 0.0]]).into_dyn());
    }

    #[test]
    fn zero_scale_or_zero_b_leaves_weight_unchanged() {
        let mut rng = rng_for(0, "w");
        let w = crate::tensor::randn(&mut rng, &[3, 4], 1.0);
        let mut lora = LoraParam {
            a: crate::tensor::randn(&mut rng, &[2, 4], 1.0),
            b: crate::tensor::randn(&mut rng, &[3, 2], 1.0),
            alpha: 2.0,
        };
        assert_eq!(effective_weight(&w, &lora, 0.0).unwrap(), w);
        lora.b.fill(0.0);
        assert_eq!(effective_weight(&w, &lora, 0.7).unwrap(), w);
    }

    #[test]
    fn effective_weight_rejects_mismatched_shapes() {
        let w = ArrayD::zeros(IxDyn(&[3, 3]));
        let lora = LoraParam {
            a: ArrayD::zeros(IxDyn(&[1, 2])),
            b: ArrayD::zeros(IxDyn(&[2, 1])),
            alpha: 1.0,
        };
        assert!(matches!(effective_weight(&w, &lora, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn attach_counts_and_double_attach() {
        let mut ctx = tiny_ctx();
        let set = attach_lora(&mut ctx, 2, 0).unwrap();
        assert_eq!(set.targets().len(), ctx.registry().blocks().len() * 4);
        let by_hand: usize = set.targets().iter().map(|t| 2 * (t.d_in + t.d_out)).sum();
        assert_eq!(set.num_scalars(), by_hand);
        assert!(matches!(attach_lora(&mut ctx, 2, 0), Err(Error::Configuration(_))));
        for t in set.targets() {
            let p = set.get(&t.path, t.projection).unwrap();
            assert!(p.b.iter().all(|&v| v == 0.0));
            assert_eq!(p.alpha, 2.0);
        }
    }

    proptest::proptest! {
        #[test]
        fn scale_is_exactly_linear_on_the_delta(seed in 0u64..1000, s in 0.0f64..1.0) {
            let mut rng = rng_for(seed, "lin");
            let w = crate::tensor::randn(&mut rng, &[3, 5], 1.0);
            let lora = LoraParam {
                a: crate::tensor::randn(&mut rng, &[2, 5], 1.0),
                b: crate::tensor::randn(&mut rng, &[3, 2], 1.0),
                alpha: 2.0,
            };
            let full = lora.delta().unwrap();
            proptest::prop_assert_eq!(lora.scaled_delta(s).unwrap(), &full * s);
            let eff = effective_weight(&w, &lora, s).unwrap();
            // eff − W reproduces s·delta up to the rounding of the final add
            for ((e, w0), d) in eff.iter().zip(w.iter()).zip(full.iter()) {
                proptest::prop_assert!(((e - w0) - s * d).abs() <= 4.0 * f64::EPSILON * (w0.abs() + (s * d).abs()));
            }
        }
    }
}
