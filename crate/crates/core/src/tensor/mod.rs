//! Dense fp64 tensors, seeded initialisation and a small reverse-mode tape.

mod adam;
mod binder;
mod graph;
mod params;

pub use adam::{Adam, AdamConfig};
pub use binder::Binder;
pub(crate) use graph::attention_forward;
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Tensor = ArrayD<f64>;

/// 64-bit FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Deterministic generator derived from a run seed and a label, so each named
/// tensor gets its own stream independent of creation order.
pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    let mixed = fnv1a(label.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(mixed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
}

/// Gaussian tensor rounded to fp32-representable values, so it survives the
/// fp32 checkpoint payload bit for bit.
pub fn randn_f32_exact(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    randn(rng, shape, std).mapv(round_to_f32)
}

#[inline]
pub fn round_to_f32(x: f64) -> f64 {
    x as f32 as f64
}

pub fn zeros(shape: &[usize]) -> Tensor {
    ArrayD::zeros(IxDyn(shape))
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

pub fn l2_norm(a: &Tensor) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
