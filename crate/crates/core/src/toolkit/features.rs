//! Pluggable feature extractors standing in for learned perceptual and
//! self-supervised similarity networks.

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayD, Axis};

use crate::tensor::{randn, rng_for, Graph, Tensor};
use crate::{Error, Result};

pub const DEFAULT_EXTRACTOR: &str = "toy-randproj";
pub const LINEAR_EXTRACTOR: &str = "toy-linear";

/// Maps an RGB image `[3, H, W]` to one feature vector per layer.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn layers(&self, img: &Array3<f64>) -> Result<Vec<Vec<f64>>>;
}

pub(crate) fn conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.conv2d(xv, wv, stride, pad);
    g.value(y).clone()
}

fn batched(img: &Array3<f64>) -> Result<Tensor> {
    if img.dim().0 != 3 {
        return Err(Error::dim(format!("extractor expects [3, H, W], got {:?}", img.shape())));
    }
    Ok(img.clone().into_dyn().insert_axis(Axis(0)))
}

/// Two fixed seeded stride-2 convolutions without bias, with a `tanh`
/// between them; both layers are reported.
#[derive(Debug, Clone)]
pub struct ToyRandProj {
    name: String,
    w1: Tensor,
    w2: Tensor,
}

impl ToyRandProj {
    pub fn new(seed: u64) -> Self {
        Self {
            name: DEFAULT_EXTRACTOR.into(),
            w1: randn(&mut rng_for(seed, "features.conv1"), &[16, 3, 4, 4], 1.0 / 48f64.sqrt()),
            w2: randn(&mut rng_for(seed, "features.conv2"), &[32, 16, 4, 4], 1.0 / 256f64.sqrt()),
        }
    }
}

impl FeatureExtractor for ToyRandProj {
    fn name(&self) -> &str {
        &self.name
    }

    fn layers(&self, img: &Array3<f64>) -> Result<Vec<Vec<f64>>> {
        let x = batched(img)?;
        let h1 = conv(&x, &self.w1, 2, 1).mapv(f64::tanh);
        let h2 = conv(&h1, &self.w2, 2, 1);
        Ok(vec![h1.iter().copied().collect(), h2.iter().copied().collect()])
    }
}

/// A single seeded zero-bias convolution: strictly linear in its input.
#[derive(Debug, Clone)]
pub struct ToyLinear {
    w: Tensor,
}

impl ToyLinear {
    pub fn new(seed: u64) -> Self {
        Self {
            w: randn(&mut rng_for(seed, "features.linear"), &[8, 3, 4, 4], 1.0 / 48f64.sqrt()),
        }
    }
}

impl FeatureExtractor for ToyLinear {
    fn name(&self) -> &str {
        LINEAR_EXTRACTOR
    }

    fn layers(&self, img: &Array3<f64>) -> Result<Vec<Vec<f64>>> {
        Ok(vec![conv(&batched(img)?, &self.w, 4, 0).iter().copied().collect()])
    }
}

/// Extractors by name.
pub struct ExtractorRegistry {
    entries: BTreeMap<String, Box<dyn FeatureExtractor>>,
}

impl Default for ExtractorRegistry {
    fn default() -> Self {
        Self::with_defaults(0)
    }
}

impl ExtractorRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// The two toy extractors, seeded with `seed`.
    pub fn with_defaults(seed: u64) -> Self {
        let mut r = Self::empty();
        r.register(Box::new(ToyRandProj::new(seed)));
        r.register(Box::new(ToyLinear::new(seed)));
        r
    }

    /// Adds or replaces an extractor under its own name.
    pub fn register(&mut self, extractor: Box<dyn FeatureExtractor>) {
        self.entries.insert(extractor.name().to_string(), extractor);
    }

    pub fn get(&self, name: &str) -> Result<&dyn FeatureExtractor> {
        self.entries.get(name).map(Box::as_ref).ok_or_else(|| {
            Error::config(format!(
                "unknown feature extractor {name:?}; registered: {:?}",
                self.entries.keys().collect::<Vec<_>>()
            ))
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

fn as_rgb(img: &ArrayD<f64>) -> Result<Array3<f64>> {
    img.clone()
        .into_dimensionality()
        .map_err(|_| Error::dim(format!("expected an RGB image [3, H, W], got {:?}", img.shape())))
}

/// Cosine similarity of the flattened features of all layers.
pub fn feature_similarity(a: &ArrayD<f64>, b: &ArrayD<f64>, extractor: &dyn FeatureExtractor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("feature_similarity: image shapes differ"));
    }
    let fa: Vec<f64> = extractor.layers(&as_rgb(a)?)?.concat();
    let fb: Vec<f64> = extractor.layers(&as_rgb(b)?)?.concat();
    Ok(cosine(&fa, &fb))
}

/// Perceptual-style distance: per layer, half the squared distance between
/// unit-normalised features, averaged over layers. Zero for equal inputs.
pub fn perceptual_distance(a: &ArrayD<f64>, b: &ArrayD<f64>, extractor: &dyn FeatureExtractor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("perceptual_distance: image shapes differ"));
    }
    let la = extractor.layers(&as_rgb(a)?)?;
    let lb = extractor.layers(&as_rgb(b)?)?;
    let n = la.len().max(1) as f64;
    Ok(la.iter().zip(&lb).map(|(x, y)| 1.0 - cosine(x, y)).sum::<f64>() / n)
}
