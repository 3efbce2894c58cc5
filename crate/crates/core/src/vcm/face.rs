use ndarray::{Array1, Array2, Axis, Ix2};

use super::params::{VcmParams, FACE_LINEAR, FACE_MLP_0, FACE_MLP_2};
use crate::tensor::{Binder, Graph, Var};
use crate::{Error, Result};

/// Identity vector from a face provider.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceEmbedding {
    vector: Array1<f64>,
}

impl FaceEmbedding {
    pub fn new(vector: Array1<f64>) -> Result<Self> {
        if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("face embedding must be non-empty and finite"));
        }
        Ok(Self { vector })
    }

    /// Rescales to unit L2 norm; a zero vector stays zero.
    pub fn normalized(vector: Array1<f64>) -> Result<Self> {
        let n = vector.dot(&vector).sqrt();
        Self::new(if n > 0.0 { vector / n } else { vector })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            vector: Array1::zeros(dim),
        }
    }

    pub fn vector(&self) -> &Array1<f64> {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// `[N, d_text]` face tokens, normally produced by [`project_face`].
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTokens {
    tokens: Array2<f64>,
}

impl FaceTokens {
    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    /// Wraps externally produced tokens; values must be finite.
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("face tokens must be finite"));
        }
        Ok(Self { tokens })
    }

    #[cfg(test)]
    pub(crate) fn from_raw(tokens: Array2<f64>) -> Self {
        Self { tokens }
    }
}

/// `Linear(Projection(p))`: a GELU MLP to `N·d_mid`, then a per-token affine
/// map to `d_text`.
pub fn project_face(params: &VcmParams, p: &FaceEmbedding) -> Result<FaceTokens> {
    let cfg = params.config();
    if p.dim() != cfg.d_face {
        return Err(Error::config(format!(
            "face embedding has {} dims, projection expects {}",
            p.dim(),
            cfg.d_face
        )));
    }
    let mut g = Graph::new();
    let mut binder = Binder::frozen();
    let x = g.constant(p.vector.clone().insert_axis(Axis(0)).into_dyn());
    let out = project_face_graph(&mut g, &mut binder, params, x);
    let tokens = g
        .value(out)
        .clone()
        .into_dimensionality::<Ix2>()
        .expect("face tokens are a matrix");
    Ok(FaceTokens { tokens })
}

/// Tape version of [`project_face`]; `x` is `[1, d_face]`.
pub(crate) fn project_face_graph(g: &mut Graph, binder: &mut Binder, params: &VcmParams, x: Var) -> Var {
    let cfg = params.config();
    let store = params.store();
    let mut bind = |g: &mut Graph, name: String| binder.bind(g, &name, store.get_arc(&name).expect("face parameter"));
    let w0 = bind(g, format!("{FACE_MLP_0}.weight"));
    let b0 = bind(g, format!("{FACE_MLP_0}.bias"));
    let w2 = bind(g, format!("{FACE_MLP_2}.weight"));
    let b2 = bind(g, format!("{FACE_MLP_2}.bias"));
    let wl = bind(g, format!("{FACE_LINEAR}.weight"));
    let bl = bind(g, format!("{FACE_LINEAR}.bias"));
    let h = g.linear(x, w0);
    let h = g.add_bias(h, b0);
    let h = g.gelu(h);
    let h = g.linear(h, w2);
    let h = g.add_bias(h, b2);
    let h = g.reshape(h, &[cfg.face_tokens, cfg.d_mid]);
    let t = g.linear(h, wl);
    g.add_bias(t, bl)
}

/// The per-token affine stage alone, `[n, d_mid]` → `[n, d_text]`.
pub fn face_linear(params: &VcmParams, mid: &Array2<f64>) -> Result<Array2<f64>> {
    let store = params.store();
    let w = store
        .get(&format!("{FACE_LINEAR}.weight"))
        .expect("face linear")
        .view()
        .into_dimensionality::<Ix2>()
        .expect("matrix");
    let b = store.get(&format!("{FACE_LINEAR}.bias")).expect("face bias");
    if mid.ncols() != w.ncols() {
        return Err(Error::config(format!(
            "face linear expects width {}, got {}",
            w.ncols(),
            mid.ncols()
        )));
    }
    let b = b.view().into_dimensionality::<ndarray::Ix1>().expect("vector");
    Ok(mid.dot(&w.t()) + b)
}

/// Softmax over the token axis, independently for every dimension: column
/// `d` of the result sums to one.
pub fn wrap_weights(t: &FaceTokens) -> Result<Array2<f64>> {
    if t.is_empty() {
        return Err(Error::config("cannot wrap an empty face token set"));
    }
    let mut w = t.tokens.clone();
    for mut col in w.columns_mut() {
        let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        col.mapv_inplace(|v| (v - m).exp());
        let z = col.sum();
        col.mapv_inplace(|v| v / z);
    }
    Ok(w)
}

/// `v*_d = s·Σ_i softmax_i(T[:, d])·T[i, d]`.
pub fn wrap_face_token(t: &FaceTokens, s: f64) -> Result<Array1<f64>> {
    let w = wrap_weights(t)?;
    Ok((&w * &t.tokens).sum_axis(Axis(0)) * s)
}
