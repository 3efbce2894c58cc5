use ndarray::{Array1, Array2};

use super::config::{FaceConditioning, IdentityStrategy, InjectionConfig};
use super::face::{wrap_face_token, FaceTokens};
use crate::backbone::TokenSequence;
use crate::tensor::attention_forward;
use crate::{Error, Result};

/// Keys keep the original rows; values get `v*` at the face slot.
pub fn replace_value_token(
    tokens: &TokenSequence,
    v_star: &Array1<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let slot = tokens
        .face_slot()
        .ok_or_else(|| Error::Precondition("description has no <face> slot".into()))?;
    let values = tokens.with_row(slot, v_star)?;
    Ok((tokens.embeddings().clone(), values.embeddings().clone()))
}

/// Builds the per-forward face conditioning for `strategy`: wraps the face
/// tokens into `v*` with intensity `cfg.s` and checks the description can
/// host it.
pub fn apply_identity_strategy(
    strategy: IdentityStrategy,
    tokens: &TokenSequence,
    face_tokens: &FaceTokens,
    cfg: &InjectionConfig,
) -> Result<FaceConditioning> {
    if strategy.needs_face_slot() && tokens.face_slot().is_none() {
        return Err(Error::Precondition(format!(
            "strategy {strategy} needs a <face> slot in the description"
        )));
    }
    if face_tokens.tokens().ncols() != tokens.dim() {
        return Err(Error::dim(format!(
            "face tokens have width {}, description has {}",
            face_tokens.tokens().ncols(),
            tokens.dim()
        )));
    }
    Ok(FaceConditioning {
        v_star: wrap_face_token(face_tokens, cfg.s)?,
        face_tokens: face_tokens.tokens().clone(),
        strategy,
        lambda_face: cfg.lambda_face,
    })
}

/// Multi-head scaled dot-product attention on plain matrices. Returns the
/// output `[Nq, C]` and per-head probabilities `[Nq, L]`.
pub fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let c = q.ncols();
    if heads == 0 || c % heads != 0 || k.ncols() != c || v.ncols() != c || k.nrows() != v.nrows() {
        return Err(Error::dim(format!(
            "attention shapes q {:?}, k {:?}, v {:?} with {heads} heads",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    Ok(attention_forward(&q.view(), &k.view(), &v.view(), heads))
}
