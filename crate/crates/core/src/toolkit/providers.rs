//! File-backed inputs (masks, face embeddings, descriptions, poses) and the
//! toy face embedder used when no external face model is available.

use std::path::Path;

use ndarray::{s, Array1, Array3};

use super::features::conv;
use super::io::load_rgb_png;
use crate::backbone::ImageRGBA;
use crate::control::{PoseInput, PoseSpec};
use crate::tensor::{randn, rng_for};
use crate::vcm::FaceEmbedding;
use crate::{Error, Result};

pub use super::io::load_mask;

/// Width of embeddings produced by [`toy_face_embed`].
pub const TOY_FACE_DIM: usize = 64;
const FACE_CROP: usize = 16;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// A JSON array of numbers, or raw little-endian fp32 values.
pub fn load_face_embedding(path: &Path) -> Result<FaceEmbedding> {
    let bytes = read(path)?;
    let looks_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
        || bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'[');
    let values: Vec<f64> = if looks_json {
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, format!("face embedding JSON: {e}")))?
    } else {
        if bytes.is_empty() || bytes.len() % 4 != 0 {
            return Err(Error::format(
                path,
                format!("raw fp32 embedding has {} bytes, not a positive multiple of 4", bytes.len()),
            ));
        }
        bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect()
    };
    if values.is_empty() {
        return Err(Error::format(path, "face embedding is empty"));
    }
    FaceEmbedding::new(Array1::from(values)).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes JSON for a `.json` path (exact for any fp64), raw fp32 otherwise.
pub fn save_face_embedding(path: &Path, emb: &FaceEmbedding) -> Result<()> {
    let bytes = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::to_vec(&emb.vector().to_vec()).expect("numbers serialize")
    } else {
        emb.vector().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_description(path: &Path) -> Result<String> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::format(path, format!("description is not UTF-8: {e}")))?;
    let text = text.trim().to_string();
    if text.is_empty() {
        return Err(Error::format(path, "description is empty"));
    }
    Ok(text)
}

/// Keypoint JSON, or a rendered skeleton PNG.
pub fn load_pose(path: &Path) -> Result<PoseInput> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        Ok(PoseInput::Image(load_rgb_png(path)?))
    } else {
        Ok(PoseInput::Keypoints(PoseSpec::load(path)?))
    }
}

/// Bounding box `(top, bottom, left, right)` (inclusive) of nonzero alpha.
fn alpha_bbox(img: &ImageRGBA) -> Option<(usize, usize, usize, usize)> {
    let a = img.alpha(0);
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), &v) in a.indexed_iter() {
        if v > 0.0 {
            bbox = Some(match bbox {
                None => (y, y, x, x),
                Some((t, b, l, r)) => (t.min(y), b.max(y), l.min(x), r.max(x)),
            });
        }
    }
    bbox
}

/// Deterministic face descriptor: the top quarter of the body's bounding box,
/// resampled to 16×16, through a fixed seeded convolution and `tanh`,
/// mean-centred, randomly projected to 64 dimensions and L2-normalised.
pub fn toy_face_embed(img: &ImageRGBA) -> Result<FaceEmbedding> {
    if img.batch() != 1 {
        return Err(Error::dim("toy_face_embed takes a single image"));
    }
    let (top, bottom, left, right) =
        alpha_bbox(img).ok_or_else(|| Error::Precondition("image has no foreground pixels".into()))?;
    let h = ((bottom - top + 1) / 4).max(1);
    let w = right - left + 1;
    let rgb = img.premultiplied_rgb();
    let rgb = rgb.slice(s![0, .., top..top + h, left..=right]);
    let mut crop = Array3::<f64>::zeros((3, FACE_CROP, FACE_CROP));
    for ((c, y, x), v) in crop.indexed_iter_mut() {
        *v = rgb[[c, y * h / FACE_CROP, x * w / FACE_CROP]];
    }
    let kernel = randn(&mut rng_for(0, "toy_face.conv"), &[8, 3, 3, 3], 1.0 / 27f64.sqrt());
    let feats = conv(&crop.into_dyn().insert_axis(ndarray::Axis(0)), &kernel, 2, 1).mapv(|v| (2.0 * v).tanh());
    let n = feats.len();
    let mean = feats.sum() / n as f64;
    let centred = feats.mapv(|v| v - mean).into_shape_with_order(n).expect("flat");
    let proj = randn(&mut rng_for(0, "toy_face.proj"), &[TOY_FACE_DIM, n], 1.0 / (n as f64).sqrt())
        .into_shape_with_order((TOY_FACE_DIM, n))
        .expect("matrix");
    let e = proj.dot(&centred);
    if e.iter().all(|&v| v == 0.0) {
        return Err(Error::Precondition("face region has no texture".into()));
    }
    FaceEmbedding::normalized(e)
}
