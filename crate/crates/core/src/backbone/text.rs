//! Toy text conditioning: descriptions become deterministic token embeddings.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::tensor::{randn, rng_for};
use crate::{Error, Result};

pub const FACE_MARKER: &str = "<face>";
pub const BOS: &str = "<bos>";

/// Ordered text-conditioning embeddings `[L, d_text]` with an optional face slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    embeddings: Array2<f64>,
    face_slot: Option<usize>,
}

impl TokenSequence {
    pub fn new(embeddings: Array2<f64>, face_slot: Option<usize>) -> Result<Self> {
        if embeddings.nrows() == 0 {
            return Err(Error::dim("token sequence must not be empty"));
        }
        if let Some(slot) = face_slot {
            if slot >= embeddings.nrows() {
                return Err(Error::Index(format!(
                    "face slot {slot} outside 0..{}",
                    embeddings.nrows()
                )));
            }
        }
        Ok(Self {
            embeddings,
            face_slot,
        })
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn face_slot(&self) -> Option<usize> {
        self.face_slot
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Copy with row `slot` overwritten; the length never changes.
    pub fn with_row(&self, slot: usize, row: &Array1<f64>) -> Result<Self> {
        if slot >= self.len() {
            return Err(Error::Index(format!("row {slot} outside 0..{}", self.len())));
        }
        if row.len() != self.dim() {
            return Err(Error::dim(format!(
                "replacement row has width {}, tokens have {}",
                row.len(),
                self.dim()
            )));
        }
        let mut embeddings = self.embeddings.clone();
        embeddings.row_mut(slot).assign(row);
        Ok(Self {
            embeddings,
            face_slot: self.face_slot,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl TextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    /// Lower-cased words and the `<face>` marker; punctuation is dropped.
    pub fn tokenize(text: &str) -> Vec<String> {
        let mut words = vec![BOS.to_string()];
        for raw in text.split_whitespace() {
            let lower = raw.to_lowercase();
            if let Some(pos) = lower.find(FACE_MARKER) {
                let (before, rest) = lower.split_at(pos);
                let after = &rest[FACE_MARKER.len()..];
                push_word(&mut words, before);
                words.push(FACE_MARKER.to_string());
                push_word(&mut words, after);
            } else {
                push_word(&mut words, &lower);
            }
        }
        words
    }

    /// Each word maps to a seeded Gaussian vector plus a small positional
    /// signal; the first `<face>` marker becomes the face slot.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let words = Self::tokenize(text);
        let mut emb = Array2::zeros((words.len(), self.dim));
        for (pos, word) in words.iter().enumerate() {
            let mut rng = rng_for(self.seed, &format!("text.word.{word}"));
            let v = randn(&mut rng, &[self.dim], 1.0);
            for d in 0..self.dim {
                let freq = 1.0 / 10_000f64.powf((d / 2) as f64 * 2.0 / self.dim as f64);
                let angle = pos as f64 * freq;
                let signal = if d % 2 == 0 { angle.sin() } else { angle.cos() };
                emb[[pos, d]] = v[[d]] + 0.1 * signal;
            }
        }
        let face_slot = words.iter().position(|w| w == FACE_MARKER);
        TokenSequence::new(emb, face_slot).expect("at least the BOS token")
    }
}

fn push_word(words: &mut Vec<String>, raw: &str) {
    let cleaned: String = raw.chars().filter(|c| c.is_alphanumeric()).collect();
    if !cleaned.is_empty() {
        words.push(cleaned);
    }
}
