//! The embedding contract and the built-in deterministic embedder.
//!
//! Pipelines hand fragments (tile pixels, chunk text, windowed slices) to an
//! [`Embedder`] and get back fixed-length vectors. The built-in
//! [`HashEmbedder`] stands in for real foundation models: it is a pure
//! function of the payload bytes, so runs are reproducible bit-for-bit.
//! External models run out-of-process behind [`ExternalEmbedder`].

mod external;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ModalityKind;
use crate::rng::{fnv1a64, SplitMix64};
use crate::vector::{l2_normalize, EmbeddingVector};

pub use external::{serve_ndjson, ExternalEmbedder, DEFAULT_TIMEOUT};

/// Default embedding width.
pub const DEFAULT_DIM: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("fragment {0:?} has an empty payload")]
    EmptyPayload(String),
    #[error("embedder failure: {0}")]
    Failure(String),
    #[error("embedder returned {got} values, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch element {index} failed: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<EmbedError>,
    },
}

impl EmbedError {
    /// Strips any batch wrapper.
    pub fn root(&self) -> &EmbedError {
        match self {
            EmbedError::Batch { source, .. } => source.root(),
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderInfo {
    pub model_id: String,
    pub dim: usize,
    pub modality: ModalityKind,
}

/// One preprocessed unit of input.
#[derive(Debug, Clone, Copy)]
pub struct Fragment<'a> {
    pub id: &'a str,
    pub payload: &'a [u8],
    /// Class label made available to embedders running in label-hint mode.
    /// Ignored by every other embedder.
    pub label_hint: Option<&'a str>,
}

impl<'a> Fragment<'a> {
    pub fn new(id: &'a str, payload: &'a [u8]) -> Self {
        Self {
            id,
            payload,
            label_hint: None,
        }
    }

    pub fn with_hint(mut self, label: Option<&'a str>) -> Self {
        self.label_hint = label;
        self
    }
}

pub trait Embedder: Send + Sync {
    fn info(&self) -> &EmbedderInfo;

    fn embed(&self, fragment: &Fragment<'_>) -> Result<EmbeddingVector, EmbedError>;

    /// Embeds every fragment; element `i` equals `embed(&fragments[i])`.
    /// Fails with the lowest failing index.
    fn embed_batch(&self, fragments: &[Fragment<'_>]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let results: Vec<_> = fragments.par_iter().map(|f| self.embed(f)).collect();
        results
            .into_iter()
            .enumerate()
            .map(|(index, r)| {
                r.map_err(|e| EmbedError::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn info(&self) -> &EmbedderInfo {
        (**self).info()
    }

    fn embed(&self, fragment: &Fragment<'_>) -> Result<EmbeddingVector, EmbedError> {
        (**self).embed(fragment)
    }

    fn embed_batch(&self, fragments: &[Fragment<'_>]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        (**self).embed_batch(fragments)
    }
}

const LABEL_SALT: u64 = 0x6c61_6265_6c5f_6869;

/// Deterministic stand-in embedder.
///
/// The vector for a payload is `k` SplitMix64 draws mapped to [-1, 1),
/// seeded with `fnv1a64(payload) ^ seed`, then L2-normalized in f64 and
/// narrowed to f32. In label-hint mode a per-label unit centroid (same
/// construction, seeded from the label) scaled by `hint_strength` is added
/// before normalization, so fragments sharing a label cluster together.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    info: EmbedderInfo,
    seed: u64,
    hint_strength: Option<f64>,
}

impl HashEmbedder {
    pub const MODEL_ID: &'static str = "builtin-hash-v1";
    pub const HINT_MODEL_ID: &'static str = "builtin-hash-v1+label-hint";

    /// Panics if `dim` is zero.
    pub fn new(dim: usize, modality: ModalityKind) -> Self {
        assert!(dim >= 1, "embedding dim must be positive");
        Self {
            info: EmbedderInfo {
                model_id: Self::MODEL_ID.to_string(),
                dim,
                modality,
            },
            seed: 0,
            hint_strength: None,
        }
    }

    /// XORed into every derived seed. Zero by default.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Enables label-hint mode.
    pub fn with_label_hint(mut self, strength: f64) -> Self {
        self.hint_strength = Some(strength);
        self.info.model_id = Self::HINT_MODEL_ID.to_string();
        self
    }

    fn unit_draws(&self, seed: u64) -> Vec<f64> {
        let mut rng = SplitMix64::new(seed);
        let mut v: Vec<f64> = (0..self.info.dim).map(|_| rng.next_signed()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    fn centroid(&self, label: &str) -> Vec<f64> {
        self.unit_draws(fnv1a64(label.as_bytes()) ^ self.seed ^ LABEL_SALT)
    }
}

impl Embedder for HashEmbedder {
    fn info(&self) -> &EmbedderInfo {
        &self.info
    }

    fn embed(&self, fragment: &Fragment<'_>) -> Result<EmbeddingVector, EmbedError> {
        if fragment.payload.is_empty() {
            return Err(EmbedError::EmptyPayload(fragment.id.to_string()));
        }
        let mut v = self.unit_draws(fnv1a64(fragment.payload) ^ self.seed);
        if let (Some(strength), Some(label)) = (self.hint_strength, fragment.label_hint) {
            for (x, c) in v.iter_mut().zip(self.centroid(label)) {
                *x += strength * c;
            }
        }
        Ok(l2_normalize(&v))
    }
}
