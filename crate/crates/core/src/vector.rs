//! Fixed-length embedding vectors and the mean-pooling used by every pipeline.

use serde::{Deserialize, Serialize};

/// A finite `f32` embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Wraps raw values, rejecting empty or non-finite input.
    pub fn new(values: Vec<f32>) -> Option<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            None
        } else {
            Some(Self(values))
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// Element-wise arithmetic mean accumulated in f64. All inputs must share a
/// dimension; returns `None` for an empty input.
pub fn mean_pool<'a, I>(vectors: I) -> Option<Vec<f64>>
where
    I: IntoIterator<Item = &'a EmbeddingVector>,
{
    let mut acc: Option<Vec<f64>> = None;
    let mut n = 0usize;
    for v in vectors {
        let sum = acc.get_or_insert_with(|| vec![0.0; v.dim()]);
        assert_eq!(sum.len(), v.dim(), "mean_pool: mixed dimensions");
        for (s, &x) in sum.iter_mut().zip(v.as_slice()) {
            *s += f64::from(x);
        }
        n += 1;
    }
    let mut acc = acc?;
    let inv = 1.0 / n as f64;
    acc.iter_mut().for_each(|s| *s *= inv);
    Some(acc)
}

/// Scales to unit L2 norm and narrows to f32. A zero vector maps to the first
/// basis vector so the result is always a valid unit embedding.
pub fn l2_normalize(values: &[f64]) -> EmbeddingVector {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let out: Vec<f32> = if norm > 0.0 && norm.is_finite() {
        values.iter().map(|v| (v / norm) as f32).collect()
    } else {
        let mut e = vec![0.0f32; values.len()];
        e[0] = 1.0;
        e
    };
    EmbeddingVector(out)
}

/// Mean of the inputs, renormalized to unit length.
pub fn pool<'a, I>(vectors: I) -> Option<EmbeddingVector>
where
    I: IntoIterator<Item = &'a EmbeddingVector>,
{
    mean_pool(vectors).map(|m| l2_normalize(&m))
}
