//! Nearest-neighbour search over stored embeddings.
//!
//! [`ExactIndex`] is a full scan and serves as the correctness oracle for
//! the approximate [`HnswIndex`].

mod exact;
mod hnsw;

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::store::Store;

pub use exact::ExactIndex;
pub use hnsw::{HnswGraph, HnswIndex, HnswParams, DEFAULT_EF_SEARCH};

/// File name of a persisted HNSW graph inside a store directory.
pub const HNSW_FILE: &str = "index-hnsw.bin";

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("cannot index an empty store")]
    EmptyStore,
    #[error("query has dim {got}, index dim is {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("index file: {0}")]
    Format(String),
    #[error("index file I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Metric {
    type Err = IndexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" | "l2" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(IndexError::InvalidParameter(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborHit {
    pub record_id: String,
    pub distance: f64,
}

/// Orders by distance, then record id.
pub(crate) fn hit_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1))
}

/// Eight independent f64 lanes, combined pairwise. The summation order is
/// fixed, so every code path below yields bit-identical results.
#[inline(always)]
fn squared_l2_lanes(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 8];
    let split = a.len() / 8 * 8;
    for (ca, cb) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for j in 0..8 {
            let d = f64::from(ca[j]) - f64::from(cb[j]);
            acc[j] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        let d = f64::from(*x) - f64::from(*y);
        tail += d * d;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn squared_l2_avx2(a: &[f32], b: &[f32]) -> f64 {
    squared_l2_lanes(a, b)
}

#[inline]
fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            return unsafe { squared_l2_avx2(a, b) };
        }
    }
    squared_l2_lanes(a, b)
}

/// Scales to unit length in f64 and narrows; zero vectors stay zero and
/// are reported as degenerate.
fn unit(v: &[f32]) -> (Vec<f32>, bool) {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm > 0.0 {
        (v.iter().map(|&x| (f64::from(x) / norm) as f32).collect(), false)
    } else {
        (vec![0.0; v.len()], true)
    }
}

/// Vectors prepared for a metric: cosine rows are stored unit-normalized so
/// that cosine distance reduces to half the squared Euclidean distance.
#[derive(Debug, Clone)]
pub struct VectorSet {
    metric: Metric,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    degenerate: Vec<bool>,
}

/// A query vector prepared for the set's metric.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    values: Vec<f32>,
    degenerate: bool,
}

impl VectorSet {
    /// `data` is row-major with `ids.len()` rows of `dim` values.
    pub fn new(metric: Metric, dim: usize, ids: Vec<String>, data: &[f32]) -> Result<Self, IndexError> {
        if ids.is_empty() {
            return Err(IndexError::EmptyStore);
        }
        if dim == 0 || data.len() != ids.len() * dim {
            return Err(IndexError::InvalidParameter(format!(
                "{} values do not form {} rows of dim {dim}",
                data.len(),
                ids.len()
            )));
        }
        let (data, degenerate) = match metric {
            Metric::Euclidean => (data.to_vec(), vec![false; ids.len()]),
            Metric::Cosine => {
                let mut out = Vec::with_capacity(data.len());
                let mut flags = Vec::with_capacity(ids.len());
                for row in data.chunks_exact(dim) {
                    let (u, zero) = unit(row);
                    out.extend_from_slice(&u);
                    flags.push(zero);
                }
                (out, flags)
            }
        };
        let n_zero = degenerate.iter().filter(|&&z| z).count();
        if n_zero > 0 {
            log::warn!("{n_zero} zero-norm vectors; their cosine distance is fixed at 1.0");
        }
        Ok(Self {
            metric,
            dim,
            ids,
            data,
            degenerate,
        })
    }

    pub fn from_store(store: &Store, metric: Metric) -> Result<Self, IndexError> {
        let ids = store.metas().iter().map(|m| m.record_id.clone()).collect();
        Self::new(metric, store.dim(), ids, store.matrix())
    }

    /// Subset of a store by record index, in the given order.
    pub fn from_store_subset(store: &Store, metric: Metric, indices: &[usize]) -> Result<Self, IndexError> {
        let mut data = Vec::with_capacity(indices.len() * store.dim());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(store.vector(i));
            ids.push(store.meta(i).record_id.clone());
        }
        Self::new(metric, store.dim(), ids, &data)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&z| z).count()
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn prepare(&self, query: &[f32]) -> Result<PreparedQuery, IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        Ok(match self.metric {
            Metric::Euclidean => PreparedQuery {
                values: query.to_vec(),
                degenerate: false,
            },
            Metric::Cosine => {
                let (values, degenerate) = unit(query);
                if degenerate {
                    log::warn!("zero-norm query; all cosine distances are 1.0");
                }
                PreparedQuery { values, degenerate }
            }
        })
    }

    pub fn distance_to(&self, q: &PreparedQuery, i: usize) -> f64 {
        self.raw_distance(&q.values, q.degenerate, i)
    }

    fn distance_between(&self, i: usize, j: usize) -> f64 {
        self.raw_distance(self.row(i), self.degenerate[i], j)
    }

    #[inline]
    fn raw_distance(&self, q: &[f32], q_zero: bool, i: usize) -> f64 {
        match self.metric {
            Metric::Euclidean => squared_l2(q, self.row(i)).sqrt(),
            Metric::Cosine => {
                if q_zero || self.degenerate[i] {
                    1.0
                } else {
                    (0.5 * squared_l2(q, self.row(i))).min(2.0)
                }
            }
        }
    }
}

/// Euclidean or cosine distance between two raw vectors.
pub fn distance(metric: Metric, a: &[f32], b: &[f32]) -> f64 {
    match metric {
        Metric::Euclidean => squared_l2(a, b).sqrt(),
        Metric::Cosine => {
            let (ua, za) = unit(a);
            let (ub, zb) = unit(b);
            if za || zb {
                1.0
            } else {
                (0.5 * squared_l2(&ua, &ub)).min(2.0)
            }
        }
    }
}
