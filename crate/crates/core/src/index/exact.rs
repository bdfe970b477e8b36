use rayon::prelude::*;

use super::{hit_order, IndexError, Metric, NeighborHit, VectorSet};
use crate::store::Store;

/// Brute-force index: every query scans all rows.
#[derive(Debug, Clone)]
pub struct ExactIndex {
    set: VectorSet,
}

impl ExactIndex {
    pub fn build(store: &Store, metric: Metric) -> Result<Self, IndexError> {
        if store.is_empty() {
            return Err(IndexError::EmptyStore);
        }
        Ok(Self::from_set(VectorSet::from_store(store, metric)?))
    }

    pub fn from_set(set: VectorSet) -> Self {
        Self { set }
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.set.metric()
    }

    pub fn vectors(&self) -> &VectorSet {
        &self.set
    }

    /// True top-`k` (clamped to the index size), ascending by distance then id.
    pub fn query(&self, vector: &[f32], k: usize) -> Result<Vec<NeighborHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidParameter("k must be >= 1".into()));
        }
        let q = self.set.prepare(vector)?;
        let set = &self.set;
        let mut scored: Vec<(f64, usize)> = (0..set.len())
            .into_par_iter()
            .with_min_len(1024)
            .map(|i| (set.distance_to(&q, i), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| hit_order((a.0, set.id(a.1)), (b.0, set.id(b.1)));
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(d, i)| NeighborHit {
                record_id: set.id(i).to_string(),
                distance: d,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn set(metric: Metric, n: usize, d: usize, seed: u64) -> (VectorSet, Vec<Vec<f32>>) {
        let mut rng = SplitMix64::new(seed);
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.next_gaussian() as f32).collect())
            .collect();
        let ids = (0..n).map(|i| format!("r{i:03}")).collect();
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        (VectorSet::new(metric, d, ids, &flat).unwrap(), rows)
    }

    #[test]
    fn self_query_is_top_hit() {
        for metric in [Metric::Euclidean, Metric::Cosine] {
            let (s, rows) = set(metric, 50, 8, 1);
            let idx = ExactIndex::from_set(s);
            for (i, r) in rows.iter().enumerate() {
                let hits = idx.query(r, 1).unwrap();
                assert_eq!(hits[0].record_id, format!("r{i:03}"));
                assert_eq!(hits[0].distance, 0.0);
            }
        }
    }

    #[test]
    fn matches_independent_argmin() {
        let (s, rows) = set(Metric::Euclidean, 100, 12, 9);
        let idx = ExactIndex::from_set(s);
        let mut rng = SplitMix64::new(77);
        for _ in 0..20 {
            let q: Vec<f32> = (0..12).map(|_| rng.next_gaussian() as f32).collect();
            let mut best = (f64::INFINITY, 0);
            for (i, r) in rows.iter().enumerate() {
                let d: f64 = r.iter().zip(&q).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>().sqrt();
                if d < best.0 {
                    best = (d, i);
                }
            }
            let hit = &idx.query(&q, 1).unwrap()[0];
            assert_eq!(hit.record_id, format!("r{:03}", best.1));
            assert!((hit.distance - best.0).abs() < 1e-9);
        }
    }

    #[test]
    fn k_three_on_eight_fixed_vectors() {
        let rows: [[f32; 2]; 8] = [
            [0.0, 0.0],
            [1.0, 0.0],
            [0.0, 2.0],
            [3.0, 3.0],
            [-1.0, -1.0],
            [0.5, 0.5],
            [2.0, -2.0],
            [-3.0, 1.0],
        ];
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        let ids: Vec<String> = (0..8).map(|i| format!("v{i}")).collect();
        let idx = ExactIndex::from_set(VectorSet::new(Metric::Euclidean, 2, ids, &flat).unwrap());
        let q = [0.4f32, 0.1];
        let mut all: Vec<(f64, String)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let d = ((r[0] as f64 - q[0] as f64).powi(2) + (r[1] as f64 - q[1] as f64).powi(2)).sqrt();
                (d, format!("v{i}"))
            })
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let hits = idx.query(&q, 3).unwrap();
        let got: Vec<_> = hits.iter().map(|h| h.record_id.clone()).collect();
        let want: Vec<_> = all[..3].iter().map(|a| a.1.clone()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn clamps_k_and_breaks_ties_by_id() {
        let flat = [1.0f32, 0.0, 1.0, 0.0, 0.0, 1.0];
        let ids = vec!["b".to_string(), "a".to_string(), "c".to_string()];
        let idx = ExactIndex::from_set(VectorSet::new(Metric::Euclidean, 2, ids, &flat).unwrap());
        let hits = idx.query(&[1.0, 0.0], 10).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].record_id, "a");
        assert_eq!(hits[1].record_id, "b");
    }

    #[test]
    fn cosine_scale_invariance() {
        let (s, _) = set(Metric::Cosine, 60, 10, 4);
        let idx = ExactIndex::from_set(s);
        let q: Vec<f32> = (0..10).map(|i| (i as f32 * 0.37).sin()).collect();
        let q5: Vec<f32> = q.iter().map(|x| x * 5.0).collect();
        let a: Vec<_> = idx.query(&q, 10).unwrap().into_iter().map(|h| h.record_id).collect();
        let b: Vec<_> = idx.query(&q5, 10).unwrap().into_iter().map(|h| h.record_id).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn dim_mismatch() {
        let (s, _) = set(Metric::Euclidean, 5, 4, 1);
        let idx = ExactIndex::from_set(s);
        assert!(matches!(idx.query(&[0.0; 3], 1), Err(IndexError::DimMismatch { .. })));
    }
}
