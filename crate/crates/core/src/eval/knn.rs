use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EvalError, SplitPlan};
use crate::index::{ExactIndex, Metric, VectorSet};
use crate::store::Store;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_accuracy: BTreeMap<String, f64>,
    /// Row and column order of `confusion`.
    pub labels: Vec<String>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub k: usize,
    pub metric: Metric,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub test_fraction: f64,
}

fn resolve(store: &Store, ids: &[String]) -> Result<Vec<usize>, EvalError> {
    ids.iter()
        .map(|id| store.find(id).ok_or_else(|| EvalError::UnknownRecord(id.clone())))
        .collect()
}

fn label_of(store: &Store, i: usize) -> Result<&str, EvalError> {
    store
        .meta(i)
        .label
        .as_deref()
        .ok_or_else(|| EvalError::UnlabeledRecord(store.meta(i).record_id.clone()))
}

/// Majority label among `ranked` (nearest first). Ties go to the tied label
/// that appears earliest in the ranking.
pub(crate) fn vote<'a>(ranked: &[&'a str]) -> &'a str {
    let mut counts: Vec<(&str, usize, usize)> = Vec::new();
    for (rank, &l) in ranked.iter().enumerate() {
        match counts.iter_mut().find(|(x, _, _)| *x == l) {
            Some(entry) => entry.1 += 1,
            None => counts.push((l, 1, rank)),
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
        .map(|(l, _, _)| l)
        .expect("at least one neighbour")
}

/// Labels every test record by majority vote of its `k` nearest training
/// records under exact search.
pub fn knn_classify(store: &Store, split: &SplitPlan, k: usize, metric: Metric) -> Result<EvalReport, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidParameter("k must be >= 1".into()));
    }
    let train = resolve(store, &split.train_ids)?;
    let test = resolve(store, &split.test_ids)?;
    if train.is_empty() {
        return Err(EvalError::InvalidParameter("empty training set".into()));
    }
    let train_labels: Vec<&str> = train.iter().map(|&i| label_of(store, i)).collect::<Result<_, _>>()?;
    let index = ExactIndex::from_set(VectorSet::from_store_subset(store, metric, &train)?);
    let position: std::collections::HashMap<&str, usize> = train
        .iter()
        .enumerate()
        .map(|(pos, &i)| (store.meta(i).record_id.as_str(), pos))
        .collect();

    let predictions: Vec<(&str, &str)> = test
        .par_iter()
        .map(|&i| -> Result<(&str, &str), EvalError> {
            let hits = index.query(store.vector(i), k)?;
            let ranked: Vec<&str> = hits
                .iter()
                .map(|h| train_labels[position[h.record_id.as_str()]])
                .collect();
            Ok((label_of(store, i)?, vote(&ranked)))
        })
        .collect::<Result<_, _>>()?;

    let mut labels: Vec<String> = train_labels
        .iter()
        .copied()
        .chain(predictions.iter().map(|p| p.0))
        .map(str::to_string)
        .collect();
    labels.sort();
    labels.dedup();
    let slot: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut confusion = vec![vec![0u64; labels.len()]; labels.len()];
    for (truth, pred) in &predictions {
        confusion[slot[truth]][slot[pred]] += 1;
    }
    let correct: u64 = (0..labels.len()).map(|i| confusion[i][i]).sum();
    let n_test = predictions.len();
    let per_class_accuracy = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let row: u64 = confusion[i].iter().sum();
            (row > 0).then(|| (l.clone(), confusion[i][i] as f64 / row as f64))
        })
        .collect();
    Ok(EvalReport {
        accuracy: if n_test == 0 { 0.0 } else { correct as f64 / n_test as f64 },
        per_class_accuracy,
        labels,
        confusion,
        k,
        metric,
        n_train: train.len(),
        n_test,
        seed: split.seed,
        test_fraction: split.test_fraction,
    })
}
