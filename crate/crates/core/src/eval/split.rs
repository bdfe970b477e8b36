use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::rng::{shuffle, SplitMix64};
use crate::store::Store;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
    pub test_fraction: f64,
}

/// Per-class split. Classes are visited in ascending label order, each
/// shuffled with one shared SplitMix64 stream; a class of size `n` sends
/// `round(test_fraction * n)`, clamped to `1..=n-1`, records to test. Both
/// id lists come back in store order.
pub fn stratified_split(store: &Store, test_fraction: f64, seed: u64) -> Result<SplitPlan, EvalError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(EvalError::InvalidParameter(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, m) in store.metas().iter().enumerate() {
        let label = m
            .label
            .as_deref()
            .ok_or_else(|| EvalError::UnlabeledRecord(m.record_id.clone()))?;
        by_label.entry(label).or_default().push(i);
    }
    if let Some((label, _)) = by_label.iter().find(|(_, v)| v.len() < 2) {
        return Err(EvalError::ClassTooSmall(label.to_string()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut is_test = vec![false; store.record_count()];
    for members in by_label.values_mut() {
        shuffle(members, &mut rng);
        let n = members.len();
        let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
        for &i in &members[..n_test] {
            is_test[i] = true;
        }
    }
    let (mut train_ids, mut test_ids) = (Vec::new(), Vec::new());
    for (i, m) in store.metas().iter().enumerate() {
        if is_test[i] {
            test_ids.push(m.record_id.clone());
        } else {
            train_ids.push(m.record_id.clone());
        }
    }
    Ok(SplitPlan {
        train_ids,
        test_ids,
        seed,
        test_fraction,
    })
}
