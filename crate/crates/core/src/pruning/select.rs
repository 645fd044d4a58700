use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Outcome of one selection step.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneDecision {
    /// Selected ids in ascending order.
    pub selected_ids: Vec<usize>,
    /// Realized threshold: the smallest selected score.
    pub delta: f64,
    /// Scores of every id in the batch.
    pub scores: BTreeMap<usize, f64>,
}

impl PruneDecision {
    pub fn is_selected(&self, id: usize) -> bool {
        self.selected_ids.binary_search(&id).is_ok()
    }

    pub fn keep_count(&self) -> usize {
        self.selected_ids.len()
    }
}

/// `ceil(keep_fraction * n)`, clamped to `[1, n]`.
///
/// Products such as `(1 - 0.7) * 10 = 3.0000000000000004` are
/// representation noise, so the ceiling ignores excess below `1e-9`.
pub fn keep_count(keep_fraction: f64, n: usize) -> usize {
    let raw = keep_fraction * n as f64;
    ((raw - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Keeps the `keep_count(keep_fraction, |batch|)` highest-scoring ids; equal
/// scores rank by ascending id.
pub fn select_topk(
    scores: &BTreeMap<usize, f64>,
    batch_ids: &[usize],
    keep_fraction: f64,
) -> Result<PruneDecision> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::precondition(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    if batch_ids.is_empty() {
        return Err(Error::precondition(
            "select_topk requires a non-empty batch",
        ));
    }
    let mut ranked = Vec::with_capacity(batch_ids.len());
    let mut seen = BTreeSet::new();
    for &id in batch_ids {
        if !seen.insert(id) {
            return Err(Error::precondition(format!("duplicate id {id} in batch")));
        }
        let score = *scores
            .get(&id)
            .ok_or_else(|| Error::precondition(format!("no score for id {id}")))?;
        if score.is_nan() {
            return Err(Error::precondition(format!("score of id {id} is NaN")));
        }
        ranked.push((id, score));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let k = keep_count(keep_fraction, ranked.len());
    let delta = ranked[k - 1].1;
    let mut selected_ids: Vec<usize> = ranked[..k].iter().map(|&(id, _)| id).collect();
    selected_ids.sort_unstable();
    Ok(PruneDecision {
        selected_ids,
        delta,
        scores: ranked.into_iter().collect(),
    })
}
