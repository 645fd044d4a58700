//! Evaluation metrics: ROC-AUC, average precision, MAE, accuracy and
//! multi-seed aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: String,
    pub value: f64,
    pub n_samples: usize,
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len("roc_auc labels", scores.len(), labels.len())?;
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric {
            metric: "roc_auc",
            reason: "both classes must be present".into(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::precondition("roc_auc scores contain NaN"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based mid-ranks of the positives.
    let mut positive_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let mid_rank = (start + 1 + end) as f64 / 2.0;
        let tied_positives = order[start..end].iter().filter(|&&i| labels[i]).count();
        positive_rank_sum += mid_rank * tied_positives as f64;
        start = end;
    }
    let p = positives as f64;
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Step-interpolated average precision `sum_k (R_k - R_{k-1}) * P_k` over
/// the ranking by descending score. Equal scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len("average_precision labels", scores.len(), labels.len())?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric {
            metric: "average_precision",
            reason: "no positive labels".into(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::precondition("average_precision scores contain NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort: ties stay in index order.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_len("mae targets", predictions.len(), targets.len())?;
    if predictions.is_empty() {
        return Err(Error::precondition("mae requires at least one pair"));
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / predictions.len() as f64)
}

pub fn accuracy(predicted: &[usize], targets: &[usize]) -> Result<f64> {
    check_len("accuracy targets", predicted.len(), targets.len())?;
    if predicted.is_empty() {
        return Err(Error::precondition("accuracy requires at least one pair"));
    }
    let correct = predicted
        .iter()
        .zip(targets)
        .filter(|(p, t)| p == t)
        .count();
    Ok(correct as f64 / predicted.len() as f64)
}

/// Mean and sample standard deviation (`n - 1` denominator, 0 for one value).
pub fn aggregate_seeds(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::precondition(
            "aggregate_seeds requires at least one value",
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}
