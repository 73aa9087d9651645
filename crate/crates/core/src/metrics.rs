//! Accuracy, macro-F, ROC-AUC and average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: BTreeMap<String, f64>,
    pub n_examples: usize,
    /// Gold count per class (classification) or `[negatives, positives]` (CTR).
    pub support: Vec<usize>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Data(format!("length mismatch: {a} predictions vs {b} labels")));
    }
    if a == 0 {
        return Err(Error::Data("metric over an empty set".into()));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], gold: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), gold.len())?;
    let hits = preds.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Unweighted mean of per-class F1 over the classes present in `gold`.
pub fn macro_f(preds: &[usize], gold: &[usize], n_classes: usize) -> Result<f64> {
    check_lengths(preds.len(), gold.len())?;
    if let Some(&bad) = preds.iter().chain(gold).find(|&&c| c >= n_classes) {
        return Err(Error::Index {
            what: "classes",
            index: bad,
            bound: n_classes,
        });
    }
    let mut tp = vec![0usize; n_classes];
    let mut pred_count = vec![0usize; n_classes];
    let mut gold_count = vec![0usize; n_classes];
    for (&p, &g) in preds.iter().zip(gold) {
        pred_count[p] += 1;
        gold_count[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in (0..n_classes).filter(|&c| gold_count[c] > 0) {
        present += 1;
        if tp[c] == 0 {
            continue;
        }
        let precision = tp[c] as f64 / pred_count[c] as f64;
        let recall = tp[c] as f64 / gold_count[c] as f64;
        sum += 2.0 * precision * recall / (precision + recall);
    }
    Ok(sum / present as f64)
}

/// Mann-Whitney AUC: P(score⁺ > score⁻) with ties counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC is undefined with a single class".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("roc_auc scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, using mid-ranks for ties (1-based)
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        rank_sum2 += mid2 * pos_in_tie;
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Ok((u2 as f64 / 2.0) / (p * n) as f64)
}

/// Non-interpolated AP. Ranking is a stable sort by descending score, so
/// ties keep their original order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::Data("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

pub fn classification_report(preds: &[usize], gold: &[usize], n_classes: usize) -> Result<MetricsReport> {
    let mut support = vec![0; n_classes];
    for &g in gold {
        if g < n_classes {
            support[g] += 1;
        }
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("accuracy".to_string(), accuracy(preds, gold)?);
    metrics.insert("macro_f".to_string(), macro_f(preds, gold, n_classes)?);
    Ok(MetricsReport {
        metrics,
        n_examples: gold.len(),
        support,
    })
}

pub fn ranking_report(scores: &[f64], labels: &[bool]) -> Result<MetricsReport> {
    let pos = labels.iter().filter(|&&l| l).count();
    let mut metrics = BTreeMap::new();
    metrics.insert("auc".to_string(), roc_auc(scores, labels)?);
    metrics.insert("ap".to_string(), average_precision(scores, labels)?);
    Ok(MetricsReport {
        metrics,
        n_examples: labels.len(),
        support: vec![labels.len() - pos, pos],
    })
}
