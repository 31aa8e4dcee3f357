use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Fraction of counted positions where `pred` equals `gold`; `None` gold
/// entries are not counted.
pub fn accuracy<T: PartialEq>(pred: &[T], gold: &[Option<T>]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::shape(format!("{} predictions for {} gold labels", pred.len(), gold.len())));
    }
    let mut counted = 0usize;
    let mut correct = 0usize;
    for (p, g) in pred.iter().zip(gold) {
        if let Some(g) = g {
            counted += 1;
            correct += usize::from(p == g);
        }
    }
    if counted == 0 {
        return Err(Error::invalid("accuracy over zero counted positions"));
    }
    Ok(correct as f64 / counted as f64)
}

/// Per-class F1 averaged with weights proportional to gold support.
pub fn weighted_f1<T: Ord>(pred: &[T], gold: &[T]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::shape(format!("{} predictions for {} gold labels", pred.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(Error::invalid("weighted F1 of an empty label sequence"));
    }
    // class -> (true positives, predicted, gold)
    let mut counts: BTreeMap<&T, (usize, usize, usize)> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        counts.entry(p).or_default().1 += 1;
        let e = counts.entry(g).or_default();
        e.2 += 1;
        if p == g {
            e.0 += 1;
        }
    }
    let n = gold.len() as f64;
    let mut total = 0.0;
    for &(tp, predicted, support) in counts.values() {
        if support == 0 {
            continue;
        }
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = tp as f64 / support as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        total += support as f64 / n * f1;
    }
    Ok(total)
}

/// Mean and sample (n−1) standard deviation of per-seed scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub mean: f64,
    pub std: f64,
    /// Set when there is one score, so the deviation is undefined and reported as 0.
    pub single_run: bool,
}

pub fn aggregate_runs(scores: &[f64]) -> Result<RunSummary> {
    if scores.is_empty() {
        return Err(Error::invalid("no scores to aggregate"));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    if scores.len() == 1 {
        return Ok(RunSummary { mean, std: 0.0, single_run: true });
    }
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(RunSummary { mean, std: var.sqrt(), single_run: false })
}
