//! Macro F1 and mean average precision.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassF1 {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    /// Counts for every class index in `0..C`.
    pub counts: Vec<ClassCounts>,
    /// Classes present in the ground truth only.
    pub per_class: Vec<ClassF1>,
    pub macro_f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Macro F1 over the classes that occur in `truth`.
pub fn f1_score(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<F1Report> {
    if pred.is_empty() {
        return Err(invalid!("F1 of an empty prediction set"));
    }
    if pred.len() != truth.len() {
        return Err(invalid!("{} predictions for {} labels", pred.len(), truth.len()));
    }
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= num_classes) {
        return Err(invalid!("class {c} outside [0, {num_classes})"));
    }
    let mut counts = vec![ClassCounts::default(); num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            counts[p].tp += 1;
        } else {
            counts[p].fp += 1;
            counts[t].fn_ += 1;
        }
    }
    let per_class: Vec<ClassF1> = counts
        .iter()
        .enumerate()
        .filter(|(_, k)| k.tp + k.fn_ > 0)
        .map(|(class, k)| {
            let precision = ratio(k.tp, k.tp + k.fp);
            let recall = ratio(k.tp, k.tp + k.fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassF1 {
                class,
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64;
    Ok(F1Report {
        counts,
        per_class,
        macro_f1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub per_class: Vec<ClassAp>,
    #[serde(rename = "mAP")]
    pub map: f64,
}

/// Average precision of one ranking: mean precision at each positive when
/// sorted by descending score, ties kept in input order. `None` when there
/// are no positives.
pub fn average_precision(scores: &[f32], truth: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// mAP over points `scores[i][c]` with binary `truth[i][c]`; classes
/// without positives are left out of the mean.
pub fn mean_ap(scores: &[Vec<f32>], truth: &[Vec<bool>]) -> Result<ApReport> {
    if scores.len() != truth.len() {
        return Err(invalid!("{} score rows for {} truth rows", scores.len(), truth.len()));
    }
    let classes = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != classes) || truth.iter().any(|r| r.len() != classes) {
        return Err(invalid!("ragged score or truth rows"));
    }
    let mut per_class = Vec::new();
    for c in 0..classes {
        let s: Vec<f32> = scores.iter().map(|r| r[c]).collect();
        let t: Vec<bool> = truth.iter().map(|r| r[c]).collect();
        if let Some(ap) = average_precision(&s, &t) {
            per_class.push(ClassAp { class: c, ap });
        }
    }
    if per_class.is_empty() {
        return Err(invalid!("no positive labels anywhere; mAP undefined"));
    }
    let map = per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64;
    Ok(ApReport { per_class, map })
}
