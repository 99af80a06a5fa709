use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Most frequent label; ties go to the smallest class index.
pub fn slide_vote(votes: &[usize]) -> Result<usize> {
    let Some(&max) = votes.iter().max() else {
        bail!(Contract, "slide vote over no bags");
    };
    let mut counts = vec![0usize; max + 1];
    for &v in votes {
        counts[v] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    Ok(counts.iter().position(|&c| c == best).unwrap_or(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub micro_roc: Vec<RocPoint>,
    pub micro_auc: f64,
}

/// ROC curve of binary `(score, positive)` pairs and its trapezoid area.
/// Equal scores form one step.
pub fn roc_curve(pairs: &[(f64, bool)]) -> (Vec<RocPoint>, f64) {
    let pos = pairs.iter().filter(|p| p.1).count() as f64;
    let neg = pairs.len() as f64 - pos;
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: if neg > 0.0 { fp / neg } else { 0.0 },
            tpr: if pos > 0.0 { tp / pos } else { 0.0 },
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    (points, auc)
}

/// Slide-level report. `scores[i]` holds per-class scores of slide `i`
/// (mean bag softmax) and feeds the micro-averaged ROC.
pub fn classification_report(
    predicted: &[usize],
    truth: &[usize],
    scores: &[Vec<f64>],
    classes: usize,
) -> Result<ClassificationReport> {
    if predicted.len() != truth.len() || scores.len() != truth.len() {
        bail!(
            Dimension,
            "{} predictions, {} labels, {} score rows",
            predicted.len(),
            truth.len(),
            scores.len()
        );
    }
    if truth.is_empty() {
        bail!(Input, "classification report over no slides");
    }
    if let Some(&c) = predicted.iter().chain(truth).find(|&&c| c >= classes) {
        bail!(Input, "label {c} outside {classes} classes");
    }
    if let Some(row) = scores.iter().find(|r| r.len() != classes) {
        bail!(Dimension, "score row of {} entries for {classes} classes", row.len());
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let n = truth.len() as f64;
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let support: usize = confusion[c].iter().sum();
            let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
            let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
            let precision = ratio(tp, predicted_c as f64);
            let recall = ratio(tp, support as f64);
            ClassMetrics {
                precision,
                recall,
                f1: ratio(2.0 * tp, (predicted_c + support) as f64),
                support,
            }
        })
        .collect();
    let pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(truth)
        .flat_map(|(row, &t)| row.iter().enumerate().map(move |(c, &s)| (s, c == t)))
        .collect();
    let (micro_roc, micro_auc) = roc_curve(&pairs);
    Ok(ClassificationReport {
        accuracy: correct as f64 / n,
        f1_macro: per_class.iter().map(|m| m.f1).sum::<f64>() / classes as f64,
        f1_weighted: per_class.iter().map(|m| m.f1 * m.support as f64).sum::<f64>() / n,
        per_class,
        confusion,
        micro_roc,
        micro_auc,
    })
}
