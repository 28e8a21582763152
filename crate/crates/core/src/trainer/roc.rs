//! ROC curve and AUC via the Mann–Whitney rank statistic.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn counts(labels: &[bool]) -> Result<(usize, usize), TrainError> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(TrainError::Evaluation("no positive steps".into()));
    }
    if neg == 0 {
        return Err(TrainError::Evaluation("no negative steps".into()));
    }
    Ok((pos, neg))
}

fn sorted_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    order
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, TrainError> {
    if scores.len() != labels.len() {
        return Err(TrainError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(TrainError::Evaluation("NaN score".into()));
    }
    let (pos, neg) = counts(labels)?;
    let order = sorted_order(scores);
    // Average 1-based ranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Threshold sweep over the distinct scores, from `(0, 0)` to `(1, 1)`.
/// A step is called positive when its score is at least the threshold.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>, TrainError> {
    let (pos, neg) = counts(labels)?;
    let mut order = sorted_order(scores);
    order.reverse();
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under a curve from [`roc_curve`].
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}
