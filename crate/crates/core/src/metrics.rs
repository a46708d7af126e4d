//! Trial-level detection metrics: ROC AUC and equal error rate.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub id: String,
    pub score: f64,
    pub label: Label,
}

impl Trial {
    pub fn new(id: impl Into<String>, score: f64, label: Label) -> Self {
        Self {
            id: id.into(),
            score,
            label,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("need at least one positive and one negative trial (got {positives} positive, {negatives} negative)")]
    DegenerateTrialSet { positives: usize, negatives: usize },
    #[error("trial {0:?} has a NaN score")]
    NanScore(String),
}

fn split(trials: &[Trial]) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    if let Some(t) = trials.iter().find(|t| t.score.is_nan()) {
        return Err(MetricsError::NanScore(t.id.clone()));
    }
    let pos: Vec<f64> = trials.iter().filter(|t| t.label == Label::Positive).map(|t| t.score).collect();
    let neg: Vec<f64> = trials.iter().filter(|t| t.label == Label::Negative).map(|t| t.score).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricsError::DegenerateTrialSet {
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    Ok((pos, neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks in `O(n log n)`.
pub fn roc_auc(trials: &[Trial]) -> Result<f64, MetricsError> {
    let (pos, neg) = split(trials)?;
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));

    // sum of 1-based average ranks of the positives, kept doubled to stay integral
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_x2 = (i + 1 + j) as u128;
        let n_pos = all[i..j].iter().filter(|x| x.1).count() as u128;
        rank_sum_x2 += avg_x2 * n_pos;
        i = j;
    }
    let (p, n) = (pos.len() as u128, neg.len() as u128);
    // U = R - p(p+1)/2, doubled
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2 * p * n) as f64)
}

/// One ROC operating point: accept every trial scoring at or above `threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points from the strictest (`+inf`, nothing accepted) to the
/// loosest (lowest score, everything accepted). Tied scores share a point.
pub fn roc_points(trials: &[Trial]) -> Result<Vec<RocPoint>, MetricsError> {
    let (pos, neg) = split(trials)?;
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let (p, n) = (pos.len() as f64, neg.len() as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            far: fp as f64 / n,
            frr: (pos.len() - tp) as f64 / p,
        });
    }
    Ok(points)
}

/// Equal error rate from ROC points, linearly interpolated between the two
/// points straddling `FAR = FRR`. Returns `(eer, threshold)`.
pub fn eer_from_points(points: &[RocPoint]) -> (f64, f64) {
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.frr - a.far;
        let db = b.frr - b.far;
        if da == 0.0 {
            return (a.far, a.threshold);
        }
        if db == 0.0 {
            return (b.far, b.threshold);
        }
        if db < 0.0 {
            let frac = da / (da - db);
            let eer = a.far + frac * (b.far - a.far);
            let threshold = if a.threshold.is_finite() {
                a.threshold + frac * (b.threshold - a.threshold)
            } else {
                b.threshold
            };
            return (eer, threshold);
        }
    }
    // the last point always has FRR = 0 <= FAR, so the loop returns
    let last = points[points.len() - 1];
    (last.far, last.threshold)
}

/// Equal error rate and the threshold where it is reached.
pub fn eer(trials: &[Trial]) -> Result<(f64, f64), MetricsError> {
    Ok(eer_from_points(&roc_points(trials)?))
}
