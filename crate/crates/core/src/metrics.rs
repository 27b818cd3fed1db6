//! Exact AUROC and thresholded accuracy.
//!
//! AUROC is the Mann-Whitney statistic: the fraction of (positive, negative)
//! pairs ordered correctly, ties counting one half. It is computed from
//! mid-rank sums after a single sort.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("empty input")]
    Empty,
    #[error("label {0} at index {1} is not 0 or 1")]
    BadLabel(u8, usize),
    #[error("score at index {0} is not finite")]
    NonFinite(usize),
    #[error("AUROC needs both classes ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
}

/// Parallel score and binary label vectors.
#[derive(Debug, Clone, Copy)]
pub struct ScoredLabels<'a> {
    scores: &'a [f64],
    labels: &'a [u8],
}

impl<'a> ScoredLabels<'a> {
    pub fn new(scores: &'a [f64], labels: &'a [u8]) -> Result<Self, MetricError> {
        if scores.len() != labels.len() {
            return Err(MetricError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if scores.is_empty() {
            return Err(MetricError::Empty);
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(MetricError::BadLabel(labels[i], i));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(MetricError::NonFinite(i));
        }
        Ok(ScoredLabels { scores, labels })
    }

    pub fn scores(&self) -> &'a [f64] {
        self.scores
    }

    pub fn labels(&self) -> &'a [u8] {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Area under the ROC curve in O(n log n).
pub fn auroc(s: &ScoredLabels<'_>) -> Result<f64, MetricError> {
    let n_pos = s.labels.iter().filter(|&&l| l == 1).count();
    let n_neg = s.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass {
            positives: n_pos,
            negatives: n_neg,
        });
    }

    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_unstable_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));

    // Ranks are 1-based; a tie block spanning ranks lo..=hi gets (lo+hi)/2.
    // Everything stays a multiple of 0.5, which f64 holds exactly here.
    let mut pos_rank_sum = 0.0f64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && s.scores[order[end]] == s.scores[order[start]] {
            end += 1;
        }
        let mid_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_block = order[start..end]
            .iter()
            .filter(|&&i| s.labels[i] == 1)
            .count();
        pos_rank_sum += mid_rank * pos_in_block as f64;
        start = end;
    }

    let n_pos_f = n_pos as f64;
    let u = pos_rank_sum - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Ok(u / (n_pos_f * n_neg as f64))
}

/// Convenience wrapper over raw slices.
pub fn auroc_of(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    auroc(&ScoredLabels::new(scores, labels)?)
}

/// Fraction of rows where `score >= threshold` agrees with the label.
pub fn accuracy(s: &ScoredLabels<'_>, threshold: f64) -> f64 {
    let hits = s
        .scores
        .iter()
        .zip(s.labels)
        .filter(|(&score, &label)| (score >= threshold) == (label == 1))
        .count();
    hits as f64 / s.len() as f64
}
