//! Cross-model analyses: log-linear scaling fits and Spearman rank
//! correlation between metrics.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::ols;
use crate::distribution::pairwise_sum;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("parameter counts must be positive")]
    NonPositiveScale,
    #[error("all parameter counts are equal")]
    ConstantScale,
    #[error("metric columns have unequal lengths")]
    RaggedColumns,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    /// Pearson r; `None` when the metric is constant.
    pub r: Option<f64>,
}

/// OLS of metric on log10(parameter count).
pub fn scaling_fit(points: &[(f64, f64)]) -> Result<ScalingFit, AnalysisError> {
    if points.len() < 3 {
        return Err(AnalysisError::TooFewPoints {
            need: 3,
            got: points.len(),
        });
    }
    if points.iter().any(|p| p.0.is_nan() || p.0 <= 0.0) {
        return Err(AnalysisError::NonPositiveScale);
    }
    let x: Vec<f64> = points.iter().map(|p| libm::log10(p.0)).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    if x.iter().all(|v| *v == x[0]) {
        return Err(AnalysisError::ConstantScale);
    }
    let (slope, intercept) = ols(&x, &y);
    Ok(ScalingFit {
        slope,
        intercept,
        r: pearson(&x, &y),
    })
}

/// Pearson correlation; `None` if either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = pairwise_sum(x) / n;
    let my = pairwise_sum(y) / n;
    let sxy: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let sxx: Vec<f64> = x.iter().map(|a| (a - mx) * (a - mx)).collect();
    let syy: Vec<f64> = y.iter().map(|b| (b - my) * (b - my)).collect();
    let (sxx, syy) = (pairwise_sum(&sxx), pairwise_sum(&syy));
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((pairwise_sum(&sxy) / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Pairwise Spearman correlation between metric columns, each holding one
/// value per model. Entries involving a constant column are `None`.
pub fn spearman_matrix(columns: &[Vec<f64>]) -> Result<Vec<Vec<Option<f64>>>, AnalysisError> {
    let n = columns.first().map_or(0, Vec::len);
    if columns.iter().any(|c| c.len() != n) {
        return Err(AnalysisError::RaggedColumns);
    }
    if n < 3 {
        return Err(AnalysisError::TooFewPoints { need: 3, got: n });
    }
    Ok(columns
        .iter()
        .map(|a| columns.iter().map(|b| spearman(a, b)).collect())
        .collect())
}
