//! Probability vectors over a label space, plus the entropy, divergence and
//! summation helpers shared by the methods, metrics and diagnostics.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Allowed deviation of `Σ probs` from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistributionError {
    #[error("empty probability vector")]
    Empty,
    #[error("component {index} is {value}, expected a finite nonnegative number")]
    InvalidComponent { index: usize, value: f64 },
    #[error("components sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("total mass is zero, cannot renormalize")]
    ZeroMass,
}

/// An `|Y|`-dimensional probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    /// Validates an already-normalized vector.
    pub fn new(probs: Vec<f64>) -> Result<Self, DistributionError> {
        check_components(&probs)?;
        let sum = pairwise_sum(&probs);
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(DistributionError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    /// Renormalizes nonnegative masses to sum to one.
    pub fn from_masses(masses: &[f64]) -> Result<Self, DistributionError> {
        check_components(masses)?;
        let total = pairwise_sum(masses);
        if total <= 0.0 {
            return Err(DistributionError::ZeroMass);
        }
        Ok(Self {
            probs: masses.iter().map(|m| m / total).collect(),
        })
    }

    /// Temperature-1 softmax of real scores.
    pub fn softmax(scores: &[f64]) -> Result<Self, DistributionError> {
        if scores.is_empty() {
            return Err(DistributionError::Empty);
        }
        if let Some((index, &value)) = scores.iter().enumerate().find(|(_, s)| !s.is_finite()) {
            return Err(DistributionError::InvalidComponent { index, value });
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| libm::exp(s - max)).collect();
        Self::from_masses(&exps)
    }

    pub fn uniform(n: usize) -> Result<Self, DistributionError> {
        if n == 0 {
            return Err(DistributionError::Empty);
        }
        Ok(Self {
            probs: alloc::vec![1.0 / n as f64; n],
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest component; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        self.argmax_with_tie().0
    }

    /// Argmax plus whether another component shares the maximum.
    pub fn argmax_with_tie(&self) -> (usize, bool) {
        argmax_lowest(&self.probs)
    }

    /// Largest component (the prediction confidence).
    pub fn confidence(&self) -> f64 {
        self.probs[self.argmax()]
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        entropy(&self.probs)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

impl TryFrom<Vec<f64>> for LabelDistribution {
    type Error = DistributionError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<LabelDistribution> for Vec<f64> {
    fn from(d: LabelDistribution) -> Self {
        d.probs
    }
}

fn check_components(v: &[f64]) -> Result<(), DistributionError> {
    if v.is_empty() {
        return Err(DistributionError::Empty);
    }
    match v
        .iter()
        .enumerate()
        .find(|(_, x)| !x.is_finite() || **x < 0.0)
    {
        Some((index, &value)) => Err(DistributionError::InvalidComponent { index, value }),
        None => Ok(()),
    }
}

/// Argmax over a slice with lowest-index tie-breaking; returns `(index, tied)`.
pub fn argmax_lowest(v: &[f64]) -> (usize, bool) {
    let mut best = 0;
    let mut tied = false;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
            tied = false;
        } else if x == v[best] {
            tied = true;
        }
    }
    (best, tied)
}

/// Shannon entropy in nats; zero components contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    let terms: Vec<f64> = p
        .iter()
        .map(|&x| if x > 0.0 { -x * libm::log(x) } else { 0.0 })
        .collect();
    pairwise_sum(&terms)
}

/// `D_KL(p ‖ q)` in nats over the components where `p > 0`.
///
/// The caller guarantees `q > 0` wherever `p > 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let terms: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| if a > 0.0 { a * libm::log(a / b) } else { 0.0 })
        .collect();
    pairwise_sum(&terms)
}

/// Sum in a fixed pairwise-tree order so partial sums combine bit-stably.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if v.len() <= LEAF {
        let mut acc = 0.0;
        for &x in v {
            acc += x;
        }
        return acc;
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Arithmetic mean via [`pairwise_sum`]; `None` on empty input.
pub fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(pairwise_sum(v) / v.len() as f64)
    }
}

/// Component-wise mean of equally sized vectors.
pub fn mean_vector<'a, I>(rows: I, dim: usize) -> Option<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let rows: Vec<&[f64]> = rows.into_iter().collect();
    if rows.is_empty() {
        return None;
    }
    let mut column = Vec::with_capacity(rows.len());
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim {
        column.clear();
        column.extend(rows.iter().map(|r| r[j]));
        out.push(pairwise_sum(&column) / rows.len() as f64);
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn renormalizes_raw_masses() {
        let d = LabelDistribution::from_masses(&[0.2, 0.1, 0.1]).unwrap();
        assert!((d.probs()[0] - 0.5).abs() < 1e-15);
        assert!((d.probs()[1] - 0.25).abs() < 1e-15);
        assert!((d.probs()[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_vectors() {
        assert_eq!(
            LabelDistribution::new(vec![]),
            Err(DistributionError::Empty)
        );
        assert!(matches!(
            LabelDistribution::new(vec![0.5, 0.6]),
            Err(DistributionError::NotNormalized { .. })
        ));
        assert!(matches!(
            LabelDistribution::new(vec![1.5, -0.5]),
            Err(DistributionError::InvalidComponent { index: 1, .. })
        ));
        assert_eq!(
            LabelDistribution::from_masses(&[0.0, 0.0]),
            Err(DistributionError::ZeroMass)
        );
    }

    #[test]
    fn argmax_ties_go_low() {
        let d = LabelDistribution::new(vec![0.25, 0.375, 0.375]).unwrap();
        assert_eq!(d.argmax_with_tie(), (1, true));
        let d = LabelDistribution::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(d.argmax_with_tie(), (0, true));
        let d = LabelDistribution::new(vec![0.2, 0.8]).unwrap();
        assert_eq!(d.argmax_with_tie(), (1, false));
    }

    #[test]
    fn entropy_of_uniform_is_log_n() {
        let d = LabelDistribution::uniform(3).unwrap();
        assert!((d.entropy() - libm::log(3.0)).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }

    #[test]
    fn kl_hand_value() {
        let v = kl_divergence(&[0.75, 0.25], &[0.5, 0.5]);
        let expected = 0.75 * libm::log(1.5) + 0.25 * libm::log(0.5);
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn softmax_equal_scores_uniform() {
        let d = LabelDistribution::softmax(&[-3.0, -3.0]).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn serde_is_a_plain_array() {
        let d = LabelDistribution::new(vec![0.25, 0.75]).unwrap();
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, "[0.25,0.75]");
        let back: LabelDistribution = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
        assert!(serde_json::from_str::<LabelDistribution>("[0.3,0.3]").is_err());
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_ints() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
    }
}
