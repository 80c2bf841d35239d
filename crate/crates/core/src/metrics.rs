//! Accuracy, true-label probability, macro-F1 and binned ECE over a list of
//! predictions, plus the unweighted cross-dataset average.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::{pairwise_sum, LabelDistribution};

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("no predictions")]
    Empty,
    #[error("truth label {label} outside a {classes}-class distribution")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("predictions mix {0} and {1} classes")]
    ClassCountMismatch(usize, usize),
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("missing datasets: {}", .0.join(", "))]
    MissingDatasets(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: LabelDistribution,
    pub truth: usize,
}

impl Prediction {
    pub fn new(probs: LabelDistribution, truth: usize) -> Self {
        Self { probs, truth }
    }
}

fn check(preds: &[Prediction]) -> Result<usize, MetricError> {
    let first = preds.first().ok_or(MetricError::Empty)?;
    let classes = first.probs.len();
    for p in preds {
        if p.probs.len() != classes {
            return Err(MetricError::ClassCountMismatch(classes, p.probs.len()));
        }
        if p.truth >= classes {
            return Err(MetricError::LabelOutOfRange {
                label: p.truth,
                classes,
            });
        }
    }
    Ok(classes)
}

/// Fraction of argmax hits, with the number of argmax ties (broken to the
/// lowest index).
pub fn accuracy(preds: &[Prediction]) -> Result<(f64, usize), MetricError> {
    check(preds)?;
    let mut hits = 0usize;
    let mut ties = 0usize;
    for p in preds {
        let (arg, tie) = p.probs.argmax_with_tie();
        hits += usize::from(arg == p.truth);
        ties += usize::from(tie);
    }
    Ok((hits as f64 / preds.len() as f64, ties))
}

pub fn tlp(preds: &[Prediction]) -> Result<f64, MetricError> {
    check(preds)?;
    let mass: Vec<f64> = preds.iter().map(|p| p.probs.probs()[p.truth]).collect();
    Ok(pairwise_sum(&mass) / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

impl ConfusionCounts {
    pub fn from_predictions(preds: &[Prediction]) -> Result<Self, MetricError> {
        let classes = check(preds)?;
        let mut c = Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        };
        for p in preds {
            let y = p.probs.argmax();
            if y == p.truth {
                c.tp[y] += 1;
            } else {
                c.fp[y] += 1;
                c.fn_[p.truth] += 1;
            }
        }
        Ok(c)
    }
}

/// Macro-F1 over every class of the label space, and the classes whose
/// F1 was undefined (counted as 0).
pub fn macro_f1(preds: &[Prediction]) -> Result<(f64, Vec<usize>), MetricError> {
    let c = ConfusionCounts::from_predictions(preds)?;
    let mut undefined = Vec::new();
    let f1s: Vec<f64> = (0..c.tp.len())
        .map(|j| {
            let tp = c.tp[j] as f64;
            let precision = if c.tp[j] + c.fp[j] == 0 {
                0.0
            } else {
                tp / (c.tp[j] + c.fp[j]) as f64
            };
            let recall = if c.tp[j] + c.fn_[j] == 0 {
                0.0
            } else {
                tp / (c.tp[j] + c.fn_[j]) as f64
            };
            if precision + recall == 0.0 {
                undefined.push(j);
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    Ok((pairwise_sum(&f1s) / f1s.len() as f64, undefined))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Bin of a confidence under `[(b−1)/B, b/B)` bins with the top one closed.
/// The arithmetic guess is corrected against the boundary comparisons.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    let edge = |b: usize| b as f64 / bins as f64;
    let mut b = ((confidence * bins as f64) as usize).min(bins - 1);
    while b > 0 && confidence < edge(b) {
        b -= 1;
    }
    while b + 1 < bins && confidence >= edge(b + 1) {
        b += 1;
    }
    b
}

pub fn ece_bins(preds: &[Prediction], bins: usize) -> Result<Vec<BinSummary>, MetricError> {
    check(preds)?;
    if bins == 0 {
        return Err(MetricError::ZeroBins);
    }
    let mut conf: Vec<Vec<f64>> = vec![Vec::new(); bins];
    let mut hit: Vec<Vec<f64>> = vec![Vec::new(); bins];
    for p in preds {
        let c = p.probs.confidence();
        let b = bin_index(c, bins);
        conf[b].push(c);
        hit[b].push(if p.probs.argmax() == p.truth {
            1.0
        } else {
            0.0
        });
    }
    Ok(conf
        .iter()
        .zip(&hit)
        .map(|(c, h)| {
            let n = c.len();
            if n == 0 {
                BinSummary {
                    count: 0,
                    mean_confidence: 0.0,
                    accuracy: 0.0,
                }
            } else {
                BinSummary {
                    count: n,
                    mean_confidence: pairwise_sum(c) / n as f64,
                    accuracy: pairwise_sum(h) / n as f64,
                }
            }
        })
        .collect())
}

fn ece_from_bins(bins: &[BinSummary], n: usize) -> f64 {
    let terms: Vec<f64> = bins
        .iter()
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.mean_confidence).abs())
        .collect();
    pairwise_sum(&terms)
}

pub fn ece1(preds: &[Prediction], bins: usize) -> Result<f64, MetricError> {
    Ok(ece_from_bins(&ece_bins(preds, bins)?, preds.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub accuracy: f64,
    pub tlp: f64,
    pub macro_f1: f64,
    pub ece1: f64,
    #[serde(default)]
    pub bins: Vec<BinSummary>,
    #[serde(default)]
    pub argmax_ties: usize,
    #[serde(default)]
    pub undefined_f1_classes: Vec<usize>,
}

impl MetricReport {
    pub fn compute(preds: &[Prediction], bins: usize) -> Result<Self, MetricError> {
        let (accuracy, argmax_ties) = accuracy(preds)?;
        let (macro_f1, undefined_f1_classes) = macro_f1(preds)?;
        let bin_summaries = ece_bins(preds, bins)?;
        Ok(Self {
            n: preds.len(),
            accuracy,
            tlp: tlp(preds)?,
            macro_f1,
            ece1: ece_from_bins(&bin_summaries, preds.len()),
            bins: bin_summaries,
            argmax_ties,
            undefined_f1_classes,
        })
    }
}

/// Unweighted mean of each metric over the `expected` datasets. Bins are not
/// averaged; `n` and tie counts are summed.
pub fn average_over_datasets(
    reports: &BTreeMap<String, MetricReport>,
    expected: &[&str],
) -> Result<MetricReport, MetricError> {
    let missing: Vec<String> = expected
        .iter()
        .filter(|d| !reports.contains_key(**d))
        .map(|d| String::from(*d))
        .collect();
    if !missing.is_empty() {
        return Err(MetricError::MissingDatasets(missing));
    }
    let rows: Vec<&MetricReport> = if expected.is_empty() {
        reports.values().collect()
    } else {
        expected.iter().map(|d| &reports[*d]).collect()
    };
    if rows.is_empty() {
        return Err(MetricError::Empty);
    }
    let avg = |f: fn(&MetricReport) -> f64| {
        let v: Vec<f64> = rows.iter().map(|r| f(r)).collect();
        pairwise_sum(&v) / v.len() as f64
    };
    Ok(MetricReport {
        n: rows.iter().map(|r| r.n).sum(),
        accuracy: avg(|r| r.accuracy),
        tlp: avg(|r| r.tlp),
        macro_f1: avg(|r| r.macro_f1),
        ece1: avg(|r| r.ece1),
        bins: Vec::new(),
        argmax_ties: rows.iter().map(|r| r.argmax_ties).sum(),
        undefined_f1_classes: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: &[f64], truth: usize) -> Prediction {
        Prediction::new(LabelDistribution::new(v.to_vec()).unwrap(), truth)
    }

    #[test]
    fn accuracy_hand_cases() {
        let preds = [
            p(&[0.9, 0.1], 0),
            p(&[0.2, 0.8], 1),
            p(&[0.6, 0.4], 0),
            p(&[0.7, 0.3], 1),
        ];
        assert_eq!(accuracy(&preds).unwrap(), (0.75, 0));
        assert_eq!(accuracy(&[p(&[0.5, 0.5], 0)]).unwrap(), (1.0, 1));
        assert_eq!(accuracy(&[]), Err(MetricError::Empty));
        assert!(matches!(
            accuracy(&[p(&[1.0], 1)]),
            Err(MetricError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn tlp_hand_cases() {
        assert!((tlp(&[p(&[0.7, 0.3], 0)]).unwrap() - 0.7).abs() < 1e-15);
        let u = [p(&[0.25; 4], 0), p(&[0.25; 4], 3)];
        assert!((tlp(&u).unwrap() - 0.25).abs() < 1e-15);
        let three = [p(&[0.7, 0.3], 0), p(&[0.4, 0.6], 0), p(&[0.1, 0.9], 1)];
        assert!((tlp(&three).unwrap() - (0.7 + 0.4 + 0.9) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_hand_case() {
        let preds = [
            p(&[0.9, 0.1], 0),
            p(&[0.9, 0.1], 0),
            p(&[0.9, 0.1], 1),
            p(&[0.9, 0.1], 1),
        ];
        let (f, undefined) = macro_f1(&preds).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(undefined, vec![1]);
    }

    #[test]
    fn ece_extremes_and_boundaries() {
        assert_eq!(ece1(&[p(&[1.0, 0.0], 0)], 10).unwrap(), 0.0);
        assert_eq!(ece1(&[p(&[1.0, 0.0], 1)], 10).unwrap(), 1.0);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.3, 10), 3);
        assert_eq!(bin_index(0.7, 10), 7);
        assert_eq!(bin_index(0.5, 2), 1);
        for b in 0..10 {
            let edge = b as f64 / 10.0;
            assert_eq!(bin_index(edge, 10), b);
        }
    }

    #[test]
    fn ece_two_bin_hand_case() {
        // Bin 6: conf 0.6 (right), 0.65 (wrong); bin 9: conf 0.9, 1.0 (both right).
        let preds = [
            p(&[0.6, 0.4], 0),
            p(&[0.65, 0.35], 1),
            p(&[0.1, 0.9], 1),
            p(&[1.0, 0.0], 0),
        ];
        let expected = 0.5 * (0.5f64 - 0.625).abs() + 0.5 * (1.0f64 - 0.95).abs();
        assert!((ece1(&preds, 10).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn average_lists_missing() {
        let r = MetricReport::compute(&[p(&[0.6, 0.4], 0)], 10).unwrap();
        let mut m = BTreeMap::new();
        m.insert(String::from("sst2"), r.clone());
        let mut r2 = r.clone();
        r2.accuracy = 0.0;
        m.insert(String::from("mr"), r2);
        let avg = average_over_datasets(&m, &["sst2", "mr"]).unwrap();
        assert_eq!(avg.accuracy, 0.5);
        assert_eq!(
            average_over_datasets(&m, &["sst2", "fp", "trec"]),
            Err(MetricError::MissingDatasets(vec![
                "fp".into(),
                "trec".into()
            ]))
        );
    }
}
