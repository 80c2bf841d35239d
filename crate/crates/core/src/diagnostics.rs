//! Bias and robustness diagnostics: entropy-based pseudo-query bias,
//! empirical KL bias, majority-rate consistency, and the label-noise slope.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SampleRecord;
use crate::distribution::{mean_vector, pairwise_sum, LabelDistribution};
use crate::rng::StreamRng;
use crate::templating::PseudoQueryKind;

/// Runs per query required for template consistency (one per L9 row).
pub const TEMPLATE_RUNS: usize = 9;
/// Runs per query required for sampling consistency (seed tags 0..8).
pub const SAMPLING_RUNS: usize = 8;
/// Noise rates of the label-noise sweep.
pub const NOISE_RATES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Mass the mean output may put on a class absent from the test split.
pub const ABSENT_CLASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticError {
    #[error("no outputs")]
    Empty,
    #[error("outputs mix {0} and {1} classes")]
    ClassCountMismatch(usize, usize),
    #[error("test split holds a single class; empirical bias is undefined")]
    DegenerateSplit,
    #[error("mean output puts {mass} on class {class}, which never occurs in the test split")]
    AbsentClassMass { class: usize, mass: f64 },
    #[error("truth label {0} out of range")]
    LabelOutOfRange(usize),
    #[error("query {query} has {got} runs, need {need}")]
    TooFewRuns {
        query: usize,
        got: usize,
        need: usize,
    },
    #[error("need at least 2 distinct noise rates, got {0}")]
    TooFewRates(usize),
    #[error("calibration split has no words")]
    EmptyVocabulary,
}

/// Word multiset of the calibration split; sampling a uniform position
/// reproduces the split's word frequencies.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DomainVocabulary {
    words: Vec<String>,
}

impl DomainVocabulary {
    pub fn from_records(records: &[SampleRecord]) -> Self {
        Self {
            words: records
                .iter()
                .flat_map(|r| r.text.split_whitespace().map(String::from))
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }
}

/// `len` words drawn i.i.d. from the vocabulary, joined by single spaces.
/// Empty when the vocabulary is.
pub fn domain_pseudo_text(vocab: &DomainVocabulary, len: usize, seed: u64) -> String {
    if vocab.is_empty() {
        return String::new();
    }
    let mut rng = StreamRng::keyed("domain-query", &[seed]);
    let mut out = String::new();
    for i in 0..len {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&vocab.words[rng.below(vocab.words.len())]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoQuery {
    pub kind: PseudoQueryKind,
    pub text: String,
    pub source_seed: u64,
}

/// `count` pseudo queries of one kind; query `i` uses seed `seed ^ i`.
pub fn pseudo_queries(
    kind: PseudoQueryKind,
    count: usize,
    vocab: &DomainVocabulary,
    len: usize,
    seed: u64,
) -> Result<Vec<PseudoQuery>, DiagnosticError> {
    if kind == PseudoQueryKind::DomainSampled && vocab.is_empty() {
        return Err(DiagnosticError::EmptyVocabulary);
    }
    Ok((0..count as u64)
        .map(|i| {
            let source_seed = seed ^ i;
            let text = match kind {
                PseudoQueryKind::DomainSampled => domain_pseudo_text(vocab, len, source_seed),
                _ => String::new(),
            };
            PseudoQuery {
                kind,
                text,
                source_seed,
            }
        })
        .collect())
}

fn class_count(outputs: &[LabelDistribution]) -> Result<usize, DiagnosticError> {
    let n = outputs.first().ok_or(DiagnosticError::Empty)?.len();
    if let Some(bad) = outputs.iter().find(|d| d.len() != n) {
        return Err(DiagnosticError::ClassCountMismatch(n, bad.len()));
    }
    Ok(n)
}

/// Negative mean entropy (nats) of pseudo-query outputs. Shared by the
/// contextual (empty query) and domain (sampled query) variants.
pub fn entropy_bias(outputs: &[LabelDistribution]) -> Result<f64, DiagnosticError> {
    class_count(outputs)?;
    let h: Vec<f64> = outputs.iter().map(LabelDistribution::entropy).collect();
    Ok(-(pairwise_sum(&h) / h.len() as f64))
}

/// KL(mean output ‖ true label frequency) in nats.
pub fn empirical_bias(
    outputs: &[LabelDistribution],
    truths: &[usize],
) -> Result<f64, DiagnosticError> {
    let classes = class_count(outputs)?;
    if truths.len() != outputs.len() {
        return Err(DiagnosticError::ClassCountMismatch(
            outputs.len(),
            truths.len(),
        ));
    }
    let mut freq = vec![0.0; classes];
    for &t in truths {
        *freq.get_mut(t).ok_or(DiagnosticError::LabelOutOfRange(t))? += 1.0;
    }
    if freq.iter().filter(|&&c| c > 0.0).count() < 2 {
        return Err(DiagnosticError::DegenerateSplit);
    }
    for f in &mut freq {
        *f /= truths.len() as f64;
    }
    let mean = mean_vector(outputs.iter().map(|d| d.probs()), classes).expect("nonempty");
    let mut terms = Vec::with_capacity(classes);
    for (j, (&p, &q)) in mean.iter().zip(&freq).enumerate() {
        if q == 0.0 {
            if p > ABSENT_CLASS_TOLERANCE {
                return Err(DiagnosticError::AbsentClassMass { class: j, mass: p });
            }
            continue;
        }
        if p > 0.0 {
            terms.push(p * libm::log(p / q));
        }
    }
    Ok(pairwise_sum(&terms).max(0.0))
}

/// Share of runs agreeing with the modal label.
pub fn majority_rate(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    let mut best = 0;
    let mut run = 0;
    for (i, l) in sorted.iter().enumerate() {
        run = if i > 0 && sorted[i - 1] == *l {
            run + 1
        } else {
            1
        };
        best = best.max(run);
    }
    best as f64 / labels.len() as f64
}

/// Mean per-query majority rate. `runs[q]` holds query `q`'s predicted
/// labels across runs; every query needs at least `need` runs, and exactly
/// the first `need` are used.
pub fn consistency(runs: &[Vec<usize>], need: usize) -> Result<f64, DiagnosticError> {
    if runs.is_empty() {
        return Err(DiagnosticError::Empty);
    }
    let mut rates = Vec::with_capacity(runs.len());
    for (query, r) in runs.iter().enumerate() {
        if r.len() < need {
            return Err(DiagnosticError::TooFewRuns {
                query,
                got: r.len(),
                need,
            });
        }
        rates.push(majority_rate(&r[..need]));
    }
    Ok(pairwise_sum(&rates) / rates.len() as f64)
}

pub fn template_consistency(runs: &[Vec<usize>]) -> Result<f64, DiagnosticError> {
    consistency(runs, TEMPLATE_RUNS)
}

pub fn sampling_consistency(runs: &[Vec<usize>]) -> Result<f64, DiagnosticError> {
    consistency(runs, SAMPLING_RUNS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub p: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlerFit {
    /// OLS slope of accuracy on noise rate.
    pub beta: f64,
    pub intercept: f64,
    /// `−beta`: positive when noise hurts.
    pub gler: f64,
    /// `gler / 0.1`, the per-tenth display convention.
    pub gler_per_tenth: f64,
}

/// Ordinary least squares of accuracy on `p`.
pub fn gler(points: &[NoisePoint]) -> Result<GlerFit, DiagnosticError> {
    let mut distinct: Vec<f64> = points.iter().map(|pt| pt.p).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(DiagnosticError::TooFewRates(distinct.len()));
    }
    let (beta, intercept) = ols(
        &points.iter().map(|pt| pt.p).collect::<Vec<_>>(),
        &points.iter().map(|pt| pt.accuracy).collect::<Vec<_>>(),
    );
    let gler = if beta == 0.0 { 0.0 } else { -beta };
    Ok(GlerFit {
        beta,
        intercept,
        gler,
        gler_per_tenth: gler / 0.1,
    })
}

/// Slope and intercept of `y` on `x`; the caller ensures `x` is not constant.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = pairwise_sum(x) / n;
    let my = pairwise_sum(y) / n;
    let sxy: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let sxx: Vec<f64> = x.iter().map(|a| (a - mx) * (a - mx)).collect();
    let beta = pairwise_sum(&sxy) / pairwise_sum(&sxx);
    (beta, my - beta * mx)
}

/// Diagnostic values of one dataset; absent entries were not computed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub contextual_bias: Option<f64>,
    pub domain_bias: Option<f64>,
    pub empirical_bias: Option<f64>,
    pub template_consistency: Option<f64>,
    pub sampling_consistency: Option<f64>,
    pub gler: Option<GlerFit>,
    #[serde(default)]
    pub accuracy_by_p: Vec<NoisePoint>,
    /// Domain pseudo queries are sampled as whitespace words, not model tokens.
    #[serde(default)]
    pub word_level_domain_sampling: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(v: &[f64]) -> LabelDistribution {
        LabelDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn entropy_bias_cases() {
        let u = vec![d(&[1.0 / 3.0; 3]); 4];
        assert!((entropy_bias(&u).unwrap() + libm::log(3.0)).abs() < 1e-12);
        assert_eq!(entropy_bias(&[d(&[1.0, 0.0])]).unwrap(), 0.0);
        let mixed = [d(&[1.0, 0.0]), d(&[0.5, 0.5])];
        assert!((entropy_bias(&mixed).unwrap() + libm::log(2.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn empirical_bias_cases() {
        let outs = [d(&[0.75, 0.25]), d(&[0.75, 0.25])];
        let kl = empirical_bias(&outs, &[0, 1]).unwrap();
        let hand = 0.75 * libm::log(1.5) + 0.25 * libm::log(0.5);
        assert!((kl - hand).abs() < 1e-12);
        let matched = [d(&[0.9, 0.1]), d(&[0.1, 0.9])];
        assert!(empirical_bias(&matched, &[0, 1]).unwrap().abs() < 1e-12);
        assert_eq!(
            empirical_bias(&outs, &[0, 0]),
            Err(DiagnosticError::DegenerateSplit)
        );
        let three = [d(&[0.5, 0.3, 0.2]), d(&[0.5, 0.3, 0.2])];
        assert!(matches!(
            empirical_bias(&three, &[0, 1]),
            Err(DiagnosticError::AbsentClassMass { class: 2, .. })
        ));
    }

    #[test]
    fn majority_rate_cases() {
        let six_of_nine = [1, 1, 1, 1, 1, 1, 0, 0, 0];
        assert!((majority_rate(&six_of_nine) - 6.0 / 9.0).abs() < 1e-15);
        assert_eq!(majority_rate(&[0, 0, 0, 1, 1, 1, 2, 2, 2]), 3.0 / 9.0);
        assert_eq!(majority_rate(&[0, 0, 0, 0, 1, 1, 1, 1]), 0.5);
        assert_eq!(majority_rate(&[2, 2, 2, 2, 2, 0, 0, 1]), 0.625);
        assert_eq!(
            template_consistency(&[vec![0; 8]]),
            Err(DiagnosticError::TooFewRuns {
                query: 0,
                got: 8,
                need: 9
            })
        );
        assert_eq!(
            sampling_consistency(&[vec![1; 8], vec![0, 0, 0, 0, 1, 1, 1, 1]]).unwrap(),
            0.75
        );
    }

    #[test]
    fn gler_cases() {
        let exact: Vec<NoisePoint> = NOISE_RATES
            .iter()
            .map(|&p| NoisePoint {
                p,
                accuracy: 0.9 - 0.4 * p,
            })
            .collect();
        let fit = gler(&exact).unwrap();
        assert!((fit.beta + 0.4).abs() < 1e-12);
        assert!((fit.gler - 0.4).abs() < 1e-12);
        assert!((fit.gler_per_tenth - 4.0).abs() < 1e-10);
        let flat: Vec<NoisePoint> = NOISE_RATES
            .iter()
            .map(|&p| NoisePoint { p, accuracy: 0.6 })
            .collect();
        assert_eq!(gler(&flat).unwrap().gler, 0.0);
        assert_eq!(
            gler(&[NoisePoint {
                p: 0.5,
                accuracy: 1.0
            }]),
            Err(DiagnosticError::TooFewRates(1))
        );
    }

    #[test]
    fn domain_text_has_exact_length_and_vocab_words() {
        let recs = [SampleRecord {
            id: 0,
            text: "alpha beta beta".into(),
            label: 0,
        }];
        let v = DomainVocabulary::from_records(&recs);
        let t = domain_pseudo_text(&v, 64, 7);
        assert_eq!(t.split_whitespace().count(), 64);
        assert!(t.split_whitespace().all(|w| w == "alpha" || w == "beta"));
        assert_eq!(t, domain_pseudo_text(&v, 64, 7));
        let empty = DomainVocabulary::default();
        assert_eq!(
            pseudo_queries(PseudoQueryKind::DomainSampled, 3, &empty, 64, 0),
            Err(DiagnosticError::EmptyVocabulary)
        );
        let e = pseudo_queries(PseudoQueryKind::Empty, 3, &empty, 64, 0).unwrap();
        assert!(e.iter().all(|q| q.text.is_empty()));
    }
}
