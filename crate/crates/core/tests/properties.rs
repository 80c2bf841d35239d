use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use staicc_core::corpus::{
    assign_one, flip_count, make_noise_spec, trisect, AssignmentStream, DemonstrationAssignment,
    SampleRecord, SplitSizes,
};
use staicc_core::diagnostics::{
    consistency, empirical_bias, entropy_bias, gler, majority_rate, NoisePoint, NOISE_RATES,
};
use staicc_core::distribution::LabelDistribution;
use staicc_core::methods::{
    batch_calibrate, calibrate_with_prior, centroid_classify, CentroidSpace, ClassCentroids,
};
use staicc_core::metrics::{accuracy, ece1, macro_f1, tlp, MetricReport, Prediction};

fn distribution(classes: usize) -> impl Strategy<Value = LabelDistribution> {
    prop::collection::vec(0.001f64..1.0, classes)
        .prop_map(|m| LabelDistribution::from_masses(&m).unwrap())
}

fn predictions() -> impl Strategy<Value = Vec<Prediction>> {
    (2usize..=4).prop_flat_map(|c| {
        prop::collection::vec((distribution(c), 0..c), 1..=6)
            .prop_map(|v| v.into_iter().map(|(d, t)| Prediction::new(d, t)).collect())
    })
}

// Straightforward re-derivations used as oracles.
fn naive_argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..p.len() {
        if p[j] > p[best] {
            best = j;
        }
    }
    best
}

fn naive_acc(preds: &[Prediction]) -> f64 {
    let hits = preds
        .iter()
        .filter(|p| naive_argmax(p.probs.probs()) == p.truth)
        .count();
    hits as f64 / preds.len() as f64
}

fn naive_tlp(preds: &[Prediction]) -> f64 {
    preds.iter().map(|p| p.probs.probs()[p.truth]).sum::<f64>() / preds.len() as f64
}

fn naive_f1(preds: &[Prediction]) -> f64 {
    let c = preds[0].probs.len();
    let mut total = 0.0;
    for j in 0..c {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for p in preds {
            let y = naive_argmax(p.probs.probs());
            if y == j && p.truth == j {
                tp += 1.0;
            } else if y == j {
                fp += 1.0;
            } else if p.truth == j {
                fn_ += 1.0;
            }
        }
        let pr = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rc = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if pr + rc > 0.0 {
            total += 2.0 * pr * rc / (pr + rc);
        }
    }
    total / c as f64
}

fn naive_ece(preds: &[Prediction], bins: usize) -> f64 {
    let n = preds.len() as f64;
    let mut total = 0.0;
    for b in 1..=bins {
        let lo = (b - 1) as f64 / bins as f64;
        let hi = b as f64 / bins as f64;
        let members: Vec<&Prediction> = preds
            .iter()
            .filter(|p| {
                let c = p.probs.probs().iter().cloned().fold(f64::MIN, f64::max);
                c >= lo && (c < hi || (b == bins && c <= 1.0))
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members
            .iter()
            .filter(|p| naive_argmax(p.probs.probs()) == p.truth)
            .count() as f64
            / m;
        let conf = members
            .iter()
            .map(|p| p.probs.probs().iter().cloned().fold(f64::MIN, f64::max))
            .sum::<f64>()
            / m;
        total += m / n * (acc - conf).abs();
    }
    total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_naive_oracles(preds in predictions(), bins in 1usize..=12) {
        prop_assert!((accuracy(&preds).unwrap().0 - naive_acc(&preds)).abs() <= 1e-12);
        prop_assert!((tlp(&preds).unwrap() - naive_tlp(&preds)).abs() <= 1e-12);
        prop_assert!((macro_f1(&preds).unwrap().0 - naive_f1(&preds)).abs() <= 1e-12);
        prop_assert!((ece1(&preds, bins).unwrap() - naive_ece(&preds, bins)).abs() <= 1e-12);
    }

    #[test]
    fn metrics_in_unit_interval(preds in predictions()) {
        let r = MetricReport::compute(&preds, 10).unwrap();
        for v in [r.accuracy, r.tlp, r.macro_f1, r.ece1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), preds.len());
    }

    #[test]
    fn single_bin_ece_is_accuracy_gap(preds in predictions()) {
        let acc = accuracy(&preds).unwrap().0;
        let confs: Vec<f64> = preds.iter().map(|p| p.probs.confidence()).collect();
        let mean_conf = staicc_core::distribution::pairwise_sum(&confs) / confs.len() as f64;
        prop_assert_eq!(ece1(&preds, 1).unwrap(), (acc - mean_conf).abs());
    }

    #[test]
    fn argmax_metrics_ignore_monotone_rescaling(preds in predictions(), power in 0.2f64..5.0) {
        let rescaled: Vec<Prediction> = preds
            .iter()
            .map(|p| {
                let m: Vec<f64> = p.probs.probs().iter().map(|x| x.powf(power)).collect();
                Prediction::new(LabelDistribution::from_masses(&m).unwrap(), p.truth)
            })
            .collect();
        prop_assume!(rescaled.iter().zip(&preds).all(|(a, b)| a.probs.argmax() == b.probs.argmax()));
        prop_assert_eq!(accuracy(&preds).unwrap().0, accuracy(&rescaled).unwrap().0);
        prop_assert_eq!(macro_f1(&preds).unwrap().0, macro_f1(&rescaled).unwrap().0);
    }

    #[test]
    fn macro_f1_is_relabeling_invariant(preds in predictions(), rot in 1usize..4) {
        let c = preds[0].probs.len();
        let perm = |j: usize| (j + rot) % c;
        let relabeled: Vec<Prediction> = preds
            .iter()
            .map(|p| {
                let mut v = vec![0.0; c];
                for (j, x) in p.probs.probs().iter().enumerate() {
                    v[perm(j)] = *x;
                }
                Prediction::new(LabelDistribution::new(v).unwrap(), perm(p.truth))
            })
            .collect();
        prop_assert!((macro_f1(&preds).unwrap().0 - macro_f1(&relabeled).unwrap().0).abs() < 1e-12);
    }

    #[test]
    fn uniform_prior_is_identity(p in (2usize..=6).prop_flat_map(distribution)) {
        let prior = LabelDistribution::uniform(p.len()).unwrap();
        let (out, floored) = calibrate_with_prior(&p, &prior).unwrap();
        prop_assert!(!floored);
        for (a, b) in out.probs().iter().zip(p.probs()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn calibration_scale_invariance(p in (2usize..=5).prop_flat_map(distribution), scale in 0.01f64..100.0) {
        // Scaling the gateway masses and renormalizing leaves every argmax alone.
        let scaled = LabelDistribution::from_masses(
            &p.probs().iter().map(|x| x * scale).collect::<Vec<_>>()
        ).unwrap();
        prop_assert_eq!(scaled.argmax(), p.argmax());
        let prior = LabelDistribution::uniform(p.len()).unwrap();
        prop_assert_eq!(
            calibrate_with_prior(&scaled, &prior).unwrap().0.argmax(),
            calibrate_with_prior(&p, &prior).unwrap().0.argmax()
        );
    }

    #[test]
    fn batch_argmax_is_mean_removed_argmax(
        batch in (2usize..=4).prop_flat_map(|c| prop::collection::vec(distribution(c), 1..40)),
        size in 1usize..16,
    ) {
        let out = batch_calibrate(&batch, size).unwrap();
        for (start, chunk) in batch.chunks(size).enumerate() {
            let c = chunk[0].len();
            let mean: Vec<f64> = (0..c)
                .map(|j| chunk.iter().map(|d| d.probs()[j]).sum::<f64>() / chunk.len() as f64)
                .collect();
            for (i, d) in chunk.iter().enumerate() {
                let scores: Vec<f64> = d.probs().iter().zip(&mean).map(|(p, m)| p - m).collect();
                let (o, singleton) = &out[start * size + i];
                prop_assert_eq!(*singleton, chunk.len() == 1);
                let gap = scores[naive_argmax(&scores)] - scores[o.argmax()];
                prop_assert!(gap <= 1e-12);
            }
        }
    }

    #[test]
    fn centroid_classifier_matches_distances(
        dim in 1usize..6,
        seed_vals in prop::collection::vec(-2.0f64..2.0, 4 * 6 + 6),
        classes in 2usize..=4,
    ) {
        let centroids: Vec<Vec<f64>> = (0..classes).map(|c| seed_vals[c * dim..(c + 1) * dim].to_vec()).collect();
        let q = &seed_vals[24..24 + dim];
        let model = ClassCentroids { space: CentroidSpace::OutputProbs, counts: vec![1; classes], centroids: centroids.clone() };
        let d = centroid_classify(q, &model).unwrap();
        let dist: Vec<f64> = centroids.iter().map(|c| c.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum()).collect();
        let z: f64 = dist.iter().map(|x| (-x).exp()).sum();
        for (p, x) in d.probs().iter().zip(&dist) {
            prop_assert!((p - (-x).exp() / z).abs() <= 1e-9);
        }
    }

    #[test]
    fn bias_bounds(outs in (2usize..=5).prop_flat_map(|c| prop::collection::vec(distribution(c), 1..20))) {
        let b = entropy_bias(&outs).unwrap();
        let c = outs[0].len() as f64;
        prop_assert!(b <= 0.0 && b >= -c.ln() - 1e-12);
        let truths: Vec<usize> = (0..outs.len()).map(|i| i % outs[0].len()).collect();
        if outs.len() >= outs[0].len() {
            prop_assert!(empirical_bias(&outs, &truths).unwrap() >= 0.0);
        }
    }

    #[test]
    fn majority_rate_lower_bound(runs in prop::collection::vec(prop::collection::vec(0usize..4, 9), 1..10)) {
        let c = consistency(&runs, 9).unwrap();
        prop_assert!((1.0 / 9.0 - 1e-15..=1.0).contains(&c));
        for r in &runs {
            prop_assert!(majority_rate(r) >= 3.0 / 9.0 - 1e-15);
        }
    }

    #[test]
    fn gler_recovers_affine_slope(a in 0.0f64..1.0, b in -0.9f64..0.9) {
        let pts: Vec<NoisePoint> = NOISE_RATES.iter().map(|&p| NoisePoint { p, accuracy: a + b * p }).collect();
        let fit = gler(&pts).unwrap();
        prop_assert!((fit.beta - b).abs() <= 1e-12);
        prop_assert!((fit.intercept - a).abs() <= 1e-12);
    }

    #[test]
    fn noise_specs_are_exact_and_nested(k in 1usize..=8, classes in 2usize..=6, seed in any::<u64>(), qid in 0usize..1000) {
        let assignment = DemonstrationAssignment { query_id: qid, demo_ids: (0..k).collect(), seed_tag: 0 };
        let labels: Vec<usize> = (0..k).map(|i| (i * 7 + qid) % classes).collect();
        let mut previous: Option<BTreeMap<usize, usize>> = None;
        for p in NOISE_RATES {
            let spec = make_noise_spec(&assignment, &labels, p, classes, seed).unwrap();
            prop_assert_eq!(spec.flip_positions.len(), flip_count(p, k));
            for (&pos, &label) in &spec.replacement_labels {
                prop_assert_ne!(label, labels[pos]);
                prop_assert!(label < classes);
            }
            if let Some(prev) = previous {
                for (pos, label) in prev {
                    prop_assert_eq!(spec.replacement_labels.get(&pos), Some(&label));
                }
            }
            previous = Some(spec.replacement_labels.clone());
        }
    }
}

fn labelled_corpus(n: usize, weights: &[usize]) -> Vec<SampleRecord> {
    let total: usize = weights.iter().sum();
    (0..n)
        .map(|i| {
            let mut r = i % total;
            let mut label = 0;
            while r >= weights[label] {
                r -= weights[label];
                label += 1;
            }
            SampleRecord {
                id: i * 3 + 1,
                text: format!("t{i}"),
                label,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trisection_is_disjoint_stratified_and_deterministic(
        weights in prop::collection::vec(1usize..6, 2..5),
        sizes in (20usize..120, 20usize..120, 20usize..120),
        seed in any::<u64>(),
    ) {
        let records = labelled_corpus(500, &weights);
        let s = SplitSizes::new(sizes.0, sizes.1, sizes.2);
        let tri = trisect("ds", &records, s, seed).unwrap();
        prop_assert_eq!(tri.sizes(), s);
        prop_assert_eq!(&tri, &trisect("ds", &records, s, seed).unwrap());
        let mut ids = BTreeSet::new();
        for r in tri.calibration.iter().chain(&tri.demonstration).chain(&tri.test) {
            prop_assert!(ids.insert(r.id));
        }
        let total: usize = weights.iter().sum();
        for split in [&tri.calibration, &tri.demonstration, &tri.test] {
            for (c, w) in weights.iter().enumerate() {
                let share = split.iter().filter(|r| r.label == c).count() as f64 / split.len() as f64;
                let target = *w as f64 / total as f64;
                // Largest remainder keeps each class within one record of its quota.
                prop_assert!((share - target).abs() <= 0.02f64.max(1.0 / split.len() as f64) + 1e-12);
            }
        }
    }

    #[test]
    fn assignments_draw_distinct_demonstrations(k in 1usize..=16, tag in 0u64..8, qid in 0usize..10_000) {
        let records = labelled_corpus(200, &[1, 1]);
        let tri = trisect("ds", &records, SplitSizes::new(50, 100, 50), 3).unwrap();
        let a = assign_one(&tri, qid, k, tag, AssignmentStream::Test).unwrap();
        let set: BTreeSet<usize> = a.demo_ids.iter().copied().collect();
        prop_assert_eq!(set.len(), k);
        prop_assert!(a.demo_ids.iter().all(|id| tri.demonstration_by_id(*id).is_some()));
        prop_assert_eq!(a, assign_one(&tri, qid, k, tag, AssignmentStream::Test).unwrap());
    }
}
