//! Labeled records, the frozen trisection, per-query demonstration sampling
//! and demonstration label noise.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::StreamRng;

/// Default over-length bound in characters.
pub const DEFAULT_MAX_CHARS: usize = 2048;

/// Default shot count.
pub const DEFAULT_K: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("dataset {dataset_id}: need {needed} records for the split sizes, have {available} (short by {})", needed - available)]
    InsufficientRecords {
        dataset_id: String,
        needed: usize,
        available: usize,
    },
    #[error("k = {k} exceeds the demonstration split size {available}")]
    KTooLarge { k: usize, available: usize },
    #[error("noise rate {0} is outside [0, 1]")]
    InvalidNoiseRate(f64),
    #[error("label noise needs at least 2 classes, got {0}")]
    NoWrongLabel(usize),
    #[error("expected {expected} demonstration labels, got {got}")]
    LabelCountMismatch { expected: usize, got: usize },
    #[error("label {label} is outside the {class_count}-class label set")]
    LabelOutOfRange { label: usize, class_count: usize },
    #[error("duplicate record id {0}")]
    DuplicateId(usize),
    #[error("id {0} does not name a record")]
    UnknownId(usize),
}

/// One labeled text instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub text: String,
    pub label: usize,
}

/// Outcome of [`filter`]: survivors plus what was dropped and why.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FilterOutcome {
    pub kept: Vec<SampleRecord>,
    pub dropped_empty: usize,
    pub dropped_overlength: usize,
}

impl FilterOutcome {
    pub fn dropped(&self) -> usize {
        self.dropped_empty + self.dropped_overlength
    }
}

/// Drops empty and over-length (> `max_chars` characters) records, keeping
/// the relative order of the survivors.
pub fn filter(records: Vec<SampleRecord>, max_chars: usize) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for r in records {
        let len = r.text.chars().count();
        if len == 0 {
            out.dropped_empty += 1;
        } else if len > max_chars {
            out.dropped_overlength += 1;
        } else {
            out.kept.push(r);
        }
    }
    out
}

/// `(calibration, demonstration, test)` split sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub calibration: usize,
    pub demonstration: usize,
    pub test: usize,
}

impl SplitSizes {
    pub const fn new(calibration: usize, demonstration: usize, test: usize) -> Self {
        Self {
            calibration,
            demonstration,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.calibration + self.demonstration + self.test
    }
}

/// The frozen calibration / demonstration / test split of one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trisection {
    pub dataset_id: String,
    pub calibration: Vec<SampleRecord>,
    pub demonstration: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl Trisection {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes::new(
            self.calibration.len(),
            self.demonstration.len(),
            self.test.len(),
        )
    }

    /// Rebuilds a trisection from id lists (e.g. a stored manifest).
    pub fn from_ids(
        dataset_id: &str,
        records: &[SampleRecord],
        calibration: &[usize],
        demonstration: &[usize],
        test: &[usize],
    ) -> Result<Self, CorpusError> {
        let by_id: BTreeMap<usize, &SampleRecord> = records.iter().map(|r| (r.id, r)).collect();
        let mut seen = BTreeSet::new();
        let mut pick = |ids: &[usize]| -> Result<Vec<SampleRecord>, CorpusError> {
            ids.iter()
                .map(|id| {
                    if !seen.insert(*id) {
                        return Err(CorpusError::DuplicateId(*id));
                    }
                    by_id
                        .get(id)
                        .map(|r| (*r).clone())
                        .ok_or(CorpusError::UnknownId(*id))
                })
                .collect()
        };
        Ok(Self {
            dataset_id: dataset_id.into(),
            calibration: pick(calibration)?,
            demonstration: pick(demonstration)?,
            test: pick(test)?,
        })
    }

    pub fn demonstration_by_id(&self, id: usize) -> Option<&SampleRecord> {
        self.demonstration.iter().find(|r| r.id == id)
    }
}

fn ids(v: &[SampleRecord]) -> Vec<usize> {
    v.iter().map(|r| r.id).collect()
}

impl Trisection {
    pub fn calibration_ids(&self) -> Vec<usize> {
        ids(&self.calibration)
    }
    pub fn demonstration_ids(&self) -> Vec<usize> {
        ids(&self.demonstration)
    }
    pub fn test_ids(&self) -> Vec<usize> {
        ids(&self.test)
    }
}

/// Largest-remainder allocation of `n` slots proportional to `weights`,
/// never exceeding `capacity[c]`.
fn proportional_quota(n: usize, weights: &[usize], capacity: &[usize]) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    let mut quota = alloc::vec![0usize; weights.len()];
    if total == 0 || n == 0 {
        return quota;
    }
    let mut remainders = Vec::with_capacity(weights.len());
    for (c, &w) in weights.iter().enumerate() {
        let exact = n as u128 * w as u128;
        let floor = (exact / total as u128) as usize;
        quota[c] = floor.min(capacity[c]);
        remainders.push((exact % total as u128, c));
    }
    let mut assigned: usize = quota.iter().sum();
    // Largest fractional part first, lower class on ties.
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in &remainders {
        if assigned == n {
            break;
        }
        if quota[c] < capacity[c] {
            quota[c] += 1;
            assigned += 1;
        }
    }
    // Capacity clipping can still leave slots open; fill in class order.
    for c in 0..weights.len() {
        while assigned < n && quota[c] < capacity[c] {
            quota[c] += 1;
            assigned += 1;
        }
    }
    quota
}

/// Stratified, seeded trisection. Each split's label histogram follows the
/// corpus histogram by largest-remainder allocation; records inside a split
/// are ordered by id.
pub fn trisect(
    dataset_id: &str,
    records: &[SampleRecord],
    sizes: SplitSizes,
    seed: u64,
) -> Result<Trisection, CorpusError> {
    if sizes.total() > records.len() {
        return Err(CorpusError::InsufficientRecords {
            dataset_id: dataset_id.into(),
            needed: sizes.total(),
            available: records.len(),
        });
    }
    let mut by_class: BTreeMap<usize, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.label).or_default().push(r);
    }
    let mut rng = StreamRng::keyed(dataset_id, &[seed, 0x7472_6973]);
    let pools: Vec<Vec<&SampleRecord>> = by_class
        .into_values()
        .map(|mut v| {
            v.sort_by_key(|r| r.id);
            rng.shuffle(&mut v);
            v
        })
        .collect();
    let weights: Vec<usize> = pools.iter().map(Vec::len).collect();
    let mut cursor = alloc::vec![0usize; pools.len()];

    let mut take = |n: usize| -> Vec<SampleRecord> {
        let capacity: Vec<usize> = pools
            .iter()
            .zip(&cursor)
            .map(|(p, c)| p.len() - c)
            .collect();
        let quota = proportional_quota(n, &weights, &capacity);
        let mut split = Vec::with_capacity(n);
        for (c, q) in quota.into_iter().enumerate() {
            split.extend(
                pools[c][cursor[c]..cursor[c] + q]
                    .iter()
                    .map(|r| (*r).clone()),
            );
            cursor[c] += q;
        }
        split.sort_by_key(|r| r.id);
        split
    };
    let calibration = take(sizes.calibration);
    let demonstration = take(sizes.demonstration);
    let test = take(sizes.test);
    Ok(Trisection {
        dataset_id: dataset_id.into(),
        calibration,
        demonstration,
        test,
    })
}

/// Frozen demonstration sequence for one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemonstrationAssignment {
    pub query_id: usize,
    pub demo_ids: Vec<usize>,
    pub seed_tag: u64,
}

/// Namespace separating the per-query demonstration streams of different
/// roles over the same dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignmentStream {
    Test,
    Calibration,
}

impl AssignmentStream {
    fn namespace_word(self) -> u64 {
        match self {
            Self::Test => 0,
            Self::Calibration => 0x6361_6c69,
        }
    }
}

/// Draws `k` demonstrations without replacement for one query from the
/// stream keyed by `(dataset_id, query_id, k, seed_tag)`.
pub fn assign_one(
    tri: &Trisection,
    query_id: usize,
    k: usize,
    seed_tag: u64,
    stream: AssignmentStream,
) -> Result<DemonstrationAssignment, CorpusError> {
    let n = tri.demonstration.len();
    if k > n {
        return Err(CorpusError::KTooLarge { k, available: n });
    }
    let mut rng = StreamRng::keyed(
        &tri.dataset_id,
        &[query_id as u64, k as u64, seed_tag, stream.namespace_word()],
    );
    let demo_ids = rng
        .sample_indices(n, k)
        .into_iter()
        .map(|i| tri.demonstration[i].id)
        .collect();
    Ok(DemonstrationAssignment {
        query_id,
        demo_ids,
        seed_tag,
    })
}

/// One assignment per test record, in test-split order.
pub fn assign_demonstrations(
    tri: &Trisection,
    k: usize,
    seed_tag: u64,
) -> Result<Vec<DemonstrationAssignment>, CorpusError> {
    tri.test
        .iter()
        .map(|q| assign_one(tri, q.id, k, seed_tag, AssignmentStream::Test))
        .collect()
}

/// Demonstration label falsification for one assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub p: f64,
    pub k: usize,
    pub flip_positions: BTreeSet<usize>,
    pub replacement_labels: BTreeMap<usize, usize>,
}

impl NoiseSpec {
    pub fn none(k: usize) -> Self {
        Self {
            p: 0.0,
            k,
            flip_positions: BTreeSet::new(),
            replacement_labels: BTreeMap::new(),
        }
    }

    pub fn is_noop(&self) -> bool {
        self.flip_positions.is_empty()
    }

    /// The label shown at demonstration position `pos`.
    pub fn label_at(&self, pos: usize, original: usize) -> usize {
        self.replacement_labels
            .get(&pos)
            .copied()
            .unwrap_or(original)
    }
}

/// `round(p·k)` with halves rounded up.
pub fn flip_count(p: f64, k: usize) -> usize {
    libm::floor(p * k as f64 + 0.5) as usize
}

/// Chooses `round(p·k)` positions and a uniformly drawn wrong label for each.
///
/// The stream is keyed by `(seed, query_id, k)` only, so the flips for a
/// larger `p` extend those for a smaller one.
pub fn make_noise_spec(
    assignment: &DemonstrationAssignment,
    original_labels: &[usize],
    p: f64,
    class_count: usize,
    seed: u64,
) -> Result<NoiseSpec, CorpusError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CorpusError::InvalidNoiseRate(p));
    }
    let k = assignment.demo_ids.len();
    if original_labels.len() != k {
        return Err(CorpusError::LabelCountMismatch {
            expected: k,
            got: original_labels.len(),
        });
    }
    let flips = flip_count(p, k);
    if flips == 0 {
        let mut spec = NoiseSpec::none(k);
        spec.p = p;
        return Ok(spec);
    }
    if class_count < 2 {
        return Err(CorpusError::NoWrongLabel(class_count));
    }
    if let Some(&label) = original_labels.iter().find(|&&l| l >= class_count) {
        return Err(CorpusError::LabelOutOfRange { label, class_count });
    }
    let mut rng = StreamRng::keyed("label-noise", &[seed, assignment.query_id as u64, k as u64]);
    let mut spec = NoiseSpec::none(k);
    spec.p = p;
    // Position and replacement are drawn in lockstep to keep prefixes nested.
    let order = rng.sample_indices(k, k);
    let mut label_rng = StreamRng::new(rng.next_u64());
    for (n, &pos) in order.iter().enumerate() {
        let r = label_rng.below(class_count - 1);
        if n < flips {
            let orig = original_labels[pos];
            let wrong = if r >= orig { r + 1 } else { r };
            spec.flip_positions.insert(pos);
            spec.replacement_labels.insert(pos, wrong);
        }
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn corpus(n: usize, classes: usize) -> Vec<SampleRecord> {
        (0..n)
            .map(|i| SampleRecord {
                id: i,
                text: format!("text {i}"),
                label: (i * 7 + i / 3) % classes,
            })
            .collect()
    }

    #[test]
    fn filter_over_length() {
        let recs = vec![
            SampleRecord {
                id: 0,
                text: "a".repeat(10),
                label: 0,
            },
            SampleRecord {
                id: 1,
                text: "b".repeat(9999),
                label: 1,
            },
        ];
        let out = filter(recs, DEFAULT_MAX_CHARS);
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].id, 0);
        assert_eq!(out.dropped_overlength, 1);
    }

    #[test]
    fn filter_identity_when_in_bounds() {
        let recs = corpus(20, 2);
        assert_eq!(filter(recs.clone(), 2048).kept, recs);
    }

    #[test]
    fn filter_counts_brute_force() {
        // 100 records, every record whose index is ≡ 3 (mod 14) is too long: 7 of them.
        let recs: Vec<SampleRecord> = (0..100)
            .map(|i| SampleRecord {
                id: i,
                text: if i % 14 == 3 {
                    "x".repeat(3000)
                } else {
                    "ok".into()
                },
                label: 0,
            })
            .collect();
        let expected = recs
            .iter()
            .filter(|r| r.text.chars().count() <= 2048)
            .count();
        assert_eq!(expected, 93);
        let out = filter(recs, 2048);
        assert_eq!(out.kept.len(), 93);
        assert!(out.kept.windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn filter_counts_chars_not_bytes() {
        let recs = vec![SampleRecord {
            id: 0,
            text: "é".repeat(5),
            label: 0,
        }];
        assert_eq!(filter(recs, 5).kept.len(), 1);
    }

    #[test]
    fn trisect_exact_sizes_and_disjoint() {
        let recs = corpus(500, 3);
        let t = trisect("toy", &recs, SplitSizes::new(100, 200, 50), 1).unwrap();
        assert_eq!(t.sizes(), SplitSizes::new(100, 200, 50));
        let mut all = t.calibration_ids();
        all.extend(t.demonstration_ids());
        all.extend(t.test_ids());
        let set: BTreeSet<_> = all.iter().collect();
        assert_eq!(set.len(), all.len());
    }

    #[test]
    fn trisect_reports_deficit() {
        let recs = corpus(10, 2);
        let err = trisect("toy", &recs, SplitSizes::new(5, 5, 5), 0).unwrap_err();
        assert_eq!(
            err,
            CorpusError::InsufficientRecords {
                dataset_id: "toy".into(),
                needed: 15,
                available: 10
            }
        );
        assert!(format!("{err}").contains("short by 5"));
    }

    #[test]
    fn trisect_is_stratified() {
        let recs = corpus(3000, 4);
        let t = trisect("toy", &recs, SplitSizes::new(500, 1000, 500), 5).unwrap();
        let hist = |v: &[SampleRecord]| {
            let mut h = [0usize; 4];
            v.iter().for_each(|r| h[r.label] += 1);
            h.map(|c| c as f64 / v.len() as f64)
        };
        let full = hist(&recs);
        for split in [&t.calibration, &t.demonstration, &t.test] {
            let h = hist(split);
            for c in 0..4 {
                assert!(
                    (h[c] - full[c]).abs() <= 0.02,
                    "class {c}: {} vs {}",
                    h[c],
                    full[c]
                );
            }
        }
    }

    #[test]
    fn trisect_seed_changes_split() {
        let recs = corpus(400, 2);
        let a = trisect("toy", &recs, SplitSizes::new(50, 50, 50), 0).unwrap();
        let b = trisect("toy", &recs, SplitSizes::new(50, 50, 50), 1).unwrap();
        assert_ne!(a.test_ids(), b.test_ids());
    }

    #[test]
    fn quota_respects_capacity() {
        let q = proportional_quota(5, &[1, 1, 8], &[0, 1, 8]);
        assert_eq!(q.iter().sum::<usize>(), 5);
        assert_eq!(q[0], 0);
    }

    #[test]
    fn assignment_rejects_large_k() {
        let recs = corpus(30, 2);
        let t = trisect("toy", &recs, SplitSizes::new(10, 3, 10), 0).unwrap();
        assert_eq!(
            assign_demonstrations(&t, 4, 0),
            Err(CorpusError::KTooLarge { k: 4, available: 3 })
        );
    }

    #[test]
    fn assignment_is_without_replacement_and_valid() {
        let recs = corpus(300, 2);
        let t = trisect("toy", &recs, SplitSizes::new(10, 200, 50), 0).unwrap();
        let demo: BTreeSet<usize> = t.demonstration_ids().into_iter().collect();
        for a in assign_demonstrations(&t, 4, 0).unwrap() {
            let s: BTreeSet<_> = a.demo_ids.iter().collect();
            assert_eq!(s.len(), 4);
            assert!(a.demo_ids.iter().all(|id| demo.contains(id)));
        }
    }

    #[test]
    fn eight_seed_tags_give_distinct_sequences() {
        let recs = corpus(600, 2);
        let t = trisect("toy", &recs, SplitSizes::new(10, 500, 20), 0).unwrap();
        let runs: Vec<_> = (0..8)
            .map(|s| assign_demonstrations(&t, 4, s).unwrap())
            .collect();
        for q in 0..t.test.len() {
            let seqs: BTreeSet<_> = runs.iter().map(|r| r[q].demo_ids.clone()).collect();
            assert_eq!(seqs.len(), 8);
        }
    }

    #[test]
    fn noise_worked_example() {
        let a = DemonstrationAssignment {
            query_id: 3,
            demo_ids: vec![10, 11, 12, 13],
            seed_tag: 0,
        };
        let spec = make_noise_spec(&a, &[0, 1, 0, 1], 0.5, 2, 0).unwrap();
        assert_eq!(spec.flip_positions.len(), 2);
        for (&pos, &lab) in &spec.replacement_labels {
            assert_ne!(lab, [0, 1, 0, 1][pos]);
        }
    }

    #[test]
    fn noise_zero_is_noop_even_single_class() {
        let a = DemonstrationAssignment {
            query_id: 0,
            demo_ids: vec![1, 2, 3],
            seed_tag: 0,
        };
        let spec = make_noise_spec(&a, &[0, 0, 0], 0.0, 1, 9).unwrap();
        assert!(spec.is_noop());
        assert_eq!(
            make_noise_spec(&a, &[0, 0, 0], 0.5, 1, 9),
            Err(CorpusError::NoWrongLabel(1))
        );
    }

    #[test]
    fn noise_flips_are_nested_in_p() {
        let a = DemonstrationAssignment {
            query_id: 8,
            demo_ids: (0..8).collect(),
            seed_tag: 0,
        };
        let labels = [0, 1, 2, 0, 1, 2, 0, 1];
        let mut prev: Option<NoiseSpec> = None;
        for p in [0.25, 0.5, 0.75, 1.0] {
            let s = make_noise_spec(&a, &labels, p, 3, 4).unwrap();
            if let Some(prev) = &prev {
                assert!(prev.flip_positions.is_subset(&s.flip_positions));
                for (pos, lab) in &prev.replacement_labels {
                    assert_eq!(s.replacement_labels[pos], *lab);
                }
            }
            prev = Some(s);
        }
    }

    #[test]
    fn round_half_up() {
        assert_eq!(flip_count(0.5, 1), 1);
        assert_eq!(flip_count(0.25, 2), 1);
        assert_eq!(flip_count(0.25, 1), 0);
        assert_eq!(flip_count(0.75, 2), 2);
        assert_eq!(flip_count(0.5, 4), 2);
    }

    #[test]
    fn invalid_rate() {
        let a = DemonstrationAssignment {
            query_id: 0,
            demo_ids: vec![1],
            seed_tag: 0,
        };
        assert_eq!(
            make_noise_spec(&a, &[0], 1.5, 2, 0),
            Err(CorpusError::InvalidNoiseRate(1.5))
        );
    }
}
