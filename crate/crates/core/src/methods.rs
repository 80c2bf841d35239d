//! The ten inference methods. Each turns a test (or pseudo) query into a
//! [`LabelDistribution`] through the gateway, optionally reshaping the input
//! (demonstration retrieval, ordering, channel form) or recalibrating the
//! output.
//!
//! Gateway budget per query, with `|Y|` labels and `S = extra_samples`
//! shared once per dataset pass:
//!
//! | method          | forward requests                         |
//! |-----------------|------------------------------------------|
//! | vanilla         | 1                                        |
//! | noisy_channel   | `|Y|`                                    |
//! | contextual_cal  | 1 + one prior per distinct demo sequence |
//! | domain_cal      | 1 (+ S shared)                           |
//! | batch_cal       | 1                                        |
//! | ppl_icl         | `candidate_orders` ppl + 1               |
//! | topk            | 1                                        |
//! | sa_icl          | ≤ `candidate_orders`                     |
//! | knn_centroid    | 1 (+ S shared)                           |
//! | hidden_cal      | 1 (+ S shared)                           |

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    assign_one, make_noise_spec, AssignmentStream, CorpusError, DemonstrationAssignment, NoiseSpec,
    SampleRecord, Trisection,
};
use crate::diagnostics::{domain_pseudo_text, DomainVocabulary};
use crate::distribution::{mean_vector, DistributionError, LabelDistribution};
use crate::gateway::{Gateway, GatewayError, GatewayRequest, GatewayResponse};
use crate::mock::cosine;
use crate::rng::{fnv1a, StreamRng};
use crate::templating::{
    assemble, demo_pairs, render_channel, AssembledPrompt, PromptTemplate, PseudoQueryKind,
    QuerySlot, TemplateError,
};

/// Prior components below this are floored (and the query flagged).
pub const PRIOR_FLOOR: f64 = 1e-12;

/// Seed base of the domain-prior pseudo queries; query `i` uses `base ^ i`.
pub const DOMAIN_PRIOR_SEED: u64 = 0x646f_6d61_696e;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MethodError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error("vector has dimension {got}, centroids have {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("retrieval pool has {available} items, need {k}")]
    PoolTooSmall { k: usize, available: usize },
    #[error("class {0} has no calibration records to fit a centroid")]
    ClassUnrepresentable(usize),
    #[error("calibration split has no words to sample pseudo queries from")]
    EmptyVocabulary,
    #[error("{0} requests failed while estimating a shared prior")]
    SharedStage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    NoisyChannel,
    ContextualCal,
    DomainCal,
    BatchCal,
    PplIcl,
    Topk,
    SaIcl,
    KnnCentroid,
    HiddenCal,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Vanilla,
        Method::NoisyChannel,
        Method::ContextualCal,
        Method::DomainCal,
        Method::BatchCal,
        Method::PplIcl,
        Method::Topk,
        Method::SaIcl,
        Method::KnnCentroid,
        Method::HiddenCal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::NoisyChannel => "noisy_channel",
            Method::ContextualCal => "contextual_cal",
            Method::DomainCal => "domain_cal",
            Method::BatchCal => "batch_cal",
            Method::PplIcl => "ppl_icl",
            Method::Topk => "topk",
            Method::SaIcl => "sa_icl",
            Method::KnnCentroid => "knn_centroid",
            Method::HiddenCal => "hidden_cal",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| alloc::format!("unknown method {s:?}"))
    }
}

fn default_extra_samples() -> usize {
    128
}
fn default_domain_query_len() -> usize {
    64
}
fn default_batch_size() -> usize {
    128
}
fn default_candidate_orders() -> usize {
    8
}
fn default_prior_texts() -> Vec<String> {
    vec![String::new()]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    #[serde(default = "default_extra_samples")]
    pub extra_samples: usize,
    #[serde(default = "default_domain_query_len")]
    pub domain_query_len: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_candidate_orders")]
    pub candidate_orders: usize,
    /// Content-free query texts whose outputs are averaged into the
    /// contextual prior. The default is the empty query alone.
    #[serde(default = "default_prior_texts")]
    pub contextual_prior_texts: Vec<String>,
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            extra_samples: default_extra_samples(),
            domain_query_len: default_domain_query_len(),
            batch_size: default_batch_size(),
            candidate_orders: default_candidate_orders(),
            contextual_prior_texts: default_prior_texts(),
        }
    }
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self::new(Method::Vanilla)
    }
}

/// Label-noise setting for a pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSetting {
    pub p: f64,
    pub seed: u64,
}

/// Everything fixed for one evaluation pass over a dataset.
#[derive(Debug, Clone)]
pub struct TaskContext<'a> {
    pub tri: &'a Trisection,
    pub template: &'a PromptTemplate,
    pub k: usize,
    pub seed_tag: u64,
    pub noise: Option<NoiseSetting>,
    demo_index: BTreeMap<usize, usize>,
}

/// One query slot of a pass: a real test record or a pseudo query standing
/// in for it.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryInput {
    pub query_id: usize,
    pub text: String,
    pub kind: PseudoQueryKind,
    pub truth: Option<usize>,
    pub assignment: DemonstrationAssignment,
}

impl<'a> TaskContext<'a> {
    pub fn new(tri: &'a Trisection, template: &'a PromptTemplate, k: usize, seed_tag: u64) -> Self {
        let demo_index = tri
            .demonstration
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id, i))
            .collect();
        Self {
            tri,
            template,
            k,
            seed_tag,
            noise: None,
            demo_index,
        }
    }

    pub fn with_noise(mut self, noise: Option<NoiseSetting>) -> Self {
        self.noise = noise;
        self
    }

    pub fn class_count(&self) -> usize {
        self.template.label_space.len()
    }

    pub fn demos(&self, ids: &[usize]) -> Result<Vec<&'a SampleRecord>, MethodError> {
        ids.iter()
            .map(|id| {
                self.demo_index
                    .get(id)
                    .map(|&i| &self.tri.demonstration[i])
                    .ok_or(MethodError::Corpus(CorpusError::UnknownId(*id)))
            })
            .collect()
    }

    fn noise_for(
        &self,
        assignment: &DemonstrationAssignment,
        demos: &[&SampleRecord],
    ) -> Result<Option<NoiseSpec>, MethodError> {
        let Some(n) = self.noise else { return Ok(None) };
        let labels: Vec<usize> = demos.iter().map(|r| r.label).collect();
        Ok(Some(make_noise_spec(
            assignment,
            &labels,
            n.p,
            self.class_count(),
            n.seed,
        )?))
    }

    /// Renders `assignment`'s demonstrations (with pass noise) and a query text.
    pub fn render(
        &self,
        assignment: &DemonstrationAssignment,
        query_id: usize,
        text: &str,
        kind: PseudoQueryKind,
    ) -> Result<AssembledPrompt, MethodError> {
        let demos = self.demos(&assignment.demo_ids)?;
        let noise = self.noise_for(assignment, &demos)?;
        let slot = QuerySlot {
            id: query_id,
            text,
            kind,
        };
        Ok(assemble(self.template, &demos, &slot, noise.as_ref())?)
    }

    pub fn render_query(&self, q: &QueryInput) -> Result<AssembledPrompt, MethodError> {
        self.render(&q.assignment, q.query_id, &q.text, q.kind)
    }

    /// Frozen test queries of this pass, in test-split order.
    pub fn test_queries(&self) -> Result<Vec<QueryInput>, MethodError> {
        self.tri
            .test
            .iter()
            .map(|r| {
                Ok(QueryInput {
                    query_id: r.id,
                    text: r.text.clone(),
                    kind: PseudoQueryKind::None,
                    truth: Some(r.label),
                    assignment: assign_one(
                        self.tri,
                        r.id,
                        self.k,
                        self.seed_tag,
                        AssignmentStream::Test,
                    )?,
                })
            })
            .collect()
    }

    /// Test-set-sized pseudo queries: slot `i` keeps test query `i`'s frozen
    /// demonstrations and swaps the query text for `texts[i]`.
    pub fn pseudo_queries(
        &self,
        kind: PseudoQueryKind,
        texts: &[String],
    ) -> Result<Vec<QueryInput>, MethodError> {
        let mut out = self.test_queries()?;
        for (q, t) in out.iter_mut().zip(texts) {
            q.text = t.clone();
            q.kind = kind;
            q.truth = None;
        }
        out.truncate(texts.len());
        Ok(out)
    }

    fn label_request(&self, prompt: &AssembledPrompt) -> GatewayRequest {
        GatewayRequest::labels(prompt.text.clone(), &self.template.label_space)
    }
}

/// Per-query flags surfaced in prediction records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryFlag {
    PriorFloored,
    SingletonBatch,
    RetrievalFallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutput {
    pub distribution: LabelDistribution,
    /// FNV-1a of the prompt text behind the final prediction.
    pub prompt_fingerprint: u64,
    pub demo_ids: Vec<usize>,
    pub hidden_hash: Option<u64>,
    pub flags: Vec<QueryFlag>,
}

pub type QueryResult = Result<MethodOutput, MethodError>;

/// Divide-and-renormalize calibration against a prior. Returns the
/// calibrated distribution and whether any prior component was floored.
pub fn calibrate_with_prior(
    probs: &LabelDistribution,
    prior: &LabelDistribution,
) -> Result<(LabelDistribution, bool), MethodError> {
    if probs.len() != prior.len() {
        return Err(MethodError::DimensionMismatch {
            expected: prior.len(),
            got: probs.len(),
        });
    }
    let mut floored = false;
    let masses: Vec<f64> = probs
        .probs()
        .iter()
        .zip(prior.probs())
        .map(|(&p, &q)| {
            if q < PRIOR_FLOOR {
                floored = true;
            }
            p / q.max(PRIOR_FLOOR)
        })
        .collect();
    Ok((LabelDistribution::from_masses(&masses)?, floored))
}

/// Mean-removal batch calibration over consecutive chunks of `batch_size`:
/// score = prob − batch mean prob, output = softmax(score). Returns each
/// output with a flag set for singleton batches.
pub fn batch_calibrate(
    probs: &[LabelDistribution],
    batch_size: usize,
) -> Result<Vec<(LabelDistribution, bool)>, MethodError> {
    let batch_size = batch_size.max(1);
    let mut out = Vec::with_capacity(probs.len());
    for chunk in probs.chunks(batch_size) {
        let dim = chunk[0].len();
        if let Some(bad) = chunk.iter().find(|d| d.len() != dim) {
            return Err(MethodError::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        let mean = mean_vector(chunk.iter().map(|d| d.probs()), dim).expect("nonempty chunk");
        for d in chunk {
            let scores: Vec<f64> = d.probs().iter().zip(&mean).map(|(p, m)| p - m).collect();
            out.push((LabelDistribution::softmax(&scores)?, chunk.len() == 1));
        }
    }
    Ok(out)
}

/// Which vectors a centroid model lives over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidSpace {
    OutputProbs,
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCentroids {
    pub space: CentroidSpace,
    pub centroids: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl ClassCentroids {
    /// Per-class arithmetic means of labeled vectors.
    pub fn from_samples(
        space: CentroidSpace,
        class_count: usize,
        samples: &[(usize, Vec<f64>)],
    ) -> Result<Self, MethodError> {
        let dim = samples.first().map(|s| s.1.len()).unwrap_or(0);
        if let Some(bad) = samples.iter().find(|s| s.1.len() != dim) {
            return Err(MethodError::DimensionMismatch {
                expected: dim,
                got: bad.1.len(),
            });
        }
        let mut centroids = Vec::with_capacity(class_count);
        let mut counts = Vec::with_capacity(class_count);
        for c in 0..class_count {
            let rows: Vec<&[f64]> = samples
                .iter()
                .filter(|s| s.0 == c)
                .map(|s| s.1.as_slice())
                .collect();
            if rows.is_empty() {
                return Err(MethodError::ClassUnrepresentable(c));
            }
            counts.push(rows.len());
            centroids.push(mean_vector(rows, dim).expect("nonempty"));
        }
        Ok(Self {
            space,
            centroids,
            counts,
        })
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }
}

/// softmax(−squared Euclidean distance to each centroid).
pub fn centroid_classify(
    query: &[f64],
    centroids: &ClassCentroids,
) -> Result<LabelDistribution, MethodError> {
    if query.len() != centroids.dim() {
        return Err(MethodError::DimensionMismatch {
            expected: centroids.dim(),
            got: query.len(),
        });
    }
    let scores: Vec<f64> = centroids
        .centroids
        .iter()
        .map(|c| {
            -c.iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .collect();
    Ok(LabelDistribution::softmax(&scores)?)
}

/// Draws up to `n` calibration records, redrawing so every class in
/// `0..class_count` is represented at least once.
pub fn draw_calibration_sample(
    tri: &Trisection,
    class_count: usize,
    n: usize,
    seed_tag: u64,
) -> Result<Vec<&SampleRecord>, MethodError> {
    let pool = &tri.calibration;
    let n = n.min(pool.len());
    let mut rng = StreamRng::keyed(&tri.dataset_id, &[seed_tag, 0x6365_6e74]);
    let mut picked: Vec<usize> = rng.sample_indices(pool.len(), n);
    for c in 0..class_count {
        if picked.iter().any(|&i| pool[i].label == c) {
            continue;
        }
        let candidates: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label == c).collect();
        if candidates.is_empty() || n == 0 {
            return Err(MethodError::ClassUnrepresentable(c));
        }
        let replacement = candidates[rng.below(candidates.len())];
        // Replace the last-drawn record of the most populous class.
        let mut counts = vec![0usize; class_count.max(1)];
        for &i in &picked {
            if let Some(slot) = counts.get_mut(pool[i].label) {
                *slot += 1;
            }
        }
        let donor = (0..counts.len())
            .max_by_key(|&d| (counts[d], core::cmp::Reverse(d)))
            .unwrap_or(0);
        if counts[donor] <= 1 {
            return Err(MethodError::ClassUnrepresentable(c));
        }
        let pos = picked
            .iter()
            .rposition(|&i| pool[i].label == donor)
            .expect("donor class present");
        picked[pos] = replacement;
    }
    Ok(picked.into_iter().map(|i| &pool[i]).collect())
}

/// Fits class centroids from `extra_samples` calibration records, each
/// rendered with its own frozen demonstrations.
pub fn fit_centroids<G: Gateway>(
    gw: &mut G,
    ctx: &TaskContext<'_>,
    space: CentroidSpace,
    extra_samples: usize,
) -> Result<ClassCentroids, MethodError> {
    let sample = draw_calibration_sample(ctx.tri, ctx.class_count(), extra_samples, ctx.seed_tag)?;
    let mut reqs = Vec::with_capacity(sample.len());
    for r in &sample {
        let a = assign_one(
            ctx.tri,
            r.id,
            ctx.k,
            ctx.seed_tag,
            AssignmentStream::Calibration,
        )?;
        let demos = ctx.demos(&a.demo_ids)?;
        let prompt = assemble(ctx.template, &demos, &QuerySlot::real(r), None)?;
        let req = ctx.label_request(&prompt);
        reqs.push(match space {
            CentroidSpace::OutputProbs => req,
            CentroidSpace::Hidden => req.with_hidden(),
        });
    }
    let mut samples = Vec::with_capacity(sample.len());
    for (r, resp) in sample.iter().zip(gw.predict_batch(&reqs)) {
        let resp = resp?;
        let v = match space {
            CentroidSpace::OutputProbs => resp.require_probs()?.probs().to_vec(),
            CentroidSpace::Hidden => resp.require_hidden()?.to_vec(),
        };
        samples.push((r.label, v));
    }
    ClassCentroids::from_samples(space, ctx.class_count(), &samples)
}

/// Embeddings of the demonstration split.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingIndex {
    pub items: Vec<(usize, Vec<f64>)>,
}

impl EmbeddingIndex {
    /// Embeds every demonstration record; records with no embeddable text are
    /// left out of the pool.
    pub fn build<G: Gateway>(gw: &mut G, tri: &Trisection) -> Result<Self, MethodError> {
        let mut items = Vec::with_capacity(tri.demonstration.len());
        for r in &tri.demonstration {
            match gw.embed(&r.text) {
                Ok(v) => items.push((r.id, v)),
                Err(GatewayError::EmptyText) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(Self { items })
    }

    /// Pool ids ranked by cosine similarity, most similar first; equal
    /// similarity ranks the lower id first.
    pub fn ranked(&self, query: &[f64]) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = self
            .items
            .iter()
            .map(|(id, v)| (*id, cosine(v, query)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
    }
}

/// The `k` most similar pool items, ordered most-similar-last.
pub fn topk_select(
    index: &EmbeddingIndex,
    query: &[f64],
    k: usize,
) -> Result<Vec<usize>, MethodError> {
    if index.items.len() < k {
        return Err(MethodError::PoolTooSmall {
            k,
            available: index.items.len(),
        });
    }
    let mut ids: Vec<usize> = index
        .ranked(query)
        .into_iter()
        .take(k)
        .map(|(id, _)| id)
        .collect();
    ids.reverse();
    Ok(ids)
}

/// Candidate demonstration sequences for SA-ICL: candidate 0 is the TopK
/// selection; the rest are seeded draws of `k` from the `3k` nearest, in
/// draw order. Duplicate sequences are dropped.
pub fn sa_icl_candidates(
    index: &EmbeddingIndex,
    query: &[f64],
    k: usize,
    orders: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, MethodError> {
    let first = topk_select(index, query, k)?;
    let widened: Vec<usize> = index
        .ranked(query)
        .into_iter()
        .take((3 * k).min(index.items.len()))
        .map(|(id, _)| id)
        .collect();
    let mut rng = StreamRng::keyed("sa-icl", &[seed]);
    let mut out = vec![first];
    for _ in 1..orders {
        let cand: Vec<usize> = rng
            .sample_indices(widened.len(), k)
            .into_iter()
            .map(|i| widened[i])
            .collect();
        if !out.contains(&cand) {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Demonstration ids plus noise replacements `(position, label)`.
type PriorKey = (Vec<usize>, Vec<(usize, usize)>);

/// State shared by all queries of one pass: priors, centroids, embeddings
/// and the contextual prior cache.
#[derive(Debug, Clone, Default)]
pub struct SharedState {
    pub domain_prior: Option<LabelDistribution>,
    pub centroids: Option<ClassCentroids>,
    pub index: Option<EmbeddingIndex>,
    contextual_priors: BTreeMap<PriorKey, LabelDistribution>,
}

impl SharedState {
    /// Runs the once-per-pass stages the method needs.
    pub fn prepare<G: Gateway>(
        gw: &mut G,
        ctx: &TaskContext<'_>,
        cfg: &MethodConfig,
    ) -> Result<Self, MethodError> {
        let mut st = SharedState::default();
        match cfg.method {
            Method::DomainCal => st.domain_prior = Some(domain_prior(gw, ctx, cfg)?),
            Method::KnnCentroid => {
                st.centroids = Some(fit_centroids(
                    gw,
                    ctx,
                    CentroidSpace::OutputProbs,
                    cfg.extra_samples,
                )?)
            }
            Method::HiddenCal => {
                st.centroids = Some(fit_centroids(
                    gw,
                    ctx,
                    CentroidSpace::Hidden,
                    cfg.extra_samples,
                )?)
            }
            Method::Topk | Method::SaIcl => st.index = Some(EmbeddingIndex::build(gw, ctx.tri)?),
            _ => {}
        }
        Ok(st)
    }
}

/// Mean gateway output over `extra_samples` domain-sampled pseudo queries.
/// Pseudo query `i` reuses test slot `i mod |test|`'s frozen demonstrations.
pub fn domain_prior<G: Gateway>(
    gw: &mut G,
    ctx: &TaskContext<'_>,
    cfg: &MethodConfig,
) -> Result<LabelDistribution, MethodError> {
    let vocab = DomainVocabulary::from_records(&ctx.tri.calibration);
    if vocab.is_empty() {
        return Err(MethodError::EmptyVocabulary);
    }
    if ctx.tri.test.is_empty() {
        return Err(MethodError::SharedStage("empty test split".into()));
    }
    let mut reqs = Vec::with_capacity(cfg.extra_samples);
    for i in 0..cfg.extra_samples {
        let slot = &ctx.tri.test[i % ctx.tri.test.len()];
        let a = assign_one(
            ctx.tri,
            slot.id,
            ctx.k,
            ctx.seed_tag,
            AssignmentStream::Test,
        )?;
        let text = domain_pseudo_text(&vocab, cfg.domain_query_len, DOMAIN_PRIOR_SEED ^ i as u64);
        let prompt = ctx.render(&a, slot.id, &text, PseudoQueryKind::DomainSampled)?;
        reqs.push(ctx.label_request(&prompt));
    }
    let mut rows = Vec::with_capacity(reqs.len());
    for resp in gw.predict_batch(&reqs) {
        rows.push(resp?.require_probs()?.probs().to_vec());
    }
    let mean = mean_vector(rows.iter().map(Vec::as_slice), ctx.class_count())
        .ok_or_else(|| MethodError::SharedStage("no domain samples".into()))?;
    Ok(LabelDistribution::from_masses(&mean)?)
}

fn output(
    distribution: LabelDistribution,
    prompt: &AssembledPrompt,
    hidden: Option<&[f64]>,
    flags: Vec<QueryFlag>,
) -> MethodOutput {
    MethodOutput {
        distribution,
        prompt_fingerprint: fnv1a(prompt.text.as_bytes()),
        demo_ids: prompt.demo_ids.clone(),
        hidden_hash: hidden.map(|h| {
            let bytes: Vec<u8> = h.iter().flat_map(|x| x.to_le_bytes()).collect();
            fnv1a(&bytes)
        }),
        flags,
    }
}

fn probs_of(resp: Result<GatewayResponse, GatewayError>) -> Result<LabelDistribution, MethodError> {
    Ok(resp?.require_probs()?.clone())
}

/// Runs one method over a list of queries. Errors are per query; the pass
/// itself only fails if a shared stage fails.
pub fn run_method<G: Gateway>(
    gw: &mut G,
    ctx: &TaskContext<'_>,
    cfg: &MethodConfig,
    state: &mut SharedState,
    queries: &[QueryInput],
) -> Vec<QueryResult> {
    match cfg.method {
        Method::Vanilla
        | Method::BatchCal
        | Method::DomainCal
        | Method::KnnCentroid
        | Method::HiddenCal => run_single_shot(gw, ctx, cfg, state, queries),
        Method::ContextualCal => queries
            .iter()
            .map(|q| contextual_one(gw, ctx, cfg, state, q))
            .collect(),
        Method::NoisyChannel => queries.iter().map(|q| noisy_channel(gw, ctx, q)).collect(),
        Method::PplIcl => queries.iter().map(|q| ppl_icl(gw, ctx, cfg, q)).collect(),
        Method::Topk => queries
            .iter()
            .map(|q| topk_one(gw, ctx, state, q))
            .collect(),
        Method::SaIcl => queries
            .iter()
            .map(|q| sa_icl(gw, ctx, cfg, state, q))
            .collect(),
    }
}

/// Methods needing exactly one forward request per query; the requests are
/// issued as one pipelined batch.
fn run_single_shot<G: Gateway>(
    gw: &mut G,
    ctx: &TaskContext<'_>,
    cfg: &MethodConfig,
    state: &SharedState,
    queries: &[QueryInput],
) -> Vec<QueryResult> {
    let prompts: Vec<Result<AssembledPrompt, MethodError>> =
        queries.iter().map(|q| ctx.render_query(q)).collect();
    let want_hidden = cfg.method == Method::HiddenCal;
    let reqs: Vec<GatewayRequest> = prompts
        .iter()
        .filter_map(|p| p.as_ref().ok())
        .map(|p| {
            let r = ctx.label_request(p);
            if want_hidden {
                r.with_hidden()
            } else {
                r
            }
        })
        .collect();
    let mut responses = gw.predict_batch(&reqs).into_iter();
    let mut results: Vec<QueryResult> = Vec::with_capacity(queries.len());
    for prompt in prompts {
        let prompt = match prompt {
            Ok(p) => p,
            Err(e) => {
                results.push(Err(e));
                continue;
            }
        };
        let resp = responses.next().expect("one response per request");
        results.push(single_shot_output(cfg, state, &prompt, resp));
    }
    if cfg.method == Method::BatchCal {
        return apply_batch_calibration(results, cfg.batch_size);
    }
    results
}

fn single_shot_output(
    cfg: &MethodConfig,
    state: &SharedState,
    prompt: &AssembledPrompt,
    resp: Result<GatewayResponse, GatewayError>,
) -> QueryResult {
    let resp = resp?;
    match cfg.method {
        Method::Vanilla | Method::BatchCal => {
            Ok(output(resp.require_probs()?.clone(), prompt, None, vec![]))
        }
        Method::DomainCal => {
            let prior = state.domain_prior.as_ref().expect("prepared domain prior");
            let (d, floored) = calibrate_with_prior(resp.require_probs()?, prior)?;
            let flags = if floored {
                vec![QueryFlag::PriorFloored]
            } else {
                vec![]
            };
            Ok(output(d, prompt, None, flags))
        }
        Method::KnnCentroid => {
            let c = state.centroids.as_ref().expect("prepared centroids");
            let d = centroid_classify(resp.require_probs()?.probs(), c)?;
            Ok(output(d, prompt, None, vec![]))
        }
        Method::HiddenCal => {
            let c = state.centroids.as_ref().expect("prepared centroids");
            let h = resp.require_hidden()?;
            Ok(output(centroid_classify(h, c)?, prompt, Some(h), vec![]))
        }
        _ => unreachable!("not a single-shot method"),
    }
}

/// Batch boundaries are consecutive successful queries in input order.
fn apply_batch_calibration(results: Vec<QueryResult>, batch_size: usize) -> Vec<QueryResult> {
    let ok: Vec<LabelDistribution> = results
        .iter()
        .filter_map(|r| r.as_ref().ok().map(|o| o.distribution.clone()))
        .collect();
    if ok.is_empty() {
        return results;
    }
    let calibrated = match batch_calibrate(&ok, batch_size) {
        Ok(c) => c,
        Err(e) => return results.into_iter().map(|_| Err(e.clone())).collect(),
    };
    let mut it = calibrated.into_iter();
    results
        .into_iter()
        .map(|r| {
            r.map(|mut o| {
                let (d, singleton) = it.next().expect("aligned");
                o.distribution = d;
                if singleton {
                    o.flags.push(QueryFlag::SingletonBatch);
                }
                o
            })
        })
        .collect()
}

fn contextual_one<G: Gateway>(
    gw: &mut G,
    ctx: &TaskContext<'_>,
    cfg: &MethodConfig,
    state: &mut SharedState,
    q: &QueryInput,
) -> QueryResult {
    let prompt = ctx.render_query(q)?;
    let probs = probs_of(gw.predict(&ctx.label_request(&prompt)))?;
    let noise_key: Vec<(usize, usize)> = prompt
        .noise_applied
        .as_ref()
        .map(|n| n.replacement_labels.iter().map(|(a, b)| (*a, *b)).collect())
        .unwrap_or_default();
    let key = (q.assignment.demo_ids.clone(), noise_key);
    let prior = match state.contextual_priors.get(&key) {
        Some(p) => p.clone(),
        None => {
            let mut rows = Vec::new();
            for text in &cfg.contextual_prior_texts {
                let p = ctx.render(&q.assignment, q.query_id, text, PseudoQueryKind::Empty)?;
                rows.push(probs_of(gw.predict(&ctx.label_request(&p)))?.into_vec());
            }
            let mean = mean_vector(rows.iter().map(Vec::as_slice), ctx.class_count())
                .ok_or_else(|| MethodError::SharedStage("no contextual prior texts".into()))?;
            let prior = LabelDistribution::from_masses(&mean)?;
            state.contextual_priors.insert(key, prior.clone());
            prior
        }
    };
    let (d, floored) = calibrate_with_prior(&probs, &prior)?;
    let flags = if floored {
        vec![QueryFlag::PriorFloored]
    } else {
        vec![]
    };
    Ok(output(d, &prompt, None, flags))
}

/// Noisy channel: for each candidate label, score the query text as the
/// continuation of a label-before-input prompt; softmax over the per-label
/// mean token log-likelihoods.
pub fn noisy_channel<G: Gateway>(gw: &mut G, ctx: &TaskContext<'_>, q: &QueryInput) -> QueryResult {
    let demos = ctx.demos(&q.assignment.demo_ids)?;
    let noise = ctx.noise_for(&q.assignment, &demos)?;
    let pairs = demo_pairs(ctx.template, &demos, noise.as_ref())?;
    let mut reqs = Vec::with_capacity(ctx.class_count());
    let mut first_prompt = None;
    for cand in &ctx.template.label_space {
        let prompt = render_channel(ctx.template, &pairs, cand)?;
        if first_prompt.is_none() {
            first_prompt = Some(prompt.clone());
        }
        reqs.push(
            GatewayRequest::labels(prompt, &ctx.template.label_space)
                .with_continuation(q.text.clone()),
        );
    }
    let mut scores = Vec::with_capacity(reqs.len());
    for resp in gw.predict_batch(&reqs) {
        scores.push(resp?.require_continuation()?);
    }
    let d = LabelDistribution::softmax(&scores)?;
    let channel_text: String = reqs.iter().map(|r| r.prompt.as_str()).collect();
    Ok(MethodOutput {
        distribution: d,
        prompt_fingerprint: fnv1a(channel_text.as_bytes()),
        demo_ids: q.assignment.demo_ids.clone(),
        hidden_hash: None,
        flags: vec![],
    })
}

/// PPL-ICL: among `candidate_orders` frozen demonstration sequences (seed
/// tags `seed_tag..seed_tag+orders`), predict with the one whose prompt has
/// the lowest perplexity; ties go to the earliest tag.
pub fn ppl_icl<G: Gateway>(
    gw: &mut G,
    ctx: &TaskContext<'_>,
    cfg: &MethodConfig,
    q: &QueryInput,
) -> QueryResult {
    let mut candidates = Vec::with_capacity(cfg.candidate_orders);
    for m in 0..cfg.candidate_orders.max(1) as u64 {
        let a = if m == 0 {
            q.assignment.clone()
        } else {
            assign_one(
                ctx.tri,
                q.query_id,
                ctx.k,
                ctx.seed_tag + m,
                AssignmentStream::Test,
            )?
        };
        candidates.push(ctx.render(&a, q.query_id, &q.text, q.kind)?);
    }
    let reqs: Vec<GatewayRequest> = candidates
        .iter()
        .map(|p| ctx.label_request(p).with_ppl())
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, resp) in gw.predict_batch(&reqs).into_iter().enumerate() {
        let ppl = resp?.require_ppl()?;
        if best.is_none_or(|(_, b)| ppl < b) {
            best = Some((i, ppl));
        }
    }
    let (i, _) = best.expect("at least one candidate");
    let chosen = &candidates[i];
    let d = probs_of(gw.predict(&ctx.label_request(chosen)))?;
    Ok(output(d, chosen, None, vec![]))
}

fn query_embedding<G: Gateway>(gw: &mut G, text: &str) -> Result<Option<Vec<f64>>, MethodError> {
    match gw.embed(text) {
        Ok(v) => Ok(Some(v)),
        Err(GatewayError::EmptyText) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn retrieved_assignment(q: &QueryInput, demo_ids: Vec<usize>) -> DemonstrationAssignment {
    DemonstrationAssignment {
        query_id: q.query_id,
        demo_ids,
        seed_tag: q.assignment.seed_tag,
    }
}

fn topk_one<G: Gateway>(
    gw: &mut G,
    ctx: &TaskContext<'_>,
    state: &SharedState,
    q: &QueryInput,
) -> QueryResult {
    let index = state.index.as_ref().expect("prepared index");
    let (assignment, flags) = match query_embedding(gw, &q.text)? {
        Some(v) => (
            retrieved_assignment(q, topk_select(index, &v, ctx.k)?),
            vec![],
        ),
        None => (q.assignment.clone(), vec![QueryFlag::RetrievalFallback]),
    };
    let prompt = ctx.render(&assignment, q.query_id, &q.text, q.kind)?;
    let d = probs_of(gw.predict(&ctx.label_request(&prompt)))?;
    Ok(output(d, &prompt, None, flags))
}

/// SA-ICL: render every candidate sequence, keep the output with minimal
/// entropy (earliest candidate on ties).
pub fn sa_icl<G: Gateway>(
    gw: &mut G,
    ctx: &TaskContext<'_>,
    cfg: &MethodConfig,
    state: &SharedState,
    q: &QueryInput,
) -> QueryResult {
    let index = state.index.as_ref().expect("prepared index");
    let seed = crate::rng::derive_seed(&ctx.tri.dataset_id, &[q.query_id as u64, ctx.seed_tag]);
    let (sequences, flags) = match query_embedding(gw, &q.text)? {
        Some(v) => (
            sa_icl_candidates(index, &v, ctx.k, cfg.candidate_orders, seed)?,
            vec![],
        ),
        None => {
            // No query signal: permute the frozen sequence instead.
            let base = &q.assignment.demo_ids;
            let mut rng = StreamRng::keyed("sa-icl-fallback", &[seed]);
            let mut seqs = vec![base.clone()];
            for _ in 1..cfg.candidate_orders {
                let perm: Vec<usize> = rng
                    .sample_indices(base.len(), base.len())
                    .into_iter()
                    .map(|i| base[i])
                    .collect();
                if !seqs.contains(&perm) {
                    seqs.push(perm);
                }
            }
            (seqs, vec![QueryFlag::RetrievalFallback])
        }
    };
    let prompts: Vec<AssembledPrompt> = sequences
        .into_iter()
        .map(|ids| ctx.render(&retrieved_assignment(q, ids), q.query_id, &q.text, q.kind))
        .collect::<Result<_, _>>()?;
    let reqs: Vec<GatewayRequest> = prompts.iter().map(|p| ctx.label_request(p)).collect();
    let mut best: Option<(usize, LabelDistribution, f64)> = None;
    for (i, resp) in gw.predict_batch(&reqs).into_iter().enumerate() {
        let d = probs_of(resp)?;
        let h = d.entropy();
        if best.as_ref().is_none_or(|(_, _, b)| h < *b) {
            best = Some((i, d, h));
        }
    }
    let (i, d, _) = best.expect("at least one candidate");
    Ok(output(d, &prompts[i], None, flags))
}

/// The documented forward-request budget for one query.
pub fn per_query_budget(method: Method, class_count: usize, cfg: &MethodConfig) -> (u64, u64) {
    // (minimum, maximum) forward requests for the query itself, excluding
    // shared once-per-pass stages.
    match method {
        Method::NoisyChannel => (class_count as u64, class_count as u64),
        Method::PplIcl => (
            cfg.candidate_orders as u64 + 1,
            cfg.candidate_orders as u64 + 1,
        ),
        Method::SaIcl => (1, cfg.candidate_orders as u64),
        Method::ContextualCal => (1, 1 + cfg.contextual_prior_texts.len() as u64),
        _ => (1, 1),
    }
}

/// Shared once-per-pass forward requests.
pub fn shared_budget(method: Method, cfg: &MethodConfig, calibration_size: usize) -> u64 {
    match method {
        Method::DomainCal => cfg.extra_samples as u64,
        Method::KnnCentroid | Method::HiddenCal => cfg.extra_samples.min(calibration_size) as u64,
        _ => 0,
    }
}

impl fmt::Display for QueryFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryFlag::PriorFloored => "prior_floored",
            QueryFlag::SingletonBatch => "singleton_batch",
            QueryFlag::RetrievalFallback => "retrieval_fallback",
        })
    }
}

impl QueryFlag {
    pub fn as_string(&self) -> String {
        self.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> LabelDistribution {
        LabelDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn contextual_hand_value() {
        let (d, floored) = calibrate_with_prior(&dist(&[0.6, 0.4]), &dist(&[0.75, 0.25])).unwrap();
        assert!(!floored);
        assert!((d.probs()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((d.probs()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn probs_equal_prior_gives_uniform() {
        let p = dist(&[0.2, 0.3, 0.5]);
        let (d, _) = calibrate_with_prior(&p, &p).unwrap();
        for x in d.probs() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_prior_is_floored_and_flagged() {
        let (d, floored) = calibrate_with_prior(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0])).unwrap();
        assert!(floored);
        assert!(d.probs()[1] > 0.999);
    }

    #[test]
    fn batch_hand_case() {
        // Brute force on a 3×2 batch: mean = (0.5, 0.5); scores = p − mean.
        let batch = [dist(&[0.9, 0.1]), dist(&[0.3, 0.7]), dist(&[0.3, 0.7])];
        let out = batch_calibrate(&batch, 128).unwrap();
        let mean0 = (0.9 + 0.3 + 0.3) / 3.0;
        let mean1 = (0.1 + 0.7 + 0.7) / 3.0;
        for (b, (o, singleton)) in batch.iter().zip(&out) {
            assert!(!singleton);
            let s0 = b.probs()[0] - mean0;
            let s1 = b.probs()[1] - mean1;
            let z = libm::exp(s0) + libm::exp(s1);
            assert!((o.probs()[0] - libm::exp(s0) / z).abs() < 1e-12);
        }
        assert_eq!(out[0].0.argmax(), 0);
        assert_eq!(out[1].0.argmax(), 1);
    }

    #[test]
    fn constant_batch_becomes_uniform_and_singletons_are_flagged() {
        let batch = vec![dist(&[0.8, 0.2]); 5];
        for (o, _) in batch_calibrate(&batch, 128).unwrap() {
            assert!((o.probs()[0] - 0.5).abs() < 1e-15);
        }
        let out = batch_calibrate(&batch, 2).unwrap();
        assert_eq!(out.iter().filter(|o| o.1).count(), 1);
        assert!(out[4].1);
    }

    #[test]
    fn centroid_means_and_classification() {
        let c = ClassCentroids::from_samples(
            CentroidSpace::OutputProbs,
            2,
            &[
                (0, vec![0.2, 0.8]),
                (0, vec![0.4, 0.6]),
                (1, vec![0.9, 0.1]),
            ],
        )
        .unwrap();
        assert!((c.centroids[0][0] - 0.3).abs() < 1e-15);
        assert!((c.centroids[0][1] - 0.7).abs() < 1e-15);
        assert_eq!(c.counts, vec![2, 1]);
        assert_eq!(centroid_classify(&[0.3, 0.7], &c).unwrap().argmax(), 0);
        assert_eq!(
            centroid_classify(&[0.3], &c),
            Err(MethodError::DimensionMismatch {
                expected: 2,
                got: 1
            })
        );
        assert_eq!(
            ClassCentroids::from_samples(CentroidSpace::Hidden, 3, &[(0, vec![1.0])]),
            Err(MethodError::ClassUnrepresentable(1))
        );
    }

    #[test]
    fn equidistant_centroids_uniform() {
        let c = ClassCentroids {
            space: CentroidSpace::Hidden,
            centroids: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
            counts: vec![1, 1, 1],
        };
        let d = centroid_classify(&[0.0, 0.0], &c).unwrap();
        for p in d.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn topk_places_duplicate_last_and_breaks_ties_by_id() {
        let index = EmbeddingIndex {
            items: vec![
                (10, vec![1.0, 0.0]),
                (11, vec![0.0, 1.0]),
                (12, vec![0.6, 0.8]),
                (13, vec![0.0, 1.0]),
            ],
        };
        let sel = topk_select(&index, &[1.0, 0.0], 2).unwrap();
        assert_eq!(sel, vec![12, 10]);
        let all = topk_select(&index, &[1.0, 0.0], 4).unwrap();
        assert_eq!(all, vec![13, 11, 12, 10]);
        assert_eq!(
            topk_select(&index, &[1.0, 0.0], 5),
            Err(MethodError::PoolTooSmall { k: 5, available: 4 })
        );
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        let cfg = MethodConfig::default();
        assert_eq!(
            (
                cfg.extra_samples,
                cfg.domain_query_len,
                cfg.batch_size,
                cfg.candidate_orders
            ),
            (128, 64, 128, 8)
        );
    }
}
