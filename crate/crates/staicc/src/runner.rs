//! Runs dataset x method cells, writes prediction records and reports.
//!
//! Every reported number is a function of `predictions.jsonl` alone (see
//! [`summarize`]), which is what `verify` relies on. Wall-clock data goes to
//! `run-meta.json` so that `report.json` is reproducible byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use staicc_core::corpus::Trisection;
use staicc_core::diagnostics::{
    self, empirical_bias, entropy_bias, gler, DiagnosticReport, DomainVocabulary, NoisePoint,
    NOISE_RATES, SAMPLING_RUNS, TEMPLATE_RUNS,
};
use staicc_core::gateway::{CallCounts, CountingGateway, Gateway, PROTOCOL_VERSION};
use staicc_core::methods::{
    run_method, MethodOutput, NoiseSetting, QueryFlag, QueryInput, SharedState, TaskContext,
};
use staicc_core::metrics::{average_over_datasets, MetricReport, Prediction};
use staicc_core::rng::PRNG_CONTRACT;
use staicc_core::templating::{l9_templates, PromptTemplate, PseudoQueryKind, TemplateBank};
use staicc_core::{LabelDistribution, Method, MethodConfig};
use thiserror::Error;

use crate::cache::CachedGateway;
use crate::config::{RunConfig, Suite};
use crate::ingest::{ingest, IngestError};
use crate::manifest::{ManifestError, SplitManifest};

pub const REPORT_FORMAT: u32 = 1;
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "report.txt";
pub const META_FILE: &str = "run-meta.json";

/// Errors that stop a run before any cell executes.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("dataset {dataset}: {source}")]
    Ingest {
        dataset: String,
        #[source]
        source: IngestError,
    },
    #[error("dataset {dataset}: {source}")]
    Manifest {
        dataset: String,
        #[source]
        source: ManifestError,
    },
    #[error("dataset {dataset}: {message}")]
    Dataset { dataset: String, message: String },
    #[error("output {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.into(),
        source,
    }
}

/// One evaluation pass of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pass {
    Normal,
    Contextual,
    Domain,
    Template(usize),
    Sampling(u64),
    /// Index into the noise-rate grid.
    Noise(usize),
}

impl Pass {
    pub fn noise_rate(self) -> Option<f64> {
        match self {
            Pass::Noise(i) => NOISE_RATES.get(i).copied(),
            _ => None,
        }
    }
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pass::Normal => f.write_str("normal"),
            Pass::Contextual => f.write_str("contextual"),
            Pass::Domain => f.write_str("domain"),
            Pass::Template(i) => write!(f, "template/{i}"),
            Pass::Sampling(s) => write!(f, "sampling/{s}"),
            Pass::Noise(i) => write!(f, "noise/{}", NOISE_RATES[*i]),
        }
    }
}

impl FromStr for Pass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("unknown pass {s:?}");
        Ok(match s {
            "normal" => Pass::Normal,
            "contextual" => Pass::Contextual,
            "domain" => Pass::Domain,
            _ => {
                let (kind, arg) = s.split_once('/').ok_or_else(bad)?;
                match kind {
                    "template" => Pass::Template(arg.parse().map_err(|_| bad())?),
                    "sampling" => Pass::Sampling(arg.parse().map_err(|_| bad())?),
                    "noise" => {
                        let p: f64 = arg.parse().map_err(|_| bad())?;
                        Pass::Noise(NOISE_RATES.iter().position(|r| *r == p).ok_or_else(bad)?)
                    }
                    _ => return Err(bad()),
                }
            }
        })
    }
}

impl Serialize for Pass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Pass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// One persisted prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dataset: String,
    pub method: Method,
    pub pass: Pass,
    pub query_id: usize,
    pub truth: Option<usize>,
    pub distribution: LabelDistribution,
    pub prompt_fingerprint: String,
    pub demo_ids: Vec<usize>,
    pub hidden_hash: Option<String>,
    pub flags: Vec<QueryFlag>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub dataset: String,
    pub method: Option<Method>,
    pub pass: Option<Pass>,
    /// `None` when a whole pass or dataset failed.
    pub query_id: Option<usize>,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub metrics: Option<MetricReport>,
    pub diag: Option<DiagnosticReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodResults {
    pub datasets: BTreeMap<String, CellResult>,
    pub average: CellResult,
}

/// Method name to per-dataset and averaged results.
pub type Results = BTreeMap<String, MethodResults>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProvenance {
    pub id: String,
    pub corpus_hash: String,
    pub sizes: crate::manifest::Sizes,
    pub malformed_rows: usize,
    pub dropped_empty: usize,
    pub dropped_overlength: usize,
    pub manifest: ManifestSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestSource {
    Loaded,
    Created,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub adapter_fingerprint: String,
    pub protocol_version: String,
    pub prng_contract: String,
    pub predictions_sha256: String,
    pub k: usize,
    pub bins: usize,
    pub suites: Vec<Suite>,
    pub methods: Vec<MethodConfig>,
    pub datasets: Vec<DatasetProvenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format_version: u32,
    pub complete: bool,
    pub provenance: Provenance,
    pub failures: Vec<Failure>,
    /// Values that could not be computed from the records, with the reason.
    pub unavailable: Vec<String>,
    pub results: Results,
    /// Gateway requests per method and dataset, all passes included.
    pub calls: BTreeMap<String, BTreeMap<String, CallCounts>>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn dataset_ids(&self) -> Vec<String> {
        self.provenance
            .datasets
            .iter()
            .map(|d| d.id.clone())
            .collect()
    }
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Recomputes every metric and diagnostic from prediction records. Returns
/// the results plus a list of values that could not be computed.
pub fn summarize(
    records: &[PredictionRecord],
    datasets: &[String],
    methods: &[Method],
    bins: usize,
    diag: bool,
) -> (Results, Vec<String>) {
    let mut by_cell: BTreeMap<(&str, Method), BTreeMap<Pass, Vec<&PredictionRecord>>> =
        BTreeMap::new();
    for r in records {
        by_cell
            .entry((r.dataset.as_str(), r.method))
            .or_default()
            .entry(r.pass)
            .or_default()
            .push(r);
    }
    let mut results = Results::new();
    let mut unavailable = Vec::new();
    let empty = BTreeMap::new();
    for &method in methods {
        let mut mr = MethodResults::default();
        for ds in datasets {
            let passes = by_cell.get(&(ds.as_str(), method)).unwrap_or(&empty);
            let mut note =
                |what: &str, why: String| unavailable.push(format!("{method}/{ds}/{what}: {why}"));
            let metrics = match passes.get(&Pass::Normal) {
                Some(recs) => match MetricReport::compute(&predictions(recs), bins) {
                    Ok(m) => Some(m),
                    Err(e) => {
                        note("metrics", e.to_string());
                        None
                    }
                },
                None => {
                    note("metrics", "no predictions".into());
                    None
                }
            };
            let diag_report = diag.then(|| diagnose(passes, &mut note));
            mr.datasets.insert(
                ds.clone(),
                CellResult {
                    metrics,
                    diag: diag_report,
                },
            );
        }
        mr.average = average_cell(&mr.datasets, datasets, diag, &mut |what, why| {
            unavailable.push(format!("{method}/average/{what}: {why}"))
        });
        results.insert(method.name().to_string(), mr);
    }
    (results, unavailable)
}

fn predictions(recs: &[&PredictionRecord]) -> Vec<Prediction> {
    recs.iter()
        .filter_map(|r| r.truth.map(|t| Prediction::new(r.distribution.clone(), t)))
        .collect()
}

fn outputs(recs: &[&PredictionRecord]) -> Vec<LabelDistribution> {
    recs.iter().map(|r| r.distribution.clone()).collect()
}

/// `runs[q]` = query `q`'s argmax across the given passes, in pass order.
fn argmax_runs(
    passes: &BTreeMap<Pass, Vec<&PredictionRecord>>,
    select: impl Fn(&Pass) -> bool,
) -> Vec<Vec<usize>> {
    let mut per_query: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (_, recs) in passes.iter().filter(|(p, _)| select(p)) {
        for r in recs {
            per_query
                .entry(r.query_id)
                .or_default()
                .push(r.distribution.argmax());
        }
    }
    per_query.into_values().collect()
}

fn diagnose(
    passes: &BTreeMap<Pass, Vec<&PredictionRecord>>,
    note: &mut dyn FnMut(&str, String),
) -> DiagnosticReport {
    let mut d = DiagnosticReport::default();
    let entropy =
        |pass: Pass, name: &str, note: &mut dyn FnMut(&str, String)| match passes.get(&pass) {
            Some(recs) => entropy_bias(&outputs(recs))
                .map_err(|e| note(name, e.to_string()))
                .ok(),
            None => {
                note(name, "no predictions".into());
                None
            }
        };
    d.contextual_bias = entropy(Pass::Contextual, "contextual_bias", note);
    d.domain_bias = entropy(Pass::Domain, "domain_bias", note);
    d.word_level_domain_sampling = d.domain_bias.is_some();
    d.empirical_bias = match passes.get(&Pass::Normal) {
        Some(recs) => {
            let truths: Vec<usize> = recs.iter().filter_map(|r| r.truth).collect();
            empirical_bias(&outputs(recs), &truths)
                .map_err(|e| note("empirical_bias", e.to_string()))
                .ok()
        }
        None => {
            note("empirical_bias", "no predictions".into());
            None
        }
    };
    let templates = argmax_runs(passes, |p| matches!(p, Pass::Template(_)));
    d.template_consistency = diagnostics::consistency(&templates, TEMPLATE_RUNS)
        .map_err(|e| note("template_consistency", e.to_string()))
        .ok();
    let sampling = argmax_runs(passes, |p| matches!(p, Pass::Sampling(_)));
    d.sampling_consistency = diagnostics::consistency(&sampling, SAMPLING_RUNS)
        .map_err(|e| note("sampling_consistency", e.to_string()))
        .ok();
    for (pass, recs) in passes {
        if let Some(p) = pass.noise_rate() {
            match staicc_core::metrics::accuracy(&predictions(recs)) {
                Ok((accuracy, _)) => d.accuracy_by_p.push(NoisePoint { p, accuracy }),
                Err(e) => note(&format!("accuracy at p={p}"), e.to_string()),
            }
        }
    }
    d.gler = gler(&d.accuracy_by_p)
        .map_err(|e| note("gler", e.to_string()))
        .ok();
    d
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = values.iter().copied().collect();
    let v = v?;
    (!v.is_empty()).then(|| staicc_core::distribution::pairwise_sum(&v) / v.len() as f64)
}

fn average_cell(
    cells: &BTreeMap<String, CellResult>,
    datasets: &[String],
    diag: bool,
    note: &mut dyn FnMut(&str, String),
) -> CellResult {
    let metric_rows: BTreeMap<String, MetricReport> = cells
        .iter()
        .filter_map(|(k, c)| c.metrics.clone().map(|m| (k.clone(), m)))
        .collect();
    let expected: Vec<&str> = datasets.iter().map(String::as_str).collect();
    let metrics = average_over_datasets(&metric_rows, &expected)
        .map_err(|e| note("metrics", e.to_string()))
        .ok();
    let diag = diag.then(|| {
        let reports: Vec<DiagnosticReport> = datasets
            .iter()
            .map(|d| {
                cells
                    .get(d)
                    .and_then(|c| c.diag.clone())
                    .unwrap_or_default()
            })
            .collect();
        let field = |f: fn(&DiagnosticReport) -> Option<f64>| {
            mean_of(&reports.iter().map(f).collect::<Vec<_>>())
        };
        // Refitting on the averaged accuracies equals averaging the slopes,
        // since OLS is linear in the response for a shared design.
        let grids: BTreeSet<Vec<u64>> = reports
            .iter()
            .map(|r| r.accuracy_by_p.iter().map(|pt| pt.p.to_bits()).collect())
            .collect();
        let accuracy_by_p: Vec<NoisePoint> = if grids.len() == 1 {
            let first = &reports[0].accuracy_by_p;
            (0..first.len())
                .map(|i| NoisePoint {
                    p: first[i].p,
                    accuracy: mean_of(
                        &reports
                            .iter()
                            .map(|r| Some(r.accuracy_by_p[i].accuracy))
                            .collect::<Vec<_>>(),
                    )
                    .unwrap_or(f64::NAN),
                })
                .collect()
        } else {
            Vec::new()
        };
        DiagnosticReport {
            contextual_bias: field(|r| r.contextual_bias),
            domain_bias: field(|r| r.domain_bias),
            empirical_bias: field(|r| r.empirical_bias),
            template_consistency: field(|r| r.template_consistency),
            sampling_consistency: field(|r| r.sampling_consistency),
            gler: gler(&accuracy_by_p).ok(),
            word_level_domain_sampling: reports.iter().all(|r| r.word_level_domain_sampling),
            accuracy_by_p,
        }
    });
    CellResult { metrics, diag }
}

/// A dataset ready to run.
pub struct PreparedDataset {
    pub tri: Trisection,
    pub bank: TemplateBank,
    pub provenance: DatasetProvenance,
}

/// Ingests, splits (or loads the split), and checks labels against the bank.
pub fn prepare_dataset(
    cfg: &RunConfig,
    index: usize,
    manifest_dir: &Path,
) -> Result<PreparedDataset, RunError> {
    let d = &cfg.datasets[index];
    let dataset = d.id.clone();
    let bank = crate::bank::resolve(&d.id, d.bank.as_deref()).map_err(|e| RunError::Dataset {
        dataset: dataset.clone(),
        message: e.to_string(),
    })?;
    let mut schema = d.schema.clone();
    schema
        .class_count
        .get_or_insert(bank.default.label_space.len());
    let ing = ingest(&d.raw, &schema).map_err(|source| RunError::Ingest {
        dataset: dataset.clone(),
        source,
    })?;
    if let Some(bad) = ing
        .records
        .iter()
        .find(|r| r.label >= bank.default.label_space.len())
    {
        return Err(RunError::Dataset {
            dataset,
            message: format!(
                "record {} has label {} outside the label space",
                bad.id, bad.label
            ),
        });
    }
    let sizes = d.split_sizes().map_err(|e| RunError::Dataset {
        dataset: dataset.clone(),
        message: e.to_string(),
    })?;
    let manifest_err = |source| RunError::Manifest {
        dataset: dataset.clone(),
        source,
    };
    let (manifest, tri, source) = match &d.manifest {
        Some(path) => {
            let m = SplitManifest::load(path).map_err(manifest_err)?;
            let tri = m.resolve(&ing.records).map_err(manifest_err)?;
            (m, tri, ManifestSource::Loaded)
        }
        None => {
            let (m, tri) = SplitManifest::create(&d.id, &ing.records, sizes, cfg.seeds.trisect)
                .map_err(manifest_err)?;
            let path = manifest_dir.join(format!("{}.json", d.id));
            m.save(&path).map_err(manifest_err)?;
            (m, tri, ManifestSource::Created)
        }
    };
    Ok(PreparedDataset {
        provenance: DatasetProvenance {
            id: d.id.clone(),
            corpus_hash: manifest.corpus_hash.clone(),
            sizes: manifest.sizes,
            malformed_rows: ing.malformed,
            dropped_empty: ing.dropped_empty,
            dropped_overlength: ing.dropped_overlength,
            manifest: source,
        },
        tri,
        bank,
    })
}

struct Cell<'a, G> {
    gw: &'a mut G,
    dataset: &'a str,
    cfg: &'a MethodConfig,
    records: Vec<PredictionRecord>,
    failures: Vec<Failure>,
}

impl<G: Gateway> Cell<'_, G> {
    fn fail(&mut self, pass: Option<Pass>, query_id: Option<usize>, error: String) {
        self.failures.push(Failure {
            dataset: self.dataset.into(),
            method: Some(self.cfg.method),
            pass,
            query_id,
            error,
        });
    }

    fn pass(
        &mut self,
        pass: Pass,
        ctx: &TaskContext<'_>,
        state: Option<&mut SharedState>,
        queries: Result<Vec<QueryInput>, String>,
    ) {
        let queries = match queries {
            Ok(q) => q,
            Err(e) => return self.fail(Some(pass), None, e),
        };
        let mut fresh;
        let state = match state {
            Some(s) => s,
            None => match SharedState::prepare(self.gw, ctx, self.cfg) {
                Ok(s) => {
                    fresh = s;
                    &mut fresh
                }
                Err(e) => return self.fail(Some(pass), None, e.to_string()),
            },
        };
        let outs = run_method(self.gw, ctx, self.cfg, state, &queries);
        for (q, out) in queries.iter().zip(outs) {
            match out {
                Ok(o) => self
                    .records
                    .push(record(self.dataset, self.cfg.method, pass, q, o)),
                Err(e) => self.fail(Some(pass), Some(q.query_id), e.to_string()),
            }
        }
    }
}

fn record(
    dataset: &str,
    method: Method,
    pass: Pass,
    q: &QueryInput,
    o: MethodOutput,
) -> PredictionRecord {
    PredictionRecord {
        dataset: dataset.into(),
        method,
        pass,
        query_id: q.query_id,
        truth: q.truth,
        distribution: o.distribution,
        prompt_fingerprint: hex(o.prompt_fingerprint),
        demo_ids: o.demo_ids,
        hidden_hash: o.hidden_hash.map(hex),
        flags: o.flags,
    }
}

fn run_cell<G: Gateway>(
    gw: &mut G,
    cfg: &RunConfig,
    data: &PreparedDataset,
    mcfg: &MethodConfig,
    templates: &[PromptTemplate],
) -> (Vec<PredictionRecord>, Vec<Failure>) {
    let tri = &data.tri;
    let mut cell = Cell {
        gw,
        dataset: &data.provenance.id,
        cfg: mcfg,
        records: Vec::new(),
        failures: Vec::new(),
    };
    let base = TaskContext::new(tri, &data.bank.default, cfg.k, cfg.seeds.seed_tag);
    let err = |e: staicc_core::methods::MethodError| e.to_string();
    // The normal pass's shared state also serves the pseudo-query passes,
    // which keep the same template, demonstrations and noise setting.
    let mut state = SharedState::prepare(cell.gw, &base, mcfg);
    if let Err(e) = &state {
        cell.fail(Some(Pass::Normal), None, e.to_string());
    }
    if cfg.has(Suite::Normal) || cfg.has(Suite::Diag) {
        if let Ok(st) = &mut state {
            cell.pass(
                Pass::Normal,
                &base,
                Some(st),
                base.test_queries().map_err(err),
            );
        }
    }
    if !cfg.has(Suite::Diag) {
        return (cell.records, cell.failures);
    }
    let n = tri.test.len();
    let empties = vec![String::new(); n];
    if let Ok(st) = &mut state {
        let q = base
            .pseudo_queries(PseudoQueryKind::Empty, &empties)
            .map_err(err);
        cell.pass(Pass::Contextual, &base, Some(st), q);
        let vocab = DomainVocabulary::from_records(&tri.calibration);
        let texts = diagnostics::pseudo_queries(
            PseudoQueryKind::DomainSampled,
            n,
            &vocab,
            mcfg.domain_query_len,
            cfg.seeds.pseudo,
        )
        .map_err(|e| e.to_string())
        .and_then(|ps| {
            let texts: Vec<String> = ps.into_iter().map(|p| p.text).collect();
            base.pseudo_queries(PseudoQueryKind::DomainSampled, &texts)
                .map_err(err)
        });
        cell.pass(Pass::Domain, &base, Some(st), texts);
    }
    for (i, t) in templates.iter().enumerate() {
        let ctx = TaskContext::new(tri, t, cfg.k, cfg.seeds.seed_tag);
        cell.pass(
            Pass::Template(i),
            &ctx,
            None,
            ctx.test_queries().map_err(err),
        );
    }
    for s in 0..SAMPLING_RUNS as u64 {
        let ctx = TaskContext::new(tri, &data.bank.default, cfg.k, s);
        cell.pass(
            Pass::Sampling(s),
            &ctx,
            None,
            ctx.test_queries().map_err(err),
        );
    }
    for (i, p) in NOISE_RATES.iter().enumerate() {
        let ctx = base.clone().with_noise(Some(NoiseSetting {
            p: *p,
            seed: cfg.seeds.noise,
        }));
        cell.pass(Pass::Noise(i), &ctx, None, ctx.test_queries().map_err(err));
    }
    (cell.records, cell.failures)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellTiming {
    pub dataset: String,
    pub method: Method,
    pub seconds: f64,
}

/// Wall-clock data kept out of the reproducible report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub started_unix: u64,
    pub finished_unix: u64,
    pub total_seconds: f64,
    pub cells: Vec<CellTiming>,
    pub cache_hits: Option<u64>,
    pub cache_misses: Option<u64>,
}

pub struct RunOutcome {
    pub report: EvaluationReport,
    pub meta: RunMeta,
    pub output_dir: PathBuf,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Executes the configured suites and writes all outputs.
pub fn run(cfg: &RunConfig, gateway: Box<dyn Gateway>) -> Result<RunOutcome, RunError> {
    let started = Instant::now();
    let started_unix = unix_now();
    let out = cfg.output_dir.clone();
    let manifest_dir = out.join("manifests");
    std::fs::create_dir_all(&manifest_dir).map_err(io_err(&manifest_dir))?;

    let data: Vec<PreparedDataset> = (0..cfg.datasets.len())
        .map(|i| prepare_dataset(cfg, i, &manifest_dir))
        .collect::<Result<_, _>>()?;

    let adapter_fingerprint = gateway.fingerprint();
    let mut gw = gateway;
    let mut cache_stats = None;
    if let Some(path) = &cfg.cache {
        let c = CachedGateway::open(gw, path).map_err(io_err(path))?;
        cache_stats = Some(c.stats());
        gw = Box::new(c);
    }
    let mut gw = CountingGateway::new(gw);

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut calls: BTreeMap<String, BTreeMap<String, CallCounts>> = BTreeMap::new();
    let mut timings = Vec::new();
    for d in &data {
        let id = &d.provenance.id;
        let label_space = &d.bank.default.label_space;
        if let Err(e) = gw.check_verbalizers(label_space) {
            failures.push(Failure {
                dataset: id.clone(),
                method: None,
                pass: None,
                query_id: None,
                error: e.to_string(),
            });
            continue;
        }
        let templates = if cfg.has(Suite::Diag) {
            match l9_templates(&d.bank) {
                Ok(t) => t,
                Err(e) => {
                    failures.push(Failure {
                        dataset: id.clone(),
                        method: None,
                        pass: None,
                        query_id: None,
                        error: e.to_string(),
                    });
                    Vec::new()
                }
            }
        } else {
            Vec::new()
        };
        for mcfg in &cfg.methods {
            let t0 = Instant::now();
            let (recs, fails) = run_cell(&mut gw, cfg, d, mcfg, &templates);
            records.extend(recs);
            failures.extend(fails);
            calls
                .entry(mcfg.method.name().to_string())
                .or_default()
                .insert(id.clone(), gw.take_counts());
            timings.push(CellTiming {
                dataset: id.clone(),
                method: mcfg.method,
                seconds: t0.elapsed().as_secs_f64(),
            });
        }
    }

    let cache_hits = cache_stats.as_ref().map(|s| s.hits());
    let cache_misses = cache_stats.as_ref().map(|s| s.misses());

    let pred_path = out.join(PREDICTIONS_FILE);
    let bytes = encode_records(&records);
    std::fs::write(&pred_path, &bytes).map_err(io_err(&pred_path))?;

    let dataset_ids: Vec<String> = data.iter().map(|d| d.provenance.id.clone()).collect();
    let methods: Vec<Method> = cfg.methods.iter().map(|m| m.method).collect();
    let (results, unavailable) = summarize(
        &records,
        &dataset_ids,
        &methods,
        cfg.bins,
        cfg.has(Suite::Diag),
    );
    let mut suites = cfg.suites.clone();
    suites.sort();
    suites.dedup();
    let report = EvaluationReport {
        format_version: REPORT_FORMAT,
        complete: failures.is_empty() && unavailable.is_empty(),
        provenance: Provenance {
            config_hash: cfg.hash(),
            adapter_fingerprint,
            protocol_version: PROTOCOL_VERSION.into(),
            prng_contract: PRNG_CONTRACT.into(),
            predictions_sha256: sha256_hex(&bytes),
            k: cfg.k,
            bins: cfg.bins,
            suites,
            methods: cfg.methods.clone(),
            datasets: data.iter().map(|d| d.provenance.clone()).collect(),
        },
        failures,
        unavailable,
        results,
        calls,
    };
    write(&out.join(REPORT_FILE), report.to_json().as_bytes())?;
    write(&out.join(TABLE_FILE), render_table(&report).as_bytes())?;
    let meta = RunMeta {
        started_unix,
        finished_unix: unix_now(),
        total_seconds: started.elapsed().as_secs_f64(),
        cells: timings,
        cache_hits,
        cache_misses,
    };
    let mut meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    meta_json.push('\n');
    write(&out.join(META_FILE), meta_json.as_bytes())?;
    drop(gw);
    Ok(RunOutcome {
        report,
        meta,
        output_dir: out,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn encode_records(records: &[PredictionRecord]) -> Vec<u8> {
    let mut w = BufWriter::new(Vec::new());
    for r in records {
        serde_json::to_writer(&mut w, r).expect("record serializes");
        w.write_all(b"\n").expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>, String> {
    let f = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| format!("{}: {e}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

/// Outcome of `verify`: recomputed values against the stored report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verification {
    pub mismatches: Vec<String>,
}

impl Verification {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Recomputes the report's results from the prediction file next to it.
pub fn verify(report_path: &Path, predictions_path: &Path) -> Result<Verification, String> {
    let report = EvaluationReport::load(report_path)?;
    let bytes = std::fs::read(predictions_path)
        .map_err(|e| format!("{}: {e}", predictions_path.display()))?;
    let records = read_records(predictions_path)?;
    let methods: Vec<Method> = report.provenance.methods.iter().map(|m| m.method).collect();
    let (results, unavailable) = summarize(
        &records,
        &report.dataset_ids(),
        &methods,
        report.provenance.bins,
        report.provenance.suites.contains(&Suite::Diag),
    );
    let mut mismatches = Vec::new();
    if sha256_hex(&bytes) != report.provenance.predictions_sha256 {
        mismatches.push("predictions file hash differs from the report".into());
    }
    if unavailable != report.unavailable {
        mismatches.push("list of unavailable values differs".into());
    }
    let stored = serde_json::to_value(&report.results).expect("results serialize");
    let fresh = serde_json::to_value(&results).expect("results serialize");
    if let (Some(s), Some(f)) = (stored.as_object(), fresh.as_object()) {
        let keys: BTreeSet<&String> = s.keys().chain(f.keys()).collect();
        for k in keys {
            if s.get(k) != f.get(k) {
                mismatches.push(format!("results for method {k} differ"));
            }
        }
    }
    Ok(Verification { mismatches })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x))
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Human-readable tables; percentages for metrics, raw values for diagnostics.
pub fn render_table(report: &EvaluationReport) -> String {
    let mut s = String::new();
    let p = &report.provenance;
    s.push_str(&format!(
        "config {}  adapter {}  protocol {}  k={}\n",
        &p.config_hash[..12.min(p.config_hash.len())],
        p.adapter_fingerprint,
        p.protocol_version,
        p.k
    ));
    s.push_str(if report.complete {
        "status: complete\n"
    } else {
        "status: INCOMPLETE\n"
    });
    let ids = report.dataset_ids();
    let width = ids.iter().map(String::len).max().unwrap_or(0).max(7);
    for (method, mr) in &report.results {
        s.push_str(&format!("\n== {method} ==\n"));
        s.push_str(&format!(
            "{:<width$}  {:>8} {:>8} {:>8} {:>8}\n",
            "dataset", "acc%", "tlp%", "maF1%", "ece1%"
        ));
        let rows = ids
            .iter()
            .map(|d| (d.as_str(), mr.datasets.get(d)))
            .chain(std::iter::once(("average", Some(&mr.average))));
        for (name, cell) in rows.clone() {
            let m = cell.and_then(|c| c.metrics.as_ref());
            s.push_str(&format!(
                "{:<width$}  {:>8} {:>8} {:>8} {:>8}\n",
                name,
                pct(m.map(|m| m.accuracy)),
                pct(m.map(|m| m.tlp)),
                pct(m.map(|m| m.macro_f1)),
                pct(m.map(|m| m.ece1)),
            ));
        }
        if p.suites.contains(&Suite::Diag) {
            s.push_str(&format!(
                "{:<width$}  {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
                "diag", "cont", "dom", "emp", "tmpl%", "samp%", "gler", "gler/0.1"
            ));
            for (name, cell) in rows {
                let d = cell.and_then(|c| c.diag.as_ref());
                let g = d.and_then(|d| d.gler);
                s.push_str(&format!(
                    "{:<width$}  {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
                    name,
                    num(d.and_then(|d| d.contextual_bias)),
                    num(d.and_then(|d| d.domain_bias)),
                    num(d.and_then(|d| d.empirical_bias)),
                    pct(d.and_then(|d| d.template_consistency)),
                    pct(d.and_then(|d| d.sampling_consistency)),
                    num(g.map(|g| g.gler)),
                    num(g.map(|g| g.gler_per_tenth)),
                ));
            }
        }
    }
    if !report.failures.is_empty() {
        s.push_str(&format!("\n{} failure(s):\n", report.failures.len()));
        for f in &report.failures {
            s.push_str(&format!(
                "  {} {} {} {}: {}\n",
                f.dataset,
                f.method.map_or("-".into(), |m| m.to_string()),
                f.pass.map_or("-".into(), |p| p.to_string()),
                f.query_id.map_or("-".into(), |q| q.to_string()),
                f.error
            ));
        }
    }
    if !report.unavailable.is_empty() {
        s.push_str("\nunavailable:\n");
        for u in &report.unavailable {
            s.push_str(&format!("  {u}\n"));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_names_round_trip() {
        let all = [
            Pass::Normal,
            Pass::Contextual,
            Pass::Domain,
            Pass::Template(8),
            Pass::Sampling(3),
            Pass::Noise(0),
            Pass::Noise(1),
            Pass::Noise(4),
        ];
        for p in all {
            assert_eq!(p.to_string().parse::<Pass>().unwrap(), p);
        }
        assert_eq!(Pass::Noise(1).to_string(), "noise/0.25");
        assert!("noise/0.3".parse::<Pass>().is_err());
    }

    fn rec(
        ds: &str,
        pass: Pass,
        q: usize,
        truth: Option<usize>,
        probs: &[f64],
    ) -> PredictionRecord {
        PredictionRecord {
            dataset: ds.into(),
            method: Method::Vanilla,
            pass,
            query_id: q,
            truth,
            distribution: LabelDistribution::new(probs.to_vec()).unwrap(),
            prompt_fingerprint: hex(0),
            demo_ids: vec![],
            hidden_hash: None,
            flags: vec![],
        }
    }

    #[test]
    fn summarize_averages_datasets_and_flags_missing_values() {
        let recs = vec![
            rec("a", Pass::Normal, 0, Some(0), &[0.9, 0.1]),
            rec("a", Pass::Normal, 1, Some(1), &[0.2, 0.8]),
            rec("b", Pass::Normal, 0, Some(0), &[0.4, 0.6]),
            rec("b", Pass::Normal, 1, Some(1), &[0.3, 0.7]),
        ];
        let ds = vec!["a".to_string(), "b".to_string()];
        let (res, missing) = summarize(&recs, &ds, &[Method::Vanilla], 10, false);
        let v = &res["vanilla"];
        assert_eq!(v.datasets["a"].metrics.as_ref().unwrap().accuracy, 1.0);
        assert_eq!(v.datasets["b"].metrics.as_ref().unwrap().accuracy, 0.5);
        assert_eq!(v.average.metrics.as_ref().unwrap().accuracy, 0.75);
        assert!(missing.is_empty());

        let (_, missing) = summarize(&recs, &ds, &[Method::Vanilla], 10, true);
        assert!(missing.iter().any(|m| m.contains("contextual_bias")));
        assert!(missing.iter().any(|m| m.contains("gler")));
    }

    #[test]
    fn gler_comes_from_noise_passes() {
        let mut recs = Vec::new();
        // Accuracy 1, 1, 0.5, 0.5, 0 at the five noise rates.
        let correct = [
            [true, true],
            [true, true],
            [true, false],
            [false, true],
            [false, false],
        ];
        for (i, row) in correct.iter().enumerate() {
            for (q, ok) in row.iter().enumerate() {
                let probs = if *ok { [0.8, 0.2] } else { [0.2, 0.8] };
                recs.push(rec("a", Pass::Noise(i), q, Some(0), &probs));
            }
        }
        let (res, _) = summarize(&recs, &["a".to_string()], &[Method::Vanilla], 10, true);
        let g = res["vanilla"].datasets["a"]
            .diag
            .as_ref()
            .unwrap()
            .gler
            .unwrap();
        // By hand: x̄=0.5, ȳ=0.6, Sxy=-0.625, Sxx=0.625.
        assert!((g.beta + 1.0).abs() < 1e-12);
        assert!((g.intercept - 1.1).abs() < 1e-12);
        assert!((g.gler_per_tenth - 10.0).abs() < 1e-9);
    }
}
