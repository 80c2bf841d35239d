//! Command-line front end.
//!
//! Exit codes: 0 success, 2 partial failure (incomplete run, verification
//! mismatch), 3 configuration or input error.

use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use staicc_core::mock::MockModel;
use staicc_core::templating::Dataset;
use staicc_core::{Gateway, Method};

use crate::adapter::{self, TransportOptions};
use crate::aggregate::{self, ModelInput};
use crate::config::{RunConfig, Suite};
use crate::ingest::{ingest, InputFormat, Schema};
use crate::manifest::{Sizes, SplitManifest};
use crate::runner::{self, EvaluationReport, PREDICTIONS_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "staicc",
    version,
    about = "Deterministic in-context classification evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a frozen calibration/demonstration/test split and write its manifest.
    Split(SplitArgs),
    /// Run the configured datasets and methods.
    Run(RunArgs),
    /// Recompute a report from its prediction records and compare.
    Verify(VerifyArgs),
    /// Scaling fits, Spearman matrix and plots over one or more reports.
    Aggregate(AggregateArgs),
    /// Serve the mock model over the wire protocol (stdio or HTTP).
    ServeMock(ServeMockArgs),
    /// Write a synthetic labeled corpus as CSV.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset id (one of the built-in ids, or any id with --sizes).
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// calibration,demonstration,test
    #[arg(long, value_parser = parse_sizes)]
    pub sizes: Option<Sizes>,
    #[arg(long, default_value = "text")]
    pub text_column: String,
    #[arg(long, default_value = "label")]
    pub label_column: String,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<InputFormat>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's adapter and the environment variable.
    #[arg(long)]
    pub adapter: Option<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Comma-separated subset of normal,diag.
    #[arg(long, value_delimiter = ',', value_parser = parse_suite)]
    pub suites: Option<Vec<Suite>>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub report: PathBuf,
    /// Defaults to predictions.jsonl next to the report.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Report files, each optionally suffixed with `:<parameter count>`.
    #[arg(required = true)]
    pub reports: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "vanilla")]
    pub method: Method,
}

#[derive(Debug, Args)]
pub struct ServeMockArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Copy the majority demonstration label instead of associating.
    #[arg(long)]
    pub majority: bool,
    /// Serve HTTP on 127.0.0.1:<port> instead of stdio.
    #[arg(long)]
    pub port: Option<u16>,
    /// Stop after this many HTTP posts.
    #[arg(long)]
    pub max_posts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Class count; taken from --dataset when omitted.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dataset: Option<Dataset>,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Give every record this label.
    #[arg(long)]
    pub constant_label: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_sizes(s: &str) -> Result<Sizes, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad size {p:?}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [calibration, demonstration, test] => Ok(Sizes {
            calibration,
            demonstration,
            test,
        }),
        _ => Err("expected calibration,demonstration,test".into()),
    }
}

fn parse_format(s: &str) -> Result<InputFormat, String> {
    match s {
        "csv" => Ok(InputFormat::Csv),
        "jsonl" => Ok(InputFormat::Jsonl),
        _ => Err(format!("unknown format {s:?}; expected csv or jsonl")),
    }
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    match s {
        "normal" => Ok(Suite::Normal),
        "diag" => Ok(Suite::Diag),
        _ => Err(format!("unknown suite {s:?}; expected normal or diag")),
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Split(a) => split(a),
        Command::Run(a) => run(a),
        Command::Verify(a) => verify(a),
        Command::Aggregate(a) => aggregate_cmd(a),
        Command::ServeMock(a) => serve_mock(a),
        Command::Synth(a) => synth(a),
    }
}

fn fail(code: i32, msg: impl std::fmt::Display) -> i32 {
    eprintln!("staicc: {msg}");
    code
}

fn split(a: SplitArgs) -> i32 {
    let sizes = match a.sizes {
        Some(s) => s.into(),
        None => match a.dataset.parse::<Dataset>() {
            Ok(d) => d.default_sizes(),
            Err(_) => {
                return fail(
                    EXIT_CONFIG,
                    format!("dataset {:?} needs --sizes", a.dataset),
                )
            }
        },
    };
    let schema = Schema {
        format: a.format,
        text: a.text_column,
        label: a.label_column,
        ..Schema::default()
    };
    let ing = match ingest(&a.raw, &schema) {
        Ok(i) => i,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    match SplitManifest::create(&a.dataset, &ing.records, sizes, a.seed) {
        Ok((m, _)) => match m.save(&a.out) {
            Ok(()) => {
                println!(
                    "{}: {} records ({} malformed, {} empty, {} over-length dropped) -> {}",
                    a.dataset,
                    ing.records.len(),
                    ing.malformed,
                    ing.dropped_empty,
                    ing.dropped_overlength,
                    a.out.display()
                );
                EXIT_OK
            }
            Err(e) => fail(EXIT_CONFIG, e),
        },
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

fn run(a: RunArgs) -> i32 {
    let mut cfg = match RunConfig::load(&a.config) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if let Some(ad) = a.adapter {
        cfg.adapter = Some(ad);
    }
    if let Some(o) = a.output {
        cfg.output_dir = o;
    }
    if let Some(b) = a.bins {
        cfg.bins = b;
    }
    if let Some(s) = a.suites {
        cfg.suites = s;
    }
    if let Some(c) = a.cache {
        cfg.cache = Some(c);
    }
    if let Err(e) = cfg.validate() {
        return fail(EXIT_CONFIG, e);
    }
    let spec = match adapter::configured(cfg.adapter.as_deref()) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let opts = TransportOptions {
        window: cfg.window,
        timeout: Duration::from_secs(cfg.timeout_secs),
    };
    let gw = match adapter::open(&spec, opts) {
        Ok(g) => g,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    match runner::run(&cfg, gw) {
        Ok(out) => {
            if !a.quiet {
                print!("{}", runner::render_table(&out.report));
                println!("outputs in {}", out.output_dir.display());
            }
            if out.report.complete {
                EXIT_OK
            } else {
                fail(
                    EXIT_PARTIAL,
                    format!(
                        "run incomplete: {} failure(s), {} unavailable value(s)",
                        out.report.failures.len(),
                        out.report.unavailable.len()
                    ),
                )
            }
        }
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

fn verify(a: VerifyArgs) -> i32 {
    let preds = a.predictions.unwrap_or_else(|| {
        a.report.parent().map_or_else(
            || PathBuf::from(PREDICTIONS_FILE),
            |d| d.join(PREDICTIONS_FILE),
        )
    });
    match runner::verify(&a.report, &preds) {
        Ok(v) if v.ok() => {
            println!("verified: every stored value matches the recomputation");
            EXIT_OK
        }
        Ok(v) => {
            for m in &v.mismatches {
                eprintln!("mismatch: {m}");
            }
            EXIT_PARTIAL
        }
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

/// `path` or `path:params`; a suffix that does not parse as a number is
/// taken as part of the path.
pub fn parse_report_arg(s: &str) -> (PathBuf, Option<f64>) {
    if let Some((p, n)) = s.rsplit_once(':') {
        if let Ok(v) = n.parse::<f64>() {
            return (PathBuf::from(p), Some(v));
        }
    }
    (PathBuf::from(s), None)
}

fn aggregate_cmd(a: AggregateArgs) -> i32 {
    let mut models = Vec::new();
    for arg in &a.reports {
        let (path, params) = parse_report_arg(arg);
        let report = match EvaluationReport::load(&path) {
            Ok(r) => r,
            Err(e) => return fail(EXIT_CONFIG, e),
        };
        models.push(ModelInput {
            name: report.provenance.adapter_fingerprint.clone(),
            params,
            report,
        });
    }
    for (i, m) in models.iter().enumerate() {
        let dir = a.out.join(format!("report-{i}"));
        if let Err(e) = aggregate::export_plots(&m.report, &dir) {
            return fail(EXIT_CONFIG, e);
        }
    }
    match aggregate::aggregate(&models, a.method).and_then(|agg| {
        for n in &agg.notes {
            eprintln!("note: {n}");
        }
        aggregate::write_aggregate(&agg, &a.out)
    }) {
        Ok(files) => {
            println!("wrote {} file(s) to {}", files.len(), a.out.display());
            EXIT_OK
        }
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

fn serve_mock(a: ServeMockArgs) -> i32 {
    let mut gw: Box<dyn Gateway> = if a.majority {
        Box::new(MockModel::majority_copy(a.seed))
    } else {
        Box::new(MockModel::new(a.seed))
    };
    let result = match a.port {
        Some(port) => match tiny_http::Server::http(("127.0.0.1", port)) {
            Ok(server) => {
                eprintln!("serving on http://127.0.0.1:{port}/");
                crate::transport::serve_http(&mut gw, &server, a.max_posts)
            }
            Err(e) => return fail(EXIT_CONFIG, format!("bind 127.0.0.1:{port}: {e}")),
        },
        None => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            crate::transport::serve(&mut gw, BufReader::new(stdin.lock()), stdout.lock())
                .map(|_| ())
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => fail(EXIT_PARTIAL, e),
    }
}

fn synth(a: SynthArgs) -> i32 {
    let classes = match (a.classes, a.dataset) {
        (Some(c), _) if c > 0 => c,
        (None, Some(d)) => d.class_count(),
        _ => return fail(EXIT_CONFIG, "give --classes (at least 1) or --dataset"),
    };
    if a.constant_label.is_some_and(|l| l >= classes) {
        return fail(
            EXIT_CONFIG,
            "--constant-label must be below the class count",
        );
    }
    let records = crate::synth::synth_records(classes, a.n, a.seed, a.constant_label);
    match crate::synth::write_csv(&a.out, &records) {
        Ok(()) => {
            let _ = writeln!(
                std::io::stdout(),
                "{} records -> {}",
                records.len(),
                a.out.display()
            );
            EXIT_OK
        }
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_args_and_sizes() {
        assert_eq!(
            parse_report_arg("a/r.json:1.2e8"),
            (PathBuf::from("a/r.json"), Some(1.2e8))
        );
        assert_eq!(
            parse_report_arg("c:/x/r.json"),
            (PathBuf::from("c:/x/r.json"), None)
        );
        assert_eq!(
            parse_sizes("1,2,3").unwrap(),
            Sizes {
                calibration: 1,
                demonstration: 2,
                test: 3
            }
        );
        assert!(parse_sizes("1,2").is_err());
    }

    #[test]
    fn usage_errors_are_config_errors() {
        assert_eq!(main_with(["staicc", "run"]), EXIT_CONFIG);
        assert_eq!(main_with(["staicc", "--help"]), EXIT_OK);
    }
}
