//! Cross-run analyses and plots: log-linear scaling fits, Spearman
//! correlation between metrics across models, and per-report charts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use staicc_core::analysis::{scaling_fit, spearman_matrix, ScalingFit};
use staicc_core::Method;
use thiserror::Error;

use crate::runner::{CellResult, EvaluationReport};
use crate::svg::{Chart, Series};

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("report {0} is incomplete; rerun or fix failures before aggregating")]
    Incomplete(String),
    #[error("report {name} has no results for method {method}")]
    MissingMethod { name: String, method: Method },
    #[error("no reports given")]
    NoReports,
    #[error("write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Metric names in display order.
pub const METRICS: [&str; 10] = [
    "accuracy",
    "tlp",
    "macro_f1",
    "ece1",
    "contextual_bias",
    "domain_bias",
    "empirical_bias",
    "template_consistency",
    "sampling_consistency",
    "gler",
];

/// Averaged metric and diagnostic values of one cell, by name.
pub fn cell_values(cell: &CellResult) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if let Some(m) = &cell.metrics {
        out.insert("accuracy".into(), m.accuracy);
        out.insert("tlp".into(), m.tlp);
        out.insert("macro_f1".into(), m.macro_f1);
        out.insert("ece1".into(), m.ece1);
    }
    if let Some(d) = &cell.diag {
        let opt = [
            ("contextual_bias", d.contextual_bias),
            ("domain_bias", d.domain_bias),
            ("empirical_bias", d.empirical_bias),
            ("template_consistency", d.template_consistency),
            ("sampling_consistency", d.sampling_consistency),
            ("gler", d.gler.map(|g| g.gler)),
        ];
        for (k, v) in opt {
            if let Some(v) = v {
                out.insert(k.into(), v);
            }
        }
    }
    out
}

/// One evaluated model.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub name: String,
    pub params: Option<f64>,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub name: String,
    pub params: Option<f64>,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpearmanTable {
    pub metrics: Vec<String>,
    /// `null` where a metric is constant across models.
    pub matrix: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub models: Vec<ModelRow>,
    pub scaling: BTreeMap<String, ScalingFit>,
    pub spearman: Option<SpearmanTable>,
    pub notes: Vec<String>,
}

/// Metrics present for every model, in display order.
fn common_metrics(rows: &[ModelRow]) -> Vec<String> {
    METRICS
        .iter()
        .filter(|m| rows.iter().all(|r| r.values.contains_key(**m)))
        .map(|m| m.to_string())
        .collect()
}

pub fn aggregate(models: &[ModelInput], method: Method) -> Result<Aggregate, AggregateError> {
    if models.is_empty() {
        return Err(AggregateError::NoReports);
    }
    let mut rows = Vec::new();
    for m in models {
        if !m.report.complete {
            return Err(AggregateError::Incomplete(m.name.clone()));
        }
        let cell =
            m.report
                .results
                .get(method.name())
                .ok_or_else(|| AggregateError::MissingMethod {
                    name: m.name.clone(),
                    method,
                })?;
        rows.push(ModelRow {
            name: m.name.clone(),
            params: m.params,
            values: cell_values(&cell.average),
        });
    }
    let metrics = common_metrics(&rows);
    let mut notes = Vec::new();
    let mut scaling = BTreeMap::new();
    let sized: Vec<&ModelRow> = rows.iter().filter(|r| r.params.is_some()).collect();
    if sized.is_empty() {
        notes.push("no parameter counts given; scaling fits skipped".into());
    }
    for metric in metrics.iter().filter(|_| !sized.is_empty()) {
        let pts: Vec<(f64, f64)> = sized
            .iter()
            .map(|r| (r.params.unwrap_or(0.0), r.values[metric]))
            .collect();
        match scaling_fit(&pts) {
            Ok(fit) => {
                scaling.insert(metric.clone(), fit);
            }
            Err(e) => notes.push(format!("scaling fit for {metric}: {e}")),
        }
    }
    let columns: Vec<Vec<f64>> = metrics
        .iter()
        .map(|m| rows.iter().map(|r| r.values[m]).collect())
        .collect();
    let spearman = match spearman_matrix(&columns) {
        Ok(matrix) => Some(SpearmanTable {
            metrics: metrics.clone(),
            matrix,
        }),
        Err(e) => {
            notes.push(format!("spearman matrix: {e}"));
            None
        }
    };
    Ok(Aggregate {
        method,
        models: rows,
        scaling,
        spearman,
        notes,
    })
}

fn write_file(path: PathBuf, text: &str) -> Result<PathBuf, AggregateError> {
    std::fs::write(&path, text).map_err(|source| AggregateError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Writes `aggregate.json` and one scaling chart per fitted metric.
pub fn write_aggregate(agg: &Aggregate, dir: &Path) -> Result<Vec<PathBuf>, AggregateError> {
    let mk = |source| AggregateError::Io {
        path: dir.into(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(mk)?;
    let mut json = serde_json::to_string_pretty(agg).expect("aggregate serializes");
    json.push('\n');
    let mut written = vec![write_file(dir.join("aggregate.json"), &json)?];
    for (metric, fit) in &agg.scaling {
        let points = agg
            .models
            .iter()
            .filter_map(|r| r.params.map(|p| (p.log10(), r.values[metric])))
            .collect();
        let chart = Chart {
            title: format!("{} {metric} vs model size", agg.method),
            x_label: "log10(parameters)".into(),
            y_label: metric.clone(),
            series: vec![Series {
                name: metric.clone(),
                points,
                line: false,
            }],
            fit: Some((fit.slope, fit.intercept)),
        };
        written.push(write_file(
            dir.join(format!("scaling-{metric}.svg")),
            &chart.render(),
        )?);
    }
    Ok(written)
}

/// Per-method reliability charts, plus accuracy-vs-noise charts when the
/// report has diagnostic data. Refuses incomplete reports.
pub fn export_plots(report: &EvaluationReport, dir: &Path) -> Result<Vec<PathBuf>, AggregateError> {
    if !report.complete {
        return Err(AggregateError::Incomplete(
            report.provenance.adapter_fingerprint.clone(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|source| AggregateError::Io {
        path: dir.into(),
        source,
    })?;
    let mut written = Vec::new();
    for (method, mr) in &report.results {
        let reliability: Vec<Series> = mr
            .datasets
            .iter()
            .filter_map(|(ds, c)| {
                c.metrics.as_ref().map(|m| Series {
                    name: ds.clone(),
                    points: m
                        .bins
                        .iter()
                        .filter(|b| b.count > 0)
                        .map(|b| (b.mean_confidence, b.accuracy))
                        .collect(),
                    line: true,
                })
            })
            .collect();
        if !reliability.is_empty() {
            let chart = Chart {
                title: format!("{method} reliability"),
                x_label: "confidence".into(),
                y_label: "accuracy".into(),
                series: reliability,
                fit: Some((1.0, 0.0)),
            };
            written.push(write_file(
                dir.join(format!("{method}-reliability.svg")),
                &chart.render(),
            )?);
        }
        let noise: Vec<Series> = mr
            .datasets
            .iter()
            .filter_map(|(ds, c)| c.diag.as_ref().map(|d| (ds, d)))
            .filter(|(_, d)| !d.accuracy_by_p.is_empty())
            .map(|(ds, d)| Series {
                name: ds.clone(),
                points: d
                    .accuracy_by_p
                    .iter()
                    .map(|pt| (pt.p, pt.accuracy))
                    .collect(),
                line: true,
            })
            .collect();
        if !noise.is_empty() {
            let chart = Chart {
                title: format!("{method} accuracy under label noise"),
                x_label: "label noise rate p".into(),
                y_label: "accuracy".into(),
                series: noise,
                fit: None,
            };
            written.push(write_file(
                dir.join(format!("{method}-noise.svg")),
                &chart.render(),
            )?);
        }
    }
    Ok(written)
}
