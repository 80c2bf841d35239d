//! Raw dataset ingestion from CSV or JSON lines.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use staicc_core::corpus::{filter, SampleRecord, DEFAULT_MAX_CHARS};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot infer format from extension; set `format` in the schema")]
    UnknownFormat { path: PathBuf },
    #[error("row {row}: label {label:?} is outside the declared class set")]
    UnknownLabel { row: usize, label: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Csv,
    Jsonl,
}

fn default_text() -> String {
    "text".into()
}
fn default_label() -> String {
    "label".into()
}
fn default_max_chars() -> usize {
    DEFAULT_MAX_CHARS
}

/// Column mapping for a raw file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(default)]
    pub format: Option<InputFormat>,
    #[serde(default = "default_text")]
    pub text: String,
    #[serde(default = "default_label")]
    pub label: String,
    /// Raw label value to class index. Without it labels must be integers.
    #[serde(default)]
    pub label_map: Option<BTreeMap<String, usize>>,
    /// Upper bound for integer labels when no map is given.
    #[serde(default)]
    pub class_count: Option<usize>,
    #[serde(default = "default_max_chars")]
    pub max_chars: usize,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            format: None,
            text: default_text(),
            label: default_label(),
            label_map: None,
            class_count: None,
            max_chars: default_max_chars(),
        }
    }
}

impl Schema {
    fn resolve_format(&self, path: &Path) -> Result<InputFormat, IngestError> {
        if let Some(f) = self.format {
            return Ok(f);
        }
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(InputFormat::Csv),
            Some("jsonl" | "ndjson") => Ok(InputFormat::Jsonl),
            _ => Err(IngestError::UnknownFormat { path: path.into() }),
        }
    }

    /// `None` for values that do not parse at all (a malformed row);
    /// `Some(Err)` for well-formed labels outside the class set.
    fn resolve_label(&self, raw: &str, row: usize) -> Option<Result<usize, IngestError>> {
        let unknown = || {
            Err(IngestError::UnknownLabel {
                row,
                label: raw.into(),
            })
        };
        if let Some(map) = &self.label_map {
            return Some(map.get(raw).copied().map_or_else(unknown, Ok));
        }
        let idx: usize = raw.trim().parse().ok()?;
        match self.class_count {
            Some(c) if idx >= c => Some(unknown()),
            _ => Some(Ok(idx)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ingested {
    pub records: Vec<SampleRecord>,
    pub malformed: usize,
    pub dropped_empty: usize,
    pub dropped_overlength: usize,
}

/// Reads a raw file. Well-formed rows get sequential ids in file order;
/// malformed rows are skipped and counted; empty or over-length texts are
/// then filtered out (ids are kept).
pub fn ingest(path: &Path, schema: &Schema) -> Result<Ingested, IngestError> {
    let io = |source| IngestError::Io {
        path: path.into(),
        source,
    };
    let format = schema.resolve_format(path)?;
    let file = File::open(path).map_err(io)?;
    let mut raw = Vec::new();
    let mut malformed = 0;
    match format {
        InputFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(file);
            let headers = rdr.headers().map_err(|e| io(e.into()))?.clone();
            let text_col = headers.iter().position(|h| h == schema.text);
            let label_col = headers.iter().position(|h| h == schema.label);
            for (i, row) in rdr.records().enumerate() {
                let row_no = i + 2; // header is row 1
                let fields = row.ok().and_then(|r| {
                    Some((
                        r.get(text_col?)?.to_string(),
                        r.get(label_col?)?.to_string(),
                    ))
                });
                match fields {
                    Some((text, label)) => raw.push((row_no, text, label)),
                    None => malformed += 1,
                }
            }
        }
        InputFormat::Jsonl => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let row_no = i + 1;
                let fields = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| {
                        let text = v.get(&schema.text)?.as_str()?.to_string();
                        let label = match v.get(&schema.label)? {
                            serde_json::Value::String(s) => s.clone(),
                            serde_json::Value::Number(n) => n.to_string(),
                            _ => return None,
                        };
                        Some((text, label))
                    });
                match fields {
                    Some((text, label)) => raw.push((row_no, text, label)),
                    None => malformed += 1,
                }
            }
        }
    }
    let mut records = Vec::with_capacity(raw.len());
    for (row, text, label) in raw {
        match schema.resolve_label(&label, row) {
            Some(Ok(label)) => records.push(SampleRecord {
                id: records.len(),
                text,
                label,
            }),
            Some(Err(e)) => return Err(e),
            None => malformed += 1,
        }
    }
    let out = filter(records, schema.max_chars);
    Ok(Ingested {
        records: out.kept,
        malformed,
        dropped_empty: out.dropped_empty,
        dropped_overlength: out.dropped_overlength,
    })
}

/// Writes records as JSON lines under the schema's column names, mapping
/// labels back through the label map when there is one.
pub fn export_jsonl<W: Write>(
    out: &mut W,
    records: &[SampleRecord],
    schema: &Schema,
) -> std::io::Result<()> {
    let inverse: Option<BTreeMap<usize, &String>> = schema
        .label_map
        .as_ref()
        .map(|m| m.iter().map(|(k, v)| (*v, k)).collect());
    for r in records {
        let label = match &inverse {
            Some(inv) => serde_json::Value::String(
                inv.get(&r.label)
                    .map_or_else(|| r.label.to_string(), |s| (*s).clone()),
            ),
            None => serde_json::Value::from(r.label),
        };
        let mut obj = serde_json::Map::new();
        obj.insert(schema.text.clone(), r.text.clone().into());
        obj.insert(schema.label.clone(), label);
        writeln!(out, "{}", serde_json::Value::Object(obj))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn csv_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "d.csv",
            "text,label\ngood,1\nbad,0\n\"fine, really\",1\n",
        );
        let got = ingest(&p, &Schema::default()).unwrap();
        assert_eq!(
            got.records.iter().map(|r| r.id).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert_eq!(got.records[2].text, "fine, really");
    }

    #[test]
    fn empty_text_is_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "text,label\ngood,1\n,0\nbad,0\n");
        let got = ingest(&p, &Schema::default()).unwrap();
        assert_eq!(got.records.len(), 2);
        assert_eq!(got.dropped_empty, 1);
        assert_eq!(got.records[1].id, 2);
    }

    #[test]
    fn malformed_rows_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "d.jsonl",
            "{\"text\":\"a\",\"label\":0}\nnot json\n{\"text\":\"b\"}\n{\"text\":\"c\",\"label\":\"x\"}\n",
        );
        let got = ingest(&p, &Schema::default()).unwrap();
        assert_eq!(got.records.len(), 1);
        assert_eq!(got.malformed, 3);
    }

    #[test]
    fn unknown_label_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "d.jsonl",
            "{\"text\":\"a\",\"label\":\"pos\"}\n{\"text\":\"b\",\"label\":\"meh\"}\n",
        );
        let schema = Schema {
            label_map: Some([("pos".to_string(), 0), ("neg".to_string(), 1)].into()),
            ..Schema::default()
        };
        let err = ingest(&p, &schema).unwrap_err();
        assert!(
            matches!(err, IngestError::UnknownLabel { row: 2, .. }),
            "{err}"
        );
        let bounded = Schema {
            class_count: Some(2),
            ..Schema::default()
        };
        let p = write(dir.path(), "e.csv", "text,label\na,0\nb,5\n");
        assert!(matches!(
            ingest(&p, &bounded),
            Err(IngestError::UnknownLabel { row: 3, .. })
        ));
    }

    #[test]
    fn mapped_jsonl_round_trips_through_export() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (0..10)
            .map(|i| {
                format!(
                    "{{\"label\":\"{}\",\"text\":\"row {i}\"}}\n",
                    if i % 3 == 0 { "pos" } else { "neg" }
                )
            })
            .collect();
        let p = write(dir.path(), "d.jsonl", &body);
        let schema = Schema {
            label_map: Some([("pos".to_string(), 0), ("neg".to_string(), 1)].into()),
            ..Schema::default()
        };
        let first = ingest(&p, &schema).unwrap();
        assert_eq!(first.records[0].label, 0);
        assert_eq!(first.records[1].label, 1);
        let mut buf = Vec::new();
        export_jsonl(&mut buf, &first.records, &schema).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), body);
        let q = write(dir.path(), "e.jsonl", std::str::from_utf8(&buf).unwrap());
        assert_eq!(ingest(&q, &schema).unwrap(), first);
    }

    #[test]
    fn hundred_records_seven_overlength() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("text,label\n");
        for i in 0..100 {
            let len = if i % 14 == 3 { 2049 } else { 40 };
            body.push_str(&format!("{},{}\n", "x".repeat(len), i % 2));
        }
        let p = write(dir.path(), "d.csv", &body);
        let got = ingest(&p, &Schema::default()).unwrap();
        assert_eq!(got.dropped_overlength, 7);
        assert_eq!(got.records.len(), 93);
    }
}
