//! Run configuration (TOML).
//!
//! ```toml
//! k = 4
//! adapter = "mock:0"          # else $STAICC_ADAPTER
//! suites = ["normal", "diag"]
//! output_dir = "out"
//!
//! [seeds]
//! trisect = 0
//! seed_tag = 0
//! noise = 0
//!
//! [[datasets]]
//! id = "sst2"
//! raw = "data/sst2.csv"
//! schema = { text = "sentence", label = "label" }
//! sizes = { calibration = 64, demonstration = 64, test = 32 }  # default: the built-in table
//!
//! [[methods]]
//! method = "vanilla"
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use staicc_core::corpus::{SplitSizes, DEFAULT_K};
use staicc_core::metrics::DEFAULT_BINS;
use staicc_core::templating::Dataset;
use staicc_core::MethodConfig;
use thiserror::Error;

use crate::ingest::Schema;
use crate::manifest::Sizes;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Normal,
    Diag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub trisect: u64,
    #[serde(default)]
    pub seed_tag: u64,
    #[serde(default)]
    pub noise: u64,
    /// Seed of the domain-sampled diagnostic pseudo queries.
    #[serde(default)]
    pub pseudo: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub id: String,
    pub raw: PathBuf,
    #[serde(default)]
    pub schema: Schema,
    /// A stored split manifest; without one the split is drawn from `raw`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub sizes: Option<Sizes>,
    /// Template bank file; defaults to the built-in bank for `id`.
    #[serde(default)]
    pub bank: Option<PathBuf>,
}

impl DatasetConfig {
    pub fn split_sizes(&self) -> Result<SplitSizes, ConfigError> {
        if let Some(s) = self.sizes {
            return Ok(s.into());
        }
        self.id
            .parse::<Dataset>()
            .map(Dataset::default_sizes)
            .map_err(|_| {
                ConfigError::Invalid(format!("dataset {:?} needs explicit sizes", self.id))
            })
    }
}

fn default_k() -> usize {
    DEFAULT_K
}
fn default_bins() -> usize {
    DEFAULT_BINS
}
fn default_suites() -> Vec<Suite> {
    vec![Suite::Normal]
}
fn default_window() -> usize {
    crate::transport::DEFAULT_WINDOW
}
fn default_timeout() -> u64 {
    crate::transport::DEFAULT_TIMEOUT.as_secs()
}
fn default_output() -> PathBuf {
    PathBuf::from("staicc-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub datasets: Vec<DatasetConfig>,
    pub methods: Vec<MethodConfig>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub adapter: Option<String>,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_suites")]
    pub suites: Vec<Suite>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.datasets.is_empty() {
            return bad("no datasets".into());
        }
        if self.methods.is_empty() {
            return bad("no methods".into());
        }
        if self.bins == 0 {
            return bad("bins must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if self.datasets[..i].iter().any(|e| e.id == d.id) {
                return bad(format!("dataset {:?} listed twice", d.id));
            }
            d.split_sizes()?;
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].iter().any(|e| e.method == m.method) {
                return bad(format!("method {} listed twice", m.method));
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for d in &mut self.datasets {
            fix(&mut d.raw);
            if let Some(m) = &mut d.manifest {
                fix(m);
            }
            if let Some(b) = &mut d.bank {
                fix(b);
            }
        }
        fix(&mut self.output_dir);
        if let Some(c) = &mut self.cache {
            fix(c);
        }
    }

    pub fn has(&self, suite: Suite) -> bool {
        self.suites.contains(&suite)
    }

    /// SHA-256 over the settings that can change results. Paths, output
    /// location, cache and transport tuning are left out, so relocating a
    /// run does not change its hash.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Semantic<'a> {
            datasets: Vec<(&'a str, &'a Schema, Option<Sizes>)>,
            methods: &'a [MethodConfig],
            k: usize,
            adapter: Option<&'a str>,
            seeds: Seeds,
            suites: Vec<Suite>,
            bins: usize,
        }
        let mut suites = self.suites.clone();
        suites.sort();
        suites.dedup();
        let view = Semantic {
            datasets: self
                .datasets
                .iter()
                .map(|d| (d.id.as_str(), &d.schema, d.sizes))
                .collect(),
            methods: &self.methods,
            k: self.k,
            adapter: self.adapter.as_deref(),
            seeds: self.seeds,
            suites,
            bins: self.bins,
        };
        let digest = Sha256::digest(serde_json::to_vec(&view).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use staicc_core::Method;

    const SAMPLE: &str = r#"
k = 4
adapter = "mock:1"
suites = ["normal", "diag"]

[[datasets]]
id = "sst2"
raw = "sst2.csv"
sizes = { calibration = 8, demonstration = 8, test = 8 }

[[datasets]]
id = "fp"
raw = "/abs/fp.jsonl"
schema = { text = "sentence", label_map = { negative = 1, positive = 0, neutral = 2 } }

[[methods]]
method = "vanilla"

[[methods]]
method = "domain_cal"
extra_samples = 32
"#;

    #[test]
    fn parses_defaults_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, SAMPLE).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.datasets[0].raw, dir.path().join("sst2.csv"));
        assert_eq!(cfg.datasets[1].raw, PathBuf::from("/abs/fp.jsonl"));
        assert_eq!(
            cfg.datasets[1].split_sizes().unwrap(),
            SplitSizes::new(1024, 512, 512)
        );
        assert_eq!(cfg.methods[1].method, Method::DomainCal);
        assert_eq!(cfg.methods[1].extra_samples, 32);
        assert_eq!(cfg.methods[1].batch_size, 128);
        assert_eq!(cfg.bins, 10);
        assert!(cfg.has(Suite::Diag));
    }

    #[test]
    fn hash_ignores_location_but_not_settings() {
        let a = RunConfig::from_toml(SAMPLE).unwrap();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.datasets[0].raw = "/moved/sst2.csv".into();
        assert_eq!(a.hash(), b.hash());
        b.k = 8;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_unknown_sizes_and_duplicates() {
        let text =
            "[[datasets]]\nid = \"custom\"\nraw = \"x.csv\"\n[[methods]]\nmethod = \"vanilla\"\n";
        assert!(matches!(
            RunConfig::from_toml(text),
            Err(ConfigError::Invalid(_))
        ));
        let dup = SAMPLE.replace("method = \"domain_cal\"", "method = \"vanilla\"");
        assert!(matches!(
            RunConfig::from_toml(&dup),
            Err(ConfigError::Invalid(_))
        ));
        assert!(RunConfig::from_toml("k = 4\nbogus = 1\n").is_err());
    }
}
