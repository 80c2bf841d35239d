//! Versioned split manifests: the on-disk record of a trisection.

use std::path::Path;

use serde::{Deserialize, Serialize};
use staicc_core::corpus::{trisect, CorpusError, SampleRecord, SplitSizes, Trisection};
use staicc_core::rng::{fnv1a, PRNG_CONTRACT};
use thiserror::Error;

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest format {found} is not supported (expected {MANIFEST_FORMAT})")]
    Format { found: u32 },
    #[error(
        "manifest was produced under PRNG contract {found:?}, this build uses {PRNG_CONTRACT:?}"
    )]
    Contract { found: String },
    #[error("records do not match the manifest's corpus hash")]
    CorpusMismatch,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sizes {
    pub calibration: usize,
    pub demonstration: usize,
    pub test: usize,
}

impl From<SplitSizes> for Sizes {
    fn from(s: SplitSizes) -> Self {
        Self {
            calibration: s.calibration,
            demonstration: s.demonstration,
            test: s.test,
        }
    }
}

impl From<Sizes> for SplitSizes {
    fn from(s: Sizes) -> Self {
        SplitSizes::new(s.calibration, s.demonstration, s.test)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format_version: u32,
    pub prng_contract: String,
    pub dataset_id: String,
    pub seed: u64,
    pub sizes: Sizes,
    /// FNV-1a over the filtered records, so a manifest is never applied to a
    /// different corpus.
    pub corpus_hash: String,
    pub calibration: Vec<usize>,
    pub demonstration: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn corpus_hash(records: &[SampleRecord]) -> String {
    let bytes = serde_json::to_vec(records).expect("records serialize");
    format!("{:016x}", fnv1a(&bytes))
}

impl SplitManifest {
    pub fn create(
        dataset_id: &str,
        records: &[SampleRecord],
        sizes: SplitSizes,
        seed: u64,
    ) -> Result<(Self, Trisection), ManifestError> {
        let tri = trisect(dataset_id, records, sizes, seed)?;
        let m = Self {
            format_version: MANIFEST_FORMAT,
            prng_contract: PRNG_CONTRACT.into(),
            dataset_id: dataset_id.into(),
            seed,
            sizes: sizes.into(),
            corpus_hash: corpus_hash(records),
            calibration: tri.calibration_ids(),
            demonstration: tri.demonstration_ids(),
            test: tri.test_ids(),
        };
        Ok((m, tri))
    }

    pub fn check(&self) -> Result<(), ManifestError> {
        if self.format_version != MANIFEST_FORMAT {
            return Err(ManifestError::Format {
                found: self.format_version,
            });
        }
        if self.prng_contract != PRNG_CONTRACT {
            return Err(ManifestError::Contract {
                found: self.prng_contract.clone(),
            });
        }
        Ok(())
    }

    /// Rebuilds the trisection over the same records.
    pub fn resolve(&self, records: &[SampleRecord]) -> Result<Trisection, ManifestError> {
        self.check()?;
        if corpus_hash(records) != self.corpus_hash {
            return Err(ManifestError::CorpusMismatch);
        }
        Ok(Trisection::from_ids(
            &self.dataset_id,
            records,
            &self.calibration,
            &self.demonstration,
            &self.test,
        )?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.check()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        Ok(std::fs::write(path, self.to_json())?)
    }
}
