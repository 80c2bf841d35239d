//! Shared fixture builders for the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use staicc::synth::{synth_records, write_csv};
use staicc_core::Method;

pub struct Fixture {
    pub id: &'static str,
    pub classes: usize,
    pub n: usize,
    pub seed: u64,
    pub constant_label: Option<usize>,
    pub sizes: (usize, usize, usize),
}

/// Two small datasets: a binary and a four-class one.
pub const TWO_DATASETS: [Fixture; 2] = [
    Fixture {
        id: "sst2",
        classes: 2,
        n: 200,
        seed: 1,
        constant_label: None,
        sizes: (48, 96, 32),
    },
    Fixture {
        id: "agnews",
        classes: 4,
        n: 240,
        seed: 2,
        constant_label: None,
        sizes: (48, 96, 32),
    },
];

/// Writes the corpora and a run config; returns the config path.
pub fn write_config(
    dir: &Path,
    fixtures: &[Fixture],
    methods: &[Method],
    suites: &[&str],
    adapter: &str,
    extra: &str,
) -> PathBuf {
    let mut toml = format!(
        "k = 4\nadapter = {adapter:?}\nsuites = [{}]\noutput_dir = \"out\"\n{extra}\n",
        suites
            .iter()
            .map(|s| format!("{s:?}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    for f in fixtures {
        let raw = dir.join(format!("{}.csv", f.id));
        write_csv(
            &raw,
            &synth_records(f.classes, f.n, f.seed, f.constant_label),
        )
        .unwrap();
        toml.push_str(&format!(
            "\n[[datasets]]\nid = {:?}\nraw = {:?}\nsizes = {{ calibration = {}, demonstration = {}, test = {} }}\n",
            f.id,
            format!("{}.csv", f.id),
            f.sizes.0,
            f.sizes.1,
            f.sizes.2
        ));
    }
    for m in methods {
        toml.push_str(&format!("\n[[methods]]\nmethod = {:?}\n", m.name()));
    }
    let path = dir.join("run.toml");
    std::fs::write(&path, toml).unwrap();
    path
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_staicc")
}
