//! File formats, transports, caching and the run orchestration around
//! `staicc-core`.

pub mod adapter;
pub mod aggregate;
pub mod bank;
pub mod cache;
pub mod cli;
pub mod config;
pub mod ingest;
pub mod manifest;
pub mod runner;
pub mod svg;
pub mod synth;
pub mod transport;
