//! Core of the in-context classification evaluation toolkit.
//!
//! Everything in this crate is pure and allocation-only (`no_std` + `alloc`):
//! frozen dataset trisection and demonstration sampling, meta-template
//! rendering, the gateway abstraction over a label-scoring model, the ten
//! inference methods, the normal metric suite, and the bias/robustness
//! diagnostics. File formats, the wire transport and the CLI live in the
//! `staicc` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod corpus;
pub mod diagnostics;
pub mod distribution;
pub mod gateway;
pub mod methods;
pub mod metrics;
pub mod mock;
pub mod rng;
pub mod templating;

pub use corpus::{DemonstrationAssignment, NoiseSpec, SampleRecord, SplitSizes, Trisection};
pub use distribution::LabelDistribution;
pub use gateway::{Gateway, GatewayError, GatewayRequest, GatewayResponse};
pub use methods::{Method, MethodConfig};
pub use metrics::{MetricReport, Prediction};
pub use templating::{AssembledPrompt, Dataset, PromptTemplate, TemplateBank};
