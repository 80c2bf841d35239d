//! Adapter selection from an endpoint string.
//!
//! | form                  | adapter                                      |
//! |-----------------------|----------------------------------------------|
//! | `mock:<seed>`         | in-process associative mock                  |
//! | `mock-majority:<seed>`| in-process mock that copies the demo majority|
//! | `pipe:<command>`      | child process on stdin/stdout                |
//! | `http://host:port/..` | HTTP POST endpoint                           |

use std::time::Duration;

use staicc_core::gateway::{Gateway, GatewayError};
use staicc_core::mock::MockModel;
use thiserror::Error;

use crate::transport::{HttpGateway, PipeGateway};

/// Environment variable consulted when no adapter is configured.
pub const ADAPTER_ENV: &str = "STAICC_ADAPTER";

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("unrecognized adapter {0:?}; expected mock:<seed>, mock-majority:<seed>, pipe:<command> or http://...")]
    Unrecognized(String),
    #[error("bad mock seed in {0:?}")]
    BadSeed(String),
    #[error("no adapter configured and {ADAPTER_ENV} is not set")]
    Missing,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdapterSpec {
    Mock(u64),
    MockMajority(u64),
    Pipe(String),
    Http(String),
}

impl std::str::FromStr for AdapterSpec {
    type Err = AdapterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let seed = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| AdapterError::BadSeed(s.into()))
        };
        if let Some(v) = s.strip_prefix("mock-majority:") {
            Ok(Self::MockMajority(seed(v)?))
        } else if let Some(v) = s.strip_prefix("mock:") {
            Ok(Self::Mock(seed(v)?))
        } else if let Some(cmd) = s.strip_prefix("pipe:") {
            Ok(Self::Pipe(cmd.into()))
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(Self::Http(s.into()))
        } else {
            Err(AdapterError::Unrecognized(s.into()))
        }
    }
}

/// The configured adapter string, or the environment fallback.
pub fn configured(adapter: Option<&str>) -> Result<AdapterSpec, AdapterError> {
    match adapter {
        Some(a) => a.parse(),
        None => std::env::var(ADAPTER_ENV)
            .map_err(|_| AdapterError::Missing)?
            .parse(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TransportOptions {
    pub window: usize,
    pub timeout: Duration,
}

impl Default for TransportOptions {
    fn default() -> Self {
        Self {
            window: crate::transport::DEFAULT_WINDOW,
            timeout: crate::transport::DEFAULT_TIMEOUT,
        }
    }
}

pub fn open(spec: &AdapterSpec, opts: TransportOptions) -> Result<Box<dyn Gateway>, AdapterError> {
    Ok(match spec {
        AdapterSpec::Mock(seed) => Box::new(MockModel::new(*seed)),
        AdapterSpec::MockMajority(seed) => Box::new(MockModel::majority_copy(*seed)),
        AdapterSpec::Pipe(cmd) => Box::new(PipeGateway::spawn(cmd, opts.window, opts.timeout)?),
        AdapterSpec::Http(url) => Box::new(HttpGateway::new(url, opts.window, opts.timeout)?),
    })
}
