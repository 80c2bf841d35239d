//! The model boundary: requests, responses, the [`Gateway`] trait every
//! adapter implements, and the JSON-lines wire envelope.
//!
//! # Wire protocol `staicc/1`
//!
//! One UTF-8 JSON object per line. Requests:
//!
//! ```text
//! {"version":"staicc/1","id":0,"prompt":"...","label_tokens":["positive","negative"],
//!  "want_hidden":false,"want_ppl":false,"channel_continuation":null}
//! ```
//!
//! Embedding requests use `{"version":"staicc/1","id":1,"embed":"text"}`.
//! Responses echo `version` and `id` and carry either the response fields
//! (`label_probs`, `hidden`, `ppl`, `continuation_logprob`, `embedding`, each
//! possibly `null`) or an `error` object `{"kind": ..., "message": ...,
//! "verbalizer": ...}`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::LabelDistribution;

pub const PROTOCOL_VERSION: &str = "staicc/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayRequest {
    pub prompt: String,
    pub label_tokens: Vec<String>,
    #[serde(default)]
    pub want_hidden: bool,
    #[serde(default)]
    pub want_ppl: bool,
    #[serde(default)]
    pub channel_continuation: Option<String>,
}

impl GatewayRequest {
    /// Label-probability request.
    pub fn labels(prompt: impl Into<String>, label_tokens: &[String]) -> Self {
        Self {
            prompt: prompt.into(),
            label_tokens: label_tokens.to_vec(),
            want_hidden: false,
            want_ppl: false,
            channel_continuation: None,
        }
    }

    pub fn with_hidden(mut self) -> Self {
        self.want_hidden = true;
        self
    }

    pub fn with_ppl(mut self) -> Self {
        self.want_ppl = true;
        self
    }

    pub fn with_continuation(mut self, continuation: impl Into<String>) -> Self {
        self.channel_continuation = Some(continuation.into());
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if self.label_tokens.is_empty() && self.channel_continuation.is_none() {
            return Err(GatewayError::InvalidRequest(
                "label_tokens is empty and no channel_continuation is set".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GatewayResponse {
    #[serde(default)]
    pub label_probs: Option<LabelDistribution>,
    #[serde(default)]
    pub hidden: Option<Vec<f64>>,
    #[serde(default)]
    pub ppl: Option<f64>,
    #[serde(default)]
    pub continuation_logprob: Option<f64>,
}

impl GatewayResponse {
    pub fn is_empty(&self) -> bool {
        self.label_probs.is_none()
            && self.hidden.is_none()
            && self.ppl.is_none()
            && self.continuation_logprob.is_none()
    }

    pub fn require_probs(&self) -> Result<&LabelDistribution, GatewayError> {
        self.label_probs
            .as_ref()
            .ok_or(GatewayError::MissingField("label_probs"))
    }

    pub fn require_hidden(&self) -> Result<&[f64], GatewayError> {
        self.hidden
            .as_deref()
            .ok_or(GatewayError::MissingField("hidden"))
    }

    pub fn require_ppl(&self) -> Result<f64, GatewayError> {
        self.ppl.ok_or(GatewayError::MissingField("ppl"))
    }

    pub fn require_continuation(&self) -> Result<f64, GatewayError> {
        self.continuation_logprob
            .ok_or(GatewayError::MissingField("continuation_logprob"))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("verbalizer {0:?} is not a single token for this adapter")]
    MultiTokenVerbalizer(String),
    #[error("adapter timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("adapter has no text encoder; use a mock adapter (mock:<seed>) for embeddings")]
    NoEncoder,
    #[error("adapter does not support {0}")]
    Unsupported(&'static str),
    #[error("response is missing {0}")]
    MissingField(&'static str),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("text has no tokens to embed")]
    EmptyText,
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("adapter error {kind}: {message}")]
    Remote { kind: String, message: String },
}

impl GatewayError {
    /// Stable `kind` string used on the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::MultiTokenVerbalizer(_) => "multi_token_verbalizer",
            Self::Timeout { .. } => "timeout",
            Self::NoEncoder => "no_encoder",
            Self::Unsupported(_) => "unsupported",
            Self::MissingField(_) => "missing_field",
            Self::InvalidRequest(_) => "invalid_request",
            Self::EmptyText => "empty_text",
            Self::Transport(_) => "transport",
            Self::Protocol(_) => "protocol",
            Self::Remote { .. } => "remote",
        }
    }
}

/// A label-scoring model.
///
/// Implementations must be deterministic: the same request always yields the
/// same response.
pub trait Gateway {
    /// Identifies the adapter (model + settings) for caching and provenance.
    fn fingerprint(&self) -> String;

    fn predict(&mut self, req: &GatewayRequest) -> Result<GatewayResponse, GatewayError>;

    /// Several requests; transports may pipeline them. Results come back in
    /// request order.
    fn predict_batch(
        &mut self,
        reqs: &[GatewayRequest],
    ) -> Vec<Result<GatewayResponse, GatewayError>> {
        reqs.iter().map(|r| self.predict(r)).collect()
    }

    /// Unit-norm text embedding.
    fn embed(&mut self, _text: &str) -> Result<Vec<f64>, GatewayError> {
        Err(GatewayError::NoEncoder)
    }

    /// Fails with [`GatewayError::MultiTokenVerbalizer`] naming the first
    /// verbalizer that is not a single token.
    fn check_verbalizers(&mut self, label_tokens: &[String]) -> Result<(), GatewayError>;
}

impl<G: Gateway + ?Sized> Gateway for &mut G {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn predict(&mut self, req: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        (**self).predict(req)
    }
    fn predict_batch(
        &mut self,
        reqs: &[GatewayRequest],
    ) -> Vec<Result<GatewayResponse, GatewayError>> {
        (**self).predict_batch(reqs)
    }
    fn embed(&mut self, text: &str) -> Result<Vec<f64>, GatewayError> {
        (**self).embed(text)
    }
    fn check_verbalizers(&mut self, label_tokens: &[String]) -> Result<(), GatewayError> {
        (**self).check_verbalizers(label_tokens)
    }
}

impl<G: Gateway + ?Sized> Gateway for alloc::boxed::Box<G> {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn predict(&mut self, req: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        (**self).predict(req)
    }
    fn predict_batch(
        &mut self,
        reqs: &[GatewayRequest],
    ) -> Vec<Result<GatewayResponse, GatewayError>> {
        (**self).predict_batch(reqs)
    }
    fn embed(&mut self, text: &str) -> Result<Vec<f64>, GatewayError> {
        (**self).embed(text)
    }
    fn check_verbalizers(&mut self, label_tokens: &[String]) -> Result<(), GatewayError> {
        (**self).check_verbalizers(label_tokens)
    }
}

/// Per-kind call counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    /// Requests asking for label probabilities (no ppl, no continuation).
    pub predict: u64,
    pub hidden: u64,
    pub ppl: u64,
    pub continuation: u64,
    pub embed: u64,
}

impl CallCounts {
    /// All model forward requests (everything except embeddings).
    pub fn forward(&self) -> u64 {
        self.predict + self.hidden + self.ppl + self.continuation
    }

    pub fn add(&mut self, other: &CallCounts) {
        self.predict += other.predict;
        self.hidden += other.hidden;
        self.ppl += other.ppl;
        self.continuation += other.continuation;
        self.embed += other.embed;
    }
}

/// Wraps a gateway and counts requests by kind.
#[derive(Debug)]
pub struct CountingGateway<G> {
    pub inner: G,
    pub counts: CallCounts,
}

impl<G> CountingGateway<G> {
    pub fn new(inner: G) -> Self {
        Self {
            inner,
            counts: CallCounts::default(),
        }
    }

    pub fn take_counts(&mut self) -> CallCounts {
        core::mem::take(&mut self.counts)
    }

    fn record(&mut self, req: &GatewayRequest) {
        if req.channel_continuation.is_some() {
            self.counts.continuation += 1;
        } else if req.want_ppl {
            self.counts.ppl += 1;
        } else if req.want_hidden {
            self.counts.hidden += 1;
        } else {
            self.counts.predict += 1;
        }
    }
}

impl<G: Gateway> Gateway for CountingGateway<G> {
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn predict(&mut self, req: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        self.record(req);
        self.inner.predict(req)
    }

    fn predict_batch(
        &mut self,
        reqs: &[GatewayRequest],
    ) -> Vec<Result<GatewayResponse, GatewayError>> {
        reqs.iter().for_each(|r| self.record(r));
        self.inner.predict_batch(reqs)
    }

    fn embed(&mut self, text: &str) -> Result<Vec<f64>, GatewayError> {
        self.counts.embed += 1;
        self.inner.embed(text)
    }

    fn check_verbalizers(&mut self, label_tokens: &[String]) -> Result<(), GatewayError> {
        self.inner.check_verbalizers(label_tokens)
    }
}

/// One request line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub version: String,
    pub id: u64,
    #[serde(flatten)]
    pub body: WireRequestBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireRequestBody {
    Embed { embed: String },
    Verbalizers { check_verbalizers: Vec<String> },
    Predict(GatewayRequest),
}

/// One response line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub version: String,
    pub id: u64,
    #[serde(flatten)]
    pub body: WireResponseBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireResponseBody {
    Error { error: WireError },
    Embedding { embedding: Vec<f64> },
    Ok { ok: bool },
    Predict(GatewayResponse),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbalizer: Option<String>,
}

impl From<&GatewayError> for WireError {
    fn from(e: &GatewayError) -> Self {
        Self {
            kind: e.kind().into(),
            message: format!("{e}"),
            verbalizer: match e {
                GatewayError::MultiTokenVerbalizer(v) => Some(v.clone()),
                _ => None,
            },
        }
    }
}

impl From<WireError> for GatewayError {
    fn from(e: WireError) -> Self {
        match (e.kind.as_str(), e.verbalizer) {
            ("multi_token_verbalizer", Some(v)) => GatewayError::MultiTokenVerbalizer(v),
            ("no_encoder", _) => GatewayError::NoEncoder,
            ("empty_text", _) => GatewayError::EmptyText,
            _ => GatewayError::Remote {
                kind: e.kind,
                message: e.message,
            },
        }
    }
}

impl WireRequest {
    pub fn new(id: u64, body: WireRequestBody) -> Self {
        Self {
            version: PROTOCOL_VERSION.into(),
            id,
            body,
        }
    }
}

impl WireResponse {
    pub fn new(id: u64, body: WireResponseBody) -> Self {
        Self {
            version: PROTOCOL_VERSION.into(),
            id,
            body,
        }
    }

    pub fn check_version(&self) -> Result<(), GatewayError> {
        if self.version == PROTOCOL_VERSION {
            Ok(())
        } else {
            Err(GatewayError::Protocol(format!(
                "expected version {PROTOCOL_VERSION}, got {}",
                self.version
            )))
        }
    }
}

/// Canonical request hash used as a cache key.
pub fn request_hash(req: &GatewayRequest) -> u64 {
    let bytes = serde_json::to_vec(req).expect("request serializes");
    crate::rng::fnv1a(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn request_line_shape() {
        let req = WireRequest::new(
            3,
            WireRequestBody::Predict(GatewayRequest::labels("p", &["a".to_string()])),
        );
        let line = serde_json::to_string(&req).unwrap();
        assert_eq!(
            line,
            r#"{"version":"staicc/1","id":3,"prompt":"p","label_tokens":["a"],"want_hidden":false,"want_ppl":false,"channel_continuation":null}"#
        );
        let back: WireRequest = serde_json::from_str(&line).unwrap();
        assert_eq!(back, req);
    }

    #[test]
    fn embed_and_predict_bodies_are_distinguished() {
        let e: WireRequest =
            serde_json::from_str(r#"{"version":"staicc/1","id":1,"embed":"hi"}"#).unwrap();
        assert_eq!(e.body, WireRequestBody::Embed { embed: "hi".into() });
    }

    #[test]
    fn error_response_round_trip() {
        let err = GatewayError::MultiTokenVerbalizer("description".into());
        let resp = WireResponse::new(
            2,
            WireResponseBody::Error {
                error: (&err).into(),
            },
        );
        let line = serde_json::to_string(&resp).unwrap();
        let back: WireResponse = serde_json::from_str(&line).unwrap();
        match back.body {
            WireResponseBody::Error { error } => assert_eq!(GatewayError::from(error), err),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn response_rejects_unnormalized_probs() {
        let line = r#"{"version":"staicc/1","id":0,"label_probs":[0.9,0.9],"hidden":null,"ppl":null,"continuation_logprob":null}"#;
        assert!(serde_json::from_str::<WireResponse>(line).is_err());
    }

    #[test]
    fn request_validation() {
        let mut r = GatewayRequest::labels("", &[]);
        assert!(r.validate().is_err());
        r.prompt = "x".into();
        assert!(r.validate().is_err());
        r.channel_continuation = Some("y".into());
        assert!(r.validate().is_ok());
        let ok = GatewayRequest::labels("x", &["a".into()]);
        assert!(ok.validate().is_ok());
    }
}
