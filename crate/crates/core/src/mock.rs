//! Deterministic in-process adapter.
//!
//! The mock reads the prompt as a sequence of words. Every occurrence of a
//! verbalizer closes a "demonstration segment" labeled with that verbalizer;
//! the words after the last verbalizer are the query segment. Words that
//! occur in every segment (template connectors) are ignored.
//!
//! In [`MockBehavior::Associative`] mode the logit of label `j` is
//!
//! ```text
//! 4 · Σ cos(bag(segment), bag(query)) over segments labeled j
//!   + 0.35 · (#segments labeled j) + 1 · (#query words equal to verbalizer j)
//!   + seeded noise in [-0.05, 0.05]
//! ```
//!
//! In [`MockBehavior::MajorityCopy`] mode it is `10 · (#segments labeled j)`,
//! i.e. the mock copies the majority demonstration label.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::distribution::LabelDistribution;
use crate::gateway::{Gateway, GatewayError, GatewayRequest, GatewayResponse};
use crate::rng::{fnv1a, StreamRng};

/// Bag-of-words dimension for embeddings and hidden states.
pub const MOCK_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockBehavior {
    Associative,
    MajorityCopy,
}

#[derive(Debug, Clone)]
pub struct MockModel {
    seed: u64,
    behavior: MockBehavior,
    /// Verbalizers longer than this many characters count as multi-token.
    max_token_chars: Option<usize>,
    encoder: bool,
}

impl MockModel {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            behavior: MockBehavior::Associative,
            max_token_chars: None,
            encoder: true,
        }
    }

    pub fn majority_copy(seed: u64) -> Self {
        Self {
            behavior: MockBehavior::MajorityCopy,
            ..Self::new(seed)
        }
    }

    pub fn with_max_token_chars(mut self, n: usize) -> Self {
        self.max_token_chars = Some(n);
        self
    }

    pub fn without_encoder(mut self) -> Self {
        self.encoder = false;
        self
    }

    pub fn behavior(&self) -> MockBehavior {
        self.behavior
    }

    fn is_single_token(&self, v: &str) -> bool {
        let toks = words(v);
        toks.len() == 1
            && toks[0] == v.to_lowercase()
            && self.max_token_chars.is_none_or(|n| v.chars().count() <= n)
    }

    fn noise(&self, prompt_hash: u64, j: usize) -> f64 {
        let mut r = StreamRng::keyed("mock-noise", &[self.seed, prompt_hash, j as u64]);
        (r.unit_f64() - 0.5) * 0.1
    }

    fn token_nll(&self, token: &str) -> f64 {
        let u = StreamRng::keyed("mock-nll", &[self.seed, fnv1a(token.as_bytes())]).unit_f64();
        1.0 + 3.0 * u
    }

    fn label_logits(&self, prompt: &str, labels: &[String]) -> Vec<f64> {
        let parsed = Segments::parse(prompt, labels, SegmentOrder::InputThenLabel);
        let counts = parsed.label_counts(labels.len());
        match self.behavior {
            MockBehavior::MajorityCopy => counts.iter().map(|&c| 10.0 * c as f64).collect(),
            MockBehavior::Associative => {
                let query = bag(&parsed.open, &parsed.connectors);
                let h = fnv1a(prompt.as_bytes());
                (0..labels.len())
                    .map(|j| {
                        let assoc: f64 = parsed
                            .closed
                            .iter()
                            .filter(|(l, _)| *l == j)
                            .map(|(_, seg)| cosine(&bag(seg, &parsed.connectors), &query))
                            .sum();
                        let lower = labels[j].to_lowercase();
                        let direct = parsed.open.iter().filter(|w| **w == lower).count();
                        4.0 * assoc + 0.35 * counts[j] as f64 + direct as f64 + self.noise(h, j)
                    })
                    .collect()
            }
        }
    }

    fn hidden(&self, prompt: &str, labels: &[String]) -> Vec<f64> {
        let parsed = Segments::parse(prompt, labels, SegmentOrder::InputThenLabel);
        let mut v = bag(&parsed.open, &[]);
        normalize(&mut v);
        v
    }

    fn ppl(&self, prompt: &str) -> f64 {
        let toks = words(prompt);
        if toks.is_empty() {
            return 1.0;
        }
        let total: f64 = toks.iter().map(|t| self.token_nll(t)).sum();
        libm::exp(total / toks.len() as f64)
    }

    fn continuation_logprob(&self, prompt: &str, labels: &[String], continuation: &str) -> f64 {
        let cont = words(continuation);
        if cont.is_empty() {
            return 0.0;
        }
        let parsed = Segments::parse(prompt, labels, SegmentOrder::LabelThenInput);
        let base: f64 = cont.iter().map(|t| -self.token_nll(t)).sum::<f64>() / cont.len() as f64;
        let Some(&(candidate, _)) = parsed.closed.last() else {
            return base;
        };
        // The final closed segment is the candidate's own (empty) slot.
        let mut support = Vec::new();
        for (l, seg) in &parsed.closed[..parsed.closed.len() - 1] {
            if *l == candidate {
                support.extend(seg.iter().cloned());
            }
        }
        let assoc = cosine(
            &bag(&support, &parsed.connectors),
            &bag(&cont, &parsed.connectors),
        );
        base + 3.0 * assoc
    }
}

impl Gateway for MockModel {
    fn fingerprint(&self) -> String {
        let behavior = match self.behavior {
            MockBehavior::Associative => "associative",
            MockBehavior::MajorityCopy => "majority",
        };
        format!(
            "mock/v1:{behavior}:seed={}:max_token_chars={:?}",
            self.seed, self.max_token_chars
        )
    }

    fn predict(&mut self, req: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        req.validate()?;
        self.check_verbalizers(&req.label_tokens)?;
        let mut resp = GatewayResponse::default();
        if let Some(cont) = &req.channel_continuation {
            resp.continuation_logprob =
                Some(self.continuation_logprob(&req.prompt, &req.label_tokens, cont));
        } else if !req.label_tokens.is_empty() {
            let logits = self.label_logits(&req.prompt, &req.label_tokens);
            let masses: Vec<f64> = {
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                logits.iter().map(|l| libm::exp(l - max)).collect()
            };
            resp.label_probs = Some(
                LabelDistribution::from_masses(&masses)
                    .map_err(|e| GatewayError::Protocol(e.to_string()))?,
            );
        }
        if req.want_hidden {
            resp.hidden = Some(self.hidden(&req.prompt, &req.label_tokens));
        }
        if req.want_ppl {
            resp.ppl = Some(self.ppl(&req.prompt));
        }
        Ok(resp)
    }

    fn embed(&mut self, text: &str) -> Result<Vec<f64>, GatewayError> {
        if !self.encoder {
            return Err(GatewayError::NoEncoder);
        }
        let toks = words(text);
        if toks.is_empty() {
            return Err(GatewayError::EmptyText);
        }
        let mut v = bag(&toks, &[]);
        normalize(&mut v);
        Ok(v)
    }

    fn check_verbalizers(&mut self, label_tokens: &[String]) -> Result<(), GatewayError> {
        match label_tokens.iter().find(|v| !self.is_single_token(v)) {
            Some(v) => Err(GatewayError::MultiTokenVerbalizer(v.clone())),
            None => Ok(()),
        }
    }
}

/// Lowercased whitespace words with surrounding punctuation trimmed.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Hashed bag-of-words counts over [`MOCK_DIM`] buckets, skipping `ignore`.
pub fn bag(tokens: &[String], ignore: &[String]) -> Vec<f64> {
    let mut v = vec![0.0; MOCK_DIM];
    for t in tokens.iter().filter(|t| !ignore.contains(t)) {
        v[(fnv1a(t.as_bytes()) % MOCK_DIM as u64) as usize] += 1.0;
    }
    v
}

fn normalize(v: &mut [f64]) {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Cosine similarity; 0 if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Copy)]
enum SegmentOrder {
    /// `text label text label ... query`: a verbalizer closes the words before it.
    InputThenLabel,
    /// `label text label text ...`: a verbalizer opens the words after it.
    LabelThenInput,
}

struct Segments {
    closed: Vec<(usize, Vec<String>)>,
    open: Vec<String>,
    connectors: Vec<String>,
}

impl Segments {
    fn parse(prompt: &str, labels: &[String], order: SegmentOrder) -> Self {
        let lowered: Vec<String> = labels.iter().map(|l| l.to_lowercase()).collect();
        let mut closed = Vec::new();
        let mut cur = Vec::new();
        let mut current_label: Option<usize> = None;
        for w in words(prompt) {
            if let Some(j) = lowered.iter().position(|l| *l == w) {
                match order {
                    SegmentOrder::InputThenLabel => closed.push((j, core::mem::take(&mut cur))),
                    SegmentOrder::LabelThenInput => {
                        if let Some(prev) = current_label.replace(j) {
                            closed.push((prev, core::mem::take(&mut cur)));
                        } else {
                            cur.clear();
                        }
                    }
                }
            } else {
                cur.push(w);
            }
        }
        if let (SegmentOrder::LabelThenInput, Some(l)) = (order, current_label) {
            closed.push((l, core::mem::take(&mut cur)));
        }
        let mut connectors: Vec<String> = Vec::new();
        if !closed.is_empty() {
            let first = &closed[0].1;
            for w in first {
                let everywhere = closed.iter().all(|(_, s)| s.contains(w))
                    && (matches!(order, SegmentOrder::LabelThenInput) || cur.contains(w));
                if everywhere && !connectors.contains(w) {
                    connectors.push(w.clone());
                }
            }
        }
        Self {
            closed,
            open: cur,
            connectors,
        }
    }

    fn label_counts(&self, n: usize) -> Vec<usize> {
        let mut c = vec![0; n];
        self.closed.iter().for_each(|(l, _)| c[*l] += 1);
        c
    }
}
