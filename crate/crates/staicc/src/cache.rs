//! Append-only response cache keyed by (adapter fingerprint, request hash).

use std::cell::Cell;
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use staicc_core::gateway::{request_hash, Gateway, GatewayError, GatewayRequest, GatewayResponse};
use staicc_core::rng::fnv1a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Entry {
    Predict {
        fingerprint: String,
        key: String,
        response: GatewayResponse,
    },
    Embed {
        fingerprint: String,
        key: String,
        embedding: Vec<f64>,
    },
    /// The adapter found no tokens in the text; deterministic, so cached.
    EmbedEmpty { fingerprint: String, key: String },
}

fn embed_key(text: &str) -> String {
    let mut bytes = b"embed\0".to_vec();
    bytes.extend_from_slice(text.as_bytes());
    format!("{:016x}", fnv1a(&bytes))
}

fn predict_key(req: &GatewayRequest) -> String {
    format!("{:016x}", request_hash(req))
}

/// Hit and miss counters, shareable after the gateway is boxed.
#[derive(Debug, Default)]
pub struct CacheStats {
    hits: Cell<u64>,
    misses: Cell<u64>,
}

impl CacheStats {
    pub fn hits(&self) -> u64 {
        self.hits.get()
    }

    pub fn misses(&self) -> u64 {
        self.misses.get()
    }

    fn add(&self, hits: u64, misses: u64) {
        self.hits.set(self.hits.get() + hits);
        self.misses.set(self.misses.get() + misses);
    }
}

/// Wraps a gateway with a persistent cache. Successful responses and
/// empty-text embedding refusals are stored; other errors are not. Unreadable trailing lines (e.g. from an interrupted write) are
/// skipped on load.
pub struct CachedGateway<G> {
    inner: G,
    fingerprint: String,
    predictions: HashMap<String, GatewayResponse>,
    embeddings: HashMap<String, Option<Vec<f64>>>,
    file: File,
    path: PathBuf,
    stats: Rc<CacheStats>,
}

impl<G: Gateway> CachedGateway<G> {
    pub fn open(inner: G, path: &Path) -> std::io::Result<Self> {
        let fingerprint = inner.fingerprint();
        let mut predictions = HashMap::new();
        let mut embeddings = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                match serde_json::from_str::<Entry>(&line?) {
                    Ok(Entry::Predict {
                        fingerprint: f,
                        key,
                        response,
                    }) if f == fingerprint => {
                        predictions.insert(key, response);
                    }
                    Ok(Entry::Embed {
                        fingerprint: f,
                        key,
                        embedding,
                    }) if f == fingerprint => {
                        embeddings.insert(key, Some(embedding));
                    }
                    Ok(Entry::EmbedEmpty {
                        fingerprint: f,
                        key,
                    }) if f == fingerprint => {
                        embeddings.insert(key, None);
                    }
                    _ => {}
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        let existing = std::fs::read(path)?;
        if existing.last().is_some_and(|b| *b != b'\n') {
            writeln!(file)?;
        }
        Ok(Self {
            inner,
            fingerprint,
            predictions,
            embeddings,
            file,
            path: path.into(),
            stats: Rc::default(),
        })
    }

    pub fn stats(&self) -> Rc<CacheStats> {
        Rc::clone(&self.stats)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn into_inner(self) -> G {
        self.inner
    }

    fn append(&mut self, entry: &Entry) -> Result<(), GatewayError> {
        let line = serde_json::to_string(entry).expect("cache entry serializes");
        writeln!(self.file, "{line}")
            .and_then(|()| self.file.flush())
            .map_err(|e| {
                GatewayError::Transport(format!("cache write {}: {e}", self.path.display()))
            })
    }

    fn store(&mut self, key: String, resp: &GatewayResponse) -> Result<(), GatewayError> {
        self.append(&Entry::Predict {
            fingerprint: self.fingerprint.clone(),
            key: key.clone(),
            response: resp.clone(),
        })?;
        self.predictions.insert(key, resp.clone());
        Ok(())
    }
}

impl<G: Gateway> Gateway for CachedGateway<G> {
    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn predict(&mut self, req: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        self.predict_batch(std::slice::from_ref(req)).remove(0)
    }

    fn predict_batch(
        &mut self,
        reqs: &[GatewayRequest],
    ) -> Vec<Result<GatewayResponse, GatewayError>> {
        let keys: Vec<String> = reqs.iter().map(predict_key).collect();
        let mut out: Vec<Option<Result<GatewayResponse, GatewayError>>> = keys
            .iter()
            .map(|k| self.predictions.get(k).cloned().map(Ok))
            .collect();
        // Duplicate misses inside one batch are sent once.
        let mut first_of: HashMap<&str, usize> = HashMap::new();
        let mut miss_reqs = Vec::new();
        let mut miss_slots: Vec<usize> = Vec::new();
        for (i, k) in keys.iter().enumerate() {
            if out[i].is_none() && !first_of.contains_key(k.as_str()) {
                first_of.insert(k, miss_reqs.len());
                miss_reqs.push(reqs[i].clone());
                miss_slots.push(i);
            }
        }
        self.stats.add(
            (reqs.len() - miss_slots.len()) as u64,
            miss_slots.len() as u64,
        );
        let fresh = if miss_reqs.is_empty() {
            Vec::new()
        } else {
            self.inner.predict_batch(&miss_reqs)
        };
        for (slot, resp) in miss_slots.iter().zip(&fresh) {
            if let Ok(r) = resp {
                if let Err(e) = self.store(keys[*slot].clone(), r) {
                    out[*slot] = Some(Err(e));
                    continue;
                }
            }
            out[*slot] = Some(resp.clone());
        }
        for (i, k) in keys.iter().enumerate() {
            if out[i].is_none() {
                out[i] = Some(fresh[first_of[k.as_str()]].clone());
            }
        }
        out.into_iter().map(|r| r.expect("filled")).collect()
    }

    fn embed(&mut self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let key = embed_key(text);
        if let Some(v) = self.embeddings.get(&key) {
            self.stats.add(1, 0);
            return v.clone().ok_or(GatewayError::EmptyText);
        }
        self.stats.add(0, 1);
        let fingerprint = self.fingerprint.clone();
        match self.inner.embed(text) {
            Ok(v) => {
                self.append(&Entry::Embed {
                    fingerprint,
                    key: key.clone(),
                    embedding: v.clone(),
                })?;
                self.embeddings.insert(key, Some(v.clone()));
                Ok(v)
            }
            Err(GatewayError::EmptyText) => {
                self.append(&Entry::EmbedEmpty {
                    fingerprint,
                    key: key.clone(),
                })?;
                self.embeddings.insert(key, None);
                Err(GatewayError::EmptyText)
            }
            Err(e) => Err(e),
        }
    }

    fn check_verbalizers(&mut self, label_tokens: &[String]) -> Result<(), GatewayError> {
        self.inner.check_verbalizers(label_tokens)
    }
}
