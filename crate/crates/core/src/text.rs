//! Text embeddings for feature descriptions, category names and dataset
//! context.
//!
//! The default encoder hashes character n-grams into a fixed number of
//! signed buckets and L2-normalises the result. It is a pure function of the
//! normalised string and the [`EncoderConfig`], needs no model files, and is
//! frozen: nothing downstream back-propagates into it.
//!
//! [`ExternalEncoder`] talks to an embedding service instead:
//! `POST {endpoint}` with `{"texts": [...]}` answered by
//! `{"embeddings": [[...], ...]}`. Vectors are normalised client-side and
//! cached in an append-only JSON-lines file.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TEXT_DIM: usize = 64;
pub const DEFAULT_HASH_SEED: u64 = 0x5e71_f00d;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("text is empty after normalization: {0:?}")]
    Empty(String),
    #[error("hashed features cancel out exactly for {0:?}")]
    Degenerate(String),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("embedding service unreachable: {0}")]
    Transport(String),
    #[error("embedding service returned a bad response: {0}")]
    BadResponse(String),
    #[error("batch element {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<EncoderError>,
    },
    #[error("embedding cache: {0}")]
    Cache(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Hashed,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub endpoint: String,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    30
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_text: usize,
    pub ngram_orders: Vec<usize>,
    pub hash_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<ExternalConfig>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_text: DEFAULT_TEXT_DIM,
            ngram_orders: vec![3, 4, 5],
            hash_seed: DEFAULT_HASH_SEED,
            external: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.d_text < 8 {
            return Err(EncoderError::Config(format!("d_text must be >= 8, got {}", self.d_text)));
        }
        if self.ngram_orders.is_empty() || self.ngram_orders.contains(&0) {
            return Err(EncoderError::Config("n-gram orders must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Anything that turns strings into unit vectors of a fixed width.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode(&self, text: &str) -> Result<TextEmbedding, EncoderError>;

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<TextEmbedding>, EncoderError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.encode(t).map_err(|e| EncoderError::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

/// Lowercase, drop punctuation (unit symbols survive), collapse whitespace.
pub fn normalize_text(s: &str) -> String {
    const UNIT_CHARS: &[char] = &['%', '°', '/', '$', '€', '£', 'µ', '²', '³'];
    let mapped: String = s
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| {
            if c.is_alphanumeric() || UNIT_CHARS.contains(&c) {
                c
            } else {
                ' '
            }
        })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fnv1a(seed: u64, parts: &[&[u8]]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET ^ seed.wrapping_mul(PRIME);
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
        // Separator so ("ab", "c") and ("a", "bc") differ.
        h ^= 0xff;
        h = h.wrapping_mul(PRIME);
    }
    h
}

fn l2_normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    true
}

/// Signed character n-gram hashing.
#[derive(Clone, Debug)]
pub struct HashedEncoder {
    cfg: EncoderConfig,
}

impl HashedEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self, EncoderError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }
}

impl TextEncoder for HashedEncoder {
    fn dim(&self) -> usize {
        self.cfg.d_text
    }

    fn encode(&self, text: &str) -> Result<TextEmbedding, EncoderError> {
        let norm = normalize_text(text);
        if norm.is_empty() {
            return Err(EncoderError::Empty(text.to_string()));
        }
        let padded: Vec<char> = std::iter::once(' ')
            .chain(norm.chars())
            .chain(std::iter::once(' '))
            .collect();
        let d = self.cfg.d_text as u64;
        let sign_seed = self.cfg.hash_seed ^ 0x9e37_79b9_7f4a_7c15;
        let mut v = vec![0.0; self.cfg.d_text];
        let mut buf = String::new();
        for &n in &self.cfg.ngram_orders {
            if n > padded.len() {
                continue;
            }
            let order = [n as u8];
            for w in padded.windows(n) {
                buf.clear();
                buf.extend(w);
                let bucket = fnv1a(self.cfg.hash_seed, &[&order, buf.as_bytes()]) % d;
                let sign = if fnv1a(sign_seed, &[&order, buf.as_bytes()]) >> 63 == 0 {
                    1.0
                } else {
                    -1.0
                };
                v[bucket as usize] += sign;
            }
        }
        if !l2_normalize(&mut v) {
            return Err(EncoderError::Degenerate(norm));
        }
        Ok(TextEmbedding {
            vector: v,
            source: EmbeddingSource::Hashed,
        })
    }
}

/// Encode with the hashed encoder, or with the external service when the
/// config names one.
pub fn encode_text(s: &str, cfg: &EncoderConfig) -> Result<TextEmbedding, EncoderError> {
    match &cfg.external {
        None => HashedEncoder::new(cfg.clone())?.encode(s),
        Some(_) => ExternalEncoder::new(cfg.clone())?.encode(s),
    }
}

pub fn encode_batch(strings: &[&str], cfg: &EncoderConfig) -> Result<Vec<TextEmbedding>, EncoderError> {
    match &cfg.external {
        None => HashedEncoder::new(cfg.clone())?.encode_batch(strings),
        Some(_) => ExternalEncoder::new(cfg.clone())?.encode_batch(strings),
    }
}

/// Build the encoder described by `cfg`.
pub fn build_encoder(cfg: &EncoderConfig) -> Result<Box<dyn TextEncoder>, EncoderError> {
    Ok(match cfg.external {
        None => Box::new(HashedEncoder::new(cfg.clone())?),
        Some(_) => Box::new(ExternalEncoder::new(cfg.clone())?),
    })
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    text: String,
    endpoint: String,
    dim: usize,
    vector: Vec<f64>,
}

/// Client for an HTTP embedding service with an on-disk cache keyed by
/// `(normalized text, endpoint, dim)`.
pub struct ExternalEncoder {
    dim: usize,
    endpoint: String,
    agent: ureq::Agent,
    cache: RwLock<HashMap<String, Vec<f64>>>,
    log: Option<Mutex<File>>,
}

impl ExternalEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let ext = cfg
            .external
            .clone()
            .ok_or_else(|| EncoderError::Config("no external endpoint configured".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(ext.timeout_secs)))
            .build()
            .into();
        let mut cache = HashMap::new();
        let log = match &ext.cache_path {
            None => None,
            Some(path) => {
                if path.exists() {
                    let f = File::open(path).map_err(|e| EncoderError::Cache(e.to_string()))?;
                    for line in BufReader::new(f).lines() {
                        let line = line.map_err(|e| EncoderError::Cache(e.to_string()))?;
                        if line.trim().is_empty() {
                            continue;
                        }
                        let rec: CacheRecord = serde_json::from_str(&line)
                            .map_err(|e| EncoderError::Cache(e.to_string()))?;
                        if rec.endpoint == ext.endpoint && rec.dim == cfg.d_text {
                            cache.insert(rec.text, rec.vector);
                        }
                    }
                }
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| EncoderError::Cache(e.to_string()))?;
                Some(Mutex::new(f))
            }
        };
        Ok(Self {
            dim: cfg.d_text,
            endpoint: ext.endpoint,
            agent,
            cache: RwLock::new(cache),
            log,
        })
    }

    fn fetch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EncoderError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { texts })
            .map_err(|e| match e {
                ureq::Error::StatusCode(code) => EncoderError::BadResponse(format!("HTTP status {code}")),
                other => EncoderError::Transport(other.to_string()),
            })?;
        let body: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EncoderError::BadResponse(e.to_string()))?;
        if body.embeddings.len() != texts.len() {
            return Err(EncoderError::BadResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                body.embeddings.len()
            )));
        }
        let mut out = Vec::with_capacity(texts.len());
        for (i, mut v) in body.embeddings.into_iter().enumerate() {
            if v.len() != self.dim {
                return Err(EncoderError::BadResponse(format!(
                    "embedding {i} has width {}, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            if !l2_normalize(&mut v) {
                return Err(EncoderError::BadResponse(format!("embedding {i} is zero or non-finite")));
            }
            out.push(v);
        }
        Ok(out)
    }

    fn remember(&self, text: &str, v: &[f64]) -> Result<(), EncoderError> {
        self.cache.write().unwrap().insert(text.to_string(), v.to_vec());
        if let Some(log) = &self.log {
            let rec = CacheRecord {
                text: text.to_string(),
                endpoint: self.endpoint.clone(),
                dim: self.dim,
                vector: v.to_vec(),
            };
            let mut line = serde_json::to_string(&rec).map_err(|e| EncoderError::Cache(e.to_string()))?;
            line.push('\n');
            let mut f = log.lock().unwrap();
            f.write_all(line.as_bytes()).map_err(|e| EncoderError::Cache(e.to_string()))?;
        }
        Ok(())
    }
}

impl TextEncoder for ExternalEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<TextEmbedding, EncoderError> {
        Ok(self.encode_batch(&[text])?.remove(0))
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<TextEmbedding>, EncoderError> {
        let mut norms = Vec::with_capacity(texts.len());
        for (index, t) in texts.iter().enumerate() {
            let n = normalize_text(t);
            if n.is_empty() {
                return Err(EncoderError::Batch {
                    index,
                    source: Box::new(EncoderError::Empty(t.to_string())),
                });
            }
            norms.push(n);
        }
        let missing: Vec<String> = {
            let cache = self.cache.read().unwrap();
            let mut m: Vec<String> = norms.iter().filter(|n| !cache.contains_key(*n)).cloned().collect();
            m.sort();
            m.dedup();
            m
        };
        if !missing.is_empty() {
            let fetched = self.fetch(&missing)?;
            for (t, v) in missing.iter().zip(&fetched) {
                self.remember(t, v)?;
            }
        }
        let cache = self.cache.read().unwrap();
        Ok(norms
            .iter()
            .map(|n| TextEmbedding {
                vector: cache[n].clone(),
                source: EmbeddingSource::External,
            })
            .collect())
    }
}
