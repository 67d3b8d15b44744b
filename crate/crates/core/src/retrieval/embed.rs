use std::hash::Hasher;
use std::time::Duration;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::RetrievalError;

/// Default dimension of the built-in provider.
pub const DEFAULT_DIMENSION: usize = 256;

/// An embedding vector. Vectors produced by an [`Embedder`] are L2-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding { values }
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scales to unit length; the zero vector is left unchanged.
    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            for v in &mut self.values {
                *v /= n;
            }
        }
        self
    }
}

/// Cosine similarity, clamped to [-1, 1]. Zero vectors have similarity 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

pub trait Embedder: Send + Sync {
    /// Identifies provider and configuration; stored in collection manifests.
    fn id(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding, RetrievalError>;
}

/// Signed feature hashing over lowercase word unigrams and character trigrams.
/// Fully deterministic and offline.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder {
            dimension: DEFAULT_DIMENSION,
        }
    }
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Result<Self, RetrievalError> {
        if dimension == 0 {
            return Err(RetrievalError::Provider("dimension must be positive".into()));
        }
        Ok(HashingEmbedder { dimension })
    }

    fn add(&self, values: &mut [f64], kind: u8, feature: &str, weight: f64) {
        let mut h = FnvHasher::default();
        h.write_u8(kind);
        h.write(feature.as_bytes());
        let hash = mix(h.finish());
        let bucket = (hash % self.dimension as u64) as usize;
        let sign = if hash >> 63 == 0 { 1.0 } else { -1.0 };
        values[bucket] += sign * weight;
    }
}

/// 64-bit avalanche finalizer (splitmix64); FNV's low bits alone bucket poorly.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Embedder for HashingEmbedder {
    fn id(&self) -> String {
        format!("hashing-v2/{}", self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding, RetrievalError> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let lower = text.to_lowercase();
        let mut values = vec![0.0; self.dimension];
        for word in lower.split(|c: char| !c.is_alphanumeric() && c != '_').filter(|w| !w.is_empty()) {
            self.add(&mut values, b'w', word, 1.0);
        }
        let chars: Vec<char> = format!(" {} ", lower.split_whitespace().collect::<Vec<_>>().join(" "))
            .chars()
            .collect();
        let mut gram = String::with_capacity(12);
        for window in chars.windows(3) {
            gram.clear();
            gram.extend(window);
            self.add(&mut values, b'c', &gram, 0.5);
        }
        let e = Embedding::new(values);
        if e.norm() == 0.0 {
            // All features cancelled out; fall back to a fixed direction so the
            // output is still unit length.
            let mut values = vec![0.0; self.dimension];
            values[0] = 1.0;
            return Ok(Embedding::new(values));
        }
        Ok(e.normalized())
    }
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    base_url: String,
    model: String,
    dimension: usize,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    /// `token_env` names the environment variable holding the API token.
    pub fn new(base_url: &str, model: &str, dimension: usize, token_env: &str) -> Result<Self, RetrievalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| RetrievalError::Provider(e.to_string()))?;
        Ok(RemoteEmbedder {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            dimension,
            token: std::env::var(token_env).ok().filter(|t| !t.is_empty()),
            client,
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote/{}/{}", self.model, self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding, RetrievalError> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let mut req = self
            .client
            .post(format!("{}/embeddings", self.base_url))
            .json(&json!({ "model": self.model, "input": text, "dimensions": self.dimension }));
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| RetrievalError::Provider(e.to_string()))?;
        let status = resp.status();
        let body: Value = resp.json().map_err(|e| RetrievalError::Provider(e.to_string()))?;
        if !status.is_success() {
            return Err(RetrievalError::Provider(format!("HTTP {status}: {body}")));
        }
        let values: Vec<f64> = body["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| RetrievalError::Provider("response without data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| RetrievalError::Provider("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        if values.len() != self.dimension {
            return Err(RetrievalError::Dimension {
                expected: self.dimension,
                found: values.len(),
            });
        }
        Ok(Embedding::new(values).normalized())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_normalized() {
        let e = HashingEmbedder::default();
        let a = e.embed("fix the off-by-one in range_sum").unwrap();
        assert_eq!(a, e.embed("fix the off-by-one in range_sum").unwrap());
        assert_eq!(a.dimension(), 256);
        assert!((a.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(HashingEmbedder::default().embed("  \n"), Err(RetrievalError::EmptyText)));
    }

    #[test]
    fn related_texts_are_closer() {
        let e = HashingEmbedder::default();
        let a = e.embed("parse a date string into a timestamp").unwrap();
        let b = e.embed("parse date strings into timestamps").unwrap();
        let c = e.embed("render a bar chart of sales").unwrap();
        assert!(cosine(&a.values, &b.values) > cosine(&a.values, &c.values));
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine(&[2.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }
}
