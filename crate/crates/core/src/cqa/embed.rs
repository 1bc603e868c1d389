use serde_json::json;

use crate::error::{Error, Result};

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    /// Raw embedding; [`embed_text`] normalizes it.
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>>;
}

/// Unit-norm embedding of nonempty `text`.
pub fn embed_text(text: &str, embedder: &dyn Embedder) -> Result<Vec<f32>> {
    if text.trim().is_empty() {
        return Err(Error::Argument("cannot embed empty text".into()));
    }
    let raw = embedder.embed_raw(text)?;
    if raw.len() != embedder.dim() {
        return Err(Error::Shape(format!(
            "embedder returned {} values, expected {}",
            raw.len(),
            embedder.dim()
        )));
    }
    normalize(&raw).ok_or_else(|| Error::Numeric(format!("zero embedding for {text:?}")))
}

pub(crate) fn normalize(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Feature-hashing embedder over word unigrams, word bigrams and character
/// trigrams. Offline and deterministic.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 384;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim }
    }

    fn add(&self, v: &mut [f32], kind: u8, feature: &str, weight: f32) {
        let mut bytes = Vec::with_capacity(feature.len() + 1);
        bytes.push(kind);
        bytes.extend_from_slice(feature.as_bytes());
        let h = fnv1a(&bytes);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % self.dim as u64) as usize] += sign * weight;
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f32>> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric() && c != '\'')
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut v = vec![0.0f32; self.dim];
        for w in &words {
            self.add(&mut v, b'w', w, 1.0);
            let padded: Vec<char> = format!("<{w}>").chars().collect();
            for tri in padded.windows(3) {
                self.add(&mut v, b'c', &tri.iter().collect::<String>(), 0.5);
            }
        }
        for pair in words.windows(2) {
            self.add(&mut v, b'b', &format!("{} {}", pair[0], pair[1]), 0.7);
        }
        if v.iter().all(|&x| x == 0.0) {
            // Punctuation-only text still needs a direction.
            self.add(&mut v, b'r', text, 1.0);
        }
        Ok(v)
    }
}

/// Remote embedding endpoint speaking the common `/embeddings` JSON shape.
/// Reads `ESI_EMBED_API_KEY` (falling back to `ESI_LLM_API_KEY`),
/// `ESI_LLM_BASE_URL` and `ESI_EMBED_MODEL`.
#[derive(Clone, Debug)]
pub struct ExternalEmbedder {
    base_url: String,
    api_key: String,
    model: String,
    dim: usize,
}

impl ExternalEmbedder {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, model: impl Into<String>, dim: usize) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: api_key.into(),
            model: model.into(),
            dim,
        }
    }

    pub fn from_env() -> Result<Self> {
        let key = std::env::var("ESI_EMBED_API_KEY")
            .or_else(|_| std::env::var("ESI_LLM_API_KEY"))
            .map_err(|_| Error::Argument("ESI_EMBED_API_KEY or ESI_LLM_API_KEY must be set".into()))?;
        let base = std::env::var("ESI_LLM_BASE_URL").unwrap_or_else(|_| "https://api.openai.com/v1".into());
        let model = std::env::var("ESI_EMBED_MODEL").unwrap_or_else(|_| "text-embedding-ada-002".into());
        Ok(Self::new(base, key, model, 1536))
    }
}

impl Embedder for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f32>> {
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let resp = ureq::post(&url)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(json!({ "model": self.model, "input": text }))
            .map_err(|e| Error::Retryable(e.to_string()))?;
        let body: serde_json::Value = resp.into_json().map_err(|e| Error::Retryable(e.to_string()))?;
        body["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| Error::Retryable(format!("malformed embedding response: {body}")))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .map(|f| f as f32)
                    .ok_or_else(|| Error::Retryable("non-numeric embedding value".into()))
            })
            .collect()
    }
}

pub(crate) fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    dot / (na.sqrt() * nb.sqrt())
}
