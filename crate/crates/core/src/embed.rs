//! Embedding providers.

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::llm::http::{HttpClient, Transport, UreqTransport};
use crate::llm::{LlmError, ProviderConfig};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("malformed embedding response: {0}")]
    Malformed(String),
    #[error("embedding cache: {0}")]
    Cache(#[from] std::io::Error),
}

pub trait EmbeddingProvider: Send + Sync {
    /// Raw vectors, one per text. Normalization happens in [`embed`].
    fn embed_batch(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Arc<P> {
    fn embed_batch(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        (**self).embed_batch(model_id, texts)
    }
}

pub fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = dot(a, a).sqrt() * dot(b, b).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

/// Embeds `texts` and returns unit-norm vectors.
pub fn embed(
    texts: &[String],
    provider: &dyn EmbeddingProvider,
    model_id: &str,
) -> Result<Vec<Vec<f64>>, EmbedError> {
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(EmbedError::Usage(format!("text {i} is empty")));
    }
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let mut vectors = provider.embed_batch(model_id, texts)?;
    if vectors.len() != texts.len() {
        return Err(EmbedError::Malformed(format!(
            "{} vectors for {} texts",
            vectors.len(),
            texts.len()
        )));
    }
    for v in &mut vectors {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::Malformed("empty or non-finite vector".into()));
        }
        normalize(v);
    }
    Ok(vectors)
}

/// Lowercased alphanumeric tokens.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Offline embedder: each token maps to a fixed Gaussian vector seeded by its
/// hash, and a text is the sum over its tokens. Texts that share words land
/// near each other.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dimension: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dimension: 64 }
    }
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        Self { dimension }
    }

    pub fn token_vector(&self, model_id: &str, token: &str) -> Vec<f64> {
        let digest = Sha256::new()
            .chain_update(model_id.as_bytes())
            .chain_update([0u8])
            .chain_update(token.as_bytes())
            .finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dimension).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    pub fn vector(&self, model_id: &str, text: &str) -> Vec<f64> {
        let mut sum = vec![0.0; self.dimension];
        let mut any = false;
        for token in tokens(text) {
            any = true;
            for (s, x) in sum.iter_mut().zip(self.token_vector(model_id, &token)) {
                *s += x;
            }
        }
        if !any {
            sum = self.token_vector(model_id, text);
        }
        sum
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn embed_batch(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| self.vector(model_id, t)).collect())
    }
}

/// OpenAI-style `/embeddings` endpoint: `{model, input: [...]}` in,
/// `data[i].embedding` out.
pub struct HttpEmbedder {
    client: HttpClient,
    max_retries: u32,
}

impl HttpEmbedder {
    pub fn new(config: ProviderConfig, max_retries: u32) -> Result<Self, String> {
        Self::with_transport(config, Arc::new(UreqTransport), max_retries)
    }

    pub fn with_transport(
        config: ProviderConfig,
        transport: Arc<dyn Transport>,
        max_retries: u32,
    ) -> Result<Self, String> {
        Ok(Self {
            client: HttpClient::new(config, transport)?,
            max_retries,
        })
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed_batch(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let reply = self
            .client
            .post(&json!({"model": model_id, "input": texts}), self.max_retries)?;
        let data = reply
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::Malformed("missing data array".into()))?;
        data.iter()
            .map(|item| {
                item.get("embedding")
                    .and_then(Value::as_array)
                    .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                    .ok_or_else(|| EmbedError::Malformed("missing embedding".into()))
            })
            .collect()
    }
}

/// Content-addressed vector cache in front of another provider. Each vector is
/// stored as little-endian f64s under the digest of (model_id, text).
pub struct CachedEmbedder {
    inner: Arc<dyn EmbeddingProvider>,
    dir: PathBuf,
    calls: AtomicUsize,
}

impl CachedEmbedder {
    pub fn new(inner: Arc<dyn EmbeddingProvider>, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            inner,
            dir,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn provider_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn path(&self, model_id: &str, text: &str) -> PathBuf {
        let digest = Sha256::new()
            .chain_update(model_id.as_bytes())
            .chain_update([0u8])
            .chain_update(text.as_bytes())
            .finalize();
        self.dir.join(format!("{}.f64", hex::encode(digest)))
    }
}

fn read_vector(path: &std::path::Path) -> Option<Vec<f64>> {
    let bytes = fs::read(path).ok()?;
    if bytes.is_empty() || bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

impl EmbeddingProvider for CachedEmbedder {
    fn embed_batch(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut out: Vec<Option<Vec<f64>>> = texts
            .iter()
            .map(|t| read_vector(&self.path(model_id, t)))
            .collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let vectors = self.inner.embed_batch(model_id, &batch)?;
            if vectors.len() != batch.len() {
                return Err(EmbedError::Malformed(format!(
                    "{} vectors for {} texts",
                    vectors.len(),
                    batch.len()
                )));
            }
            for (&i, v) in missing.iter().zip(vectors) {
                let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                crate::llm::cache::write_atomic(&self.path(model_id, &texts[i]), &bytes)?;
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hash_embedder_is_deterministic_and_unit() {
        let e = HashEmbedder::default();
        let out = embed(&texts(&["chip demand rises", "chip demand rises", "!!"]), &e, "m").unwrap();
        assert_eq!(out[0], out[1]);
        for v in &out {
            assert!((dot(v, v).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shared_words_are_closer() {
        let e = HashEmbedder::new(128);
        let out = embed(
            &texts(&["graphics processors for data centers", "data centers buy graphics processors", "vaccine trial results"]),
            &e,
            "m",
        )
        .unwrap();
        assert!(cosine(&out[0], &out[1]) > cosine(&out[0], &out[2]));
    }

    #[test]
    fn empty_text_is_a_usage_error() {
        let e = HashEmbedder::default();
        assert!(matches!(embed(&texts(&["ok", " "]), &e, "m"), Err(EmbedError::Usage(_))));
    }

    #[test]
    fn cache_skips_provider_on_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let cached = CachedEmbedder::new(Arc::new(HashEmbedder::default()), dir.path()).unwrap();
        let a = embed(&texts(&["alpha", "beta"]), &cached, "m").unwrap();
        assert_eq!(cached.provider_calls(), 1);
        let b = embed(&texts(&["beta", "alpha"]), &cached, "m").unwrap();
        assert_eq!(cached.provider_calls(), 1);
        assert_eq!(a[0], b[1]);
        assert_eq!(a[1], b[0]);
    }
}
