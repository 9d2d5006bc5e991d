use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{ChatRequest, LlmError, LlmProvider};

/// Disk cache in front of another provider. Entries are keyed by model,
/// temperature, prompt digest and re-ask attempt.
pub struct CachingProvider {
    inner: Arc<dyn LlmProvider>,
    dir: PathBuf,
    misses: AtomicUsize,
    hits: AtomicUsize,
}

impl CachingProvider {
    pub fn new(inner: Arc<dyn LlmProvider>, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            inner,
            dir,
            misses: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        })
    }

    /// Number of requests forwarded to the wrapped provider.
    pub fn provider_calls(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    fn key(request: &ChatRequest) -> String {
        let mut hasher = Sha256::new();
        hasher.update(request.model_id.as_bytes());
        hasher.update(b"\n");
        hasher.update(request.temperature.to_bits().to_le_bytes());
        hasher.update(request.prompt.digest().as_bytes());
        hasher.update(request.attempt.to_le_bytes());
        hex::encode(hasher.finalize())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    static SEQ: AtomicUsize = AtomicUsize::new(0);
    let seq = SEQ.fetch_add(1, Ordering::Relaxed);
    let tmp = path.with_extension(format!("tmp{}-{seq}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

impl LlmProvider for CachingProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let path = self.dir.join(format!("{}.txt", Self::key(request)));
        if let Ok(hit) = fs::read_to_string(&path) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let reply = self.inner.complete(request)?;
        write_atomic(&path, reply.as_bytes())?;
        Ok(reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::mock::{HeuristicRule, MockProvider};
    use crate::llm::templates::{render_prompt, TemplateId};

    #[test]
    fn second_call_is_a_byte_identical_hit() {
        let dir = tempfile::tempdir().unwrap();
        let mock = Arc::new(MockProvider::default().with_fallback(Arc::new(HeuristicRule::default())));
        let cache = CachingProvider::new(mock.clone(), dir.path()).unwrap();
        let slots = [("sec_filing_text".to_string(), "Acme makes anvils. More.".to_string())].into();
        let request = ChatRequest {
            model_id: "m".into(),
            prompt: render_prompt(TemplateId::FilingParse, &slots).unwrap(),
            max_retries: 0,
            temperature: 0.0,
            attempt: 0,
        };
        let first = cache.complete(&request).unwrap();
        let second = cache.complete(&request).unwrap();
        assert_eq!(first, second);
        assert_eq!(first, mock.complete(&request).unwrap());
        assert_eq!(cache.provider_calls(), 1);
        assert_eq!(cache.cache_hits(), 1);
    }
}
