//! Chat-completion gateway.
//!
//! Stages talk to a [`Gateway`], which renders prompts, calls an
//! [`LlmProvider`], and re-asks when the response cannot be parsed. After the
//! retry budget is spent the gateway returns `Ok(None)` and keeps a
//! [`FailureRecord`]; each stage decides how to degrade from there.

pub mod cache;
pub mod extract;
pub mod http;
pub mod mock;
pub mod templates;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use cache::CachingProvider;
pub use extract::{extract_object, extract_structured, ExtractError};
pub use http::{HttpProvider, ProviderConfig};
pub use mock::{FixtureStore, HeuristicRule, MockProvider, MockRule};
pub use templates::{render_prompt, Descriptions, Prompt, RenderError, TemplateId};

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider returned status {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("mock miss: no fixture or fallback for digest {digest} ({template})")]
    MockMiss { template: TemplateId, digest: String },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
    #[error("missing API key: environment variable {0} is not set")]
    MissingApiKey(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model_id: String,
    pub prompt: Prompt,
    pub max_retries: u32,
    pub temperature: f64,
    /// Zero for the first ask, incremented on each re-ask.
    pub attempt: u32,
}

pub trait LlmProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

impl<P: LlmProvider + ?Sized> LlmProvider for Arc<P> {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub template: TemplateId,
    pub digest: String,
    pub reason: String,
}

pub const DEFAULT_MAX_RETRIES: u32 = 2;

pub struct Gateway {
    provider: Arc<dyn LlmProvider>,
    pub model_id: String,
    pub max_retries: u32,
    pub temperature: f64,
    failures: Mutex<Vec<FailureRecord>>,
}

impl Gateway {
    pub fn new(provider: Arc<dyn LlmProvider>, model_id: impl Into<String>) -> Self {
        Self {
            provider,
            model_id: model_id.into(),
            max_retries: DEFAULT_MAX_RETRIES,
            temperature: 0.0,
            failures: Mutex::new(Vec::new()),
        }
    }

    pub fn with_max_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        assert!(temperature >= 0.0, "temperature must be non-negative");
        self.temperature = temperature;
        self
    }

    pub fn render(
        &self,
        template: TemplateId,
        slots: &BTreeMap<String, String>,
    ) -> Result<Prompt, LlmError> {
        Ok(render_prompt(template, slots)?)
    }

    /// Asks once plus up to `max_retries` re-asks until `parse` accepts the
    /// response. Transport and provider errors are returned immediately.
    pub fn ask<T>(
        &self,
        prompt: &Prompt,
        parse: impl Fn(&str) -> Result<T, ExtractError>,
    ) -> Result<Option<T>, LlmError> {
        let mut last_error = None;
        for attempt in 0..=self.max_retries {
            let request = ChatRequest {
                model_id: self.model_id.clone(),
                prompt: prompt.clone(),
                max_retries: self.max_retries,
                temperature: self.temperature,
                attempt,
            };
            let raw = self.provider.complete(&request)?;
            match parse(&raw) {
                Ok(value) => return Ok(Some(value)),
                Err(e) => last_error = Some(e),
            }
        }
        let reason = last_error.map(|e| e.to_string()).unwrap_or_default();
        log::warn!(
            "{} response unusable after {} attempt(s): {reason}",
            prompt.template,
            self.max_retries + 1
        );
        self.failures.lock().unwrap().push(FailureRecord {
            template: prompt.template,
            digest: prompt.digest(),
            reason,
        });
        Ok(None)
    }

    pub fn failures(&self) -> Vec<FailureRecord> {
        self.failures.lock().unwrap().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Scripted {
        replies: Vec<&'static str>,
        calls: AtomicU32,
    }

    impl LlmProvider for Scripted {
        fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let i = (request.attempt as usize).min(self.replies.len() - 1);
            Ok(self.replies[i].to_string())
        }
    }

    fn prompt() -> Prompt {
        let slots = [("sec_filing_text".to_string(), "x".to_string())].into();
        render_prompt(TemplateId::FilingParse, &slots).unwrap()
    }

    #[test]
    fn reasks_until_parse_succeeds() {
        let provider = Arc::new(Scripted {
            replies: vec!["nope", r#"{"category": "Sector"}"#],
            calls: AtomicU32::new(0),
        });
        let gateway = Gateway::new(provider.clone(), "m");
        let got = gateway
            .ask(&prompt(), |raw| extract_structured(raw, &["category"]))
            .unwrap();
        assert_eq!(got.unwrap()["category"], "Sector");
        assert_eq!(provider.calls.load(Ordering::SeqCst), 2);
        assert!(gateway.failures().is_empty());
    }

    #[test]
    fn exhaustion_records_failure() {
        let provider = Arc::new(Scripted {
            replies: vec!["nope"],
            calls: AtomicU32::new(0),
        });
        let gateway = Gateway::new(provider.clone(), "m").with_max_retries(2);
        let got = gateway
            .ask(&prompt(), |raw| extract_structured(raw, &["category"]))
            .unwrap();
        assert!(got.is_none());
        assert_eq!(provider.calls.load(Ordering::SeqCst), 3);
        assert_eq!(gateway.failures().len(), 1);
        assert_eq!(gateway.failures()[0].template, TemplateId::FilingParse);
    }
}
