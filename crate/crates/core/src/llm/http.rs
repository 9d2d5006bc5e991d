//! HTTP chat-completion provider.
//!
//! Speaks the common `{model, messages, temperature}` request shape and reads
//! `choices[0].message.content` back. Transient failures (transport errors,
//! 408, 429, 5xx) are retried with exponential backoff; other non-2xx
//! statuses fail immediately.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatRequest, LlmError, LlmProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub endpoint_url: String,
    pub api_key_env: String,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    /// Base delay for exponential backoff between retries.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_max_concurrent() -> usize {
    4
}

fn default_timeout() -> f64 {
    60.0
}

fn default_backoff_ms() -> u64 {
    500
}

impl ProviderConfig {
    pub fn new(endpoint_url: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            api_key_env: api_key_env.into(),
            max_concurrent: default_max_concurrent(),
            timeout_s: default_timeout(),
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_concurrent == 0 {
            return Err("max_concurrent must be at least 1".into());
        }
        if !(self.timeout_s > 0.0) {
            return Err("timeout_s must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("{0}")]
pub struct TransportError(pub String);

/// One POST with a JSON body. Implementations must not treat non-2xx as errors.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError>;
}

pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut request = agent.post(url);
        if let Some(key) = bearer {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| TransportError(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

/// Counting semaphore bounding in-flight requests.
pub struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    semaphore: &'a Semaphore,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().unwrap();
        while *available == 0 {
            available = self.freed.wait(available).unwrap();
        }
        *available -= 1;
        Permit { semaphore: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.semaphore.available.lock().unwrap() += 1;
        self.semaphore.freed.notify_one();
    }
}

fn retryable(status: u16) -> bool {
    status == 408 || status == 429 || (500..600).contains(&status)
}

fn excerpt(body: &str) -> String {
    body.chars().take(300).collect()
}

/// Shared retrying, concurrency-bounded JSON POST client.
pub struct HttpClient {
    config: ProviderConfig,
    transport: Arc<dyn Transport>,
    gate: Semaphore,
}

impl HttpClient {
    pub fn new(config: ProviderConfig, transport: Arc<dyn Transport>) -> Result<Self, String> {
        config.validate()?;
        let gate = Semaphore::new(config.max_concurrent);
        Ok(Self {
            config,
            transport,
            gate,
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn api_key(&self) -> Result<Option<String>, LlmError> {
        if self.config.api_key_env.is_empty() {
            return Ok(None);
        }
        std::env::var(&self.config.api_key_env)
            .map(Some)
            .map_err(|_| LlmError::MissingApiKey(self.config.api_key_env.clone()))
    }

    pub fn post(&self, body: &Value, max_retries: u32) -> Result<Value, LlmError> {
        let key = self.api_key()?;
        let timeout = Duration::from_secs_f64(self.config.timeout_s);
        let mut attempt = 0;
        loop {
            let outcome = {
                let _permit = self.gate.acquire();
                self.transport
                    .post_json(&self.config.endpoint_url, key.as_deref(), body, timeout)
            };
            let failure = match outcome {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    return serde_json::from_str(&resp.body).map_err(|e| LlmError::Provider {
                        status: resp.status,
                        body: format!("unparseable body ({e}): {}", excerpt(&resp.body)),
                    });
                }
                Ok(resp) if !retryable(resp.status) => {
                    return Err(LlmError::Provider {
                        status: resp.status,
                        body: excerpt(&resp.body),
                    });
                }
                Ok(resp) => format!("status {}: {}", resp.status, excerpt(&resp.body)),
                Err(e) => e.0,
            };
            attempt += 1;
            if attempt > max_retries {
                return Err(LlmError::Transport {
                    attempts: attempt,
                    message: failure,
                });
            }
            let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
            log::debug!("retrying after {failure} in {delay} ms");
            std::thread::sleep(Duration::from_millis(delay));
        }
    }
}

pub struct HttpProvider {
    client: HttpClient,
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, String> {
        Self::with_transport(config, Arc::new(UreqTransport))
    }

    pub fn with_transport(config: ProviderConfig, transport: Arc<dyn Transport>) -> Result<Self, String> {
        Ok(Self {
            client: HttpClient::new(config, transport)?,
        })
    }
}

impl LlmProvider for HttpProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let body = json!({
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt.text}],
            "temperature": request.temperature,
        });
        let reply = self.client.post(&body, request.max_retries)?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| LlmError::Provider {
                status: 200,
                body: format!("no choices[0].message.content in {}", excerpt(&reply.to_string())),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::templates::{render_prompt, TemplateId};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct FakeTransport {
        statuses: Mutex<Vec<u16>>,
        in_flight: AtomicUsize,
        peak: AtomicUsize,
        calls: AtomicUsize,
        hold: Duration,
    }

    impl FakeTransport {
        fn new(statuses: Vec<u16>, hold: Duration) -> Self {
            Self {
                statuses: Mutex::new(statuses),
                in_flight: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
                calls: AtomicUsize::new(0),
                hold,
            }
        }
    }

    impl Transport for FakeTransport {
        fn post_json(
            &self,
            _url: &str,
            _bearer: Option<&str>,
            body: &Value,
            _timeout: Duration,
        ) -> Result<HttpResponse, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(self.hold);
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            let status = {
                let mut statuses = self.statuses.lock().unwrap();
                if statuses.len() > 1 {
                    statuses.remove(0)
                } else {
                    statuses[0]
                }
            };
            if status == 0 {
                return Err(TransportError("connection reset".into()));
            }
            let content = format!("echo {}", body["model"].as_str().unwrap_or(""));
            Ok(HttpResponse {
                status,
                body: json!({"choices": [{"message": {"content": content}}]}).to_string(),
            })
        }
    }

    fn request(max_retries: u32) -> ChatRequest {
        let slots = [("sec_filing_text".to_string(), "x".to_string())].into();
        ChatRequest {
            model_id: "m1".into(),
            prompt: render_prompt(TemplateId::FilingParse, &slots).unwrap(),
            max_retries,
            temperature: 0.0,
            attempt: 0,
        }
    }

    fn config() -> ProviderConfig {
        ProviderConfig {
            backoff_ms: 0,
            api_key_env: String::new(),
            ..ProviderConfig::new("http://fake", "")
        }
    }

    #[test]
    fn retries_transient_then_succeeds() {
        let transport = Arc::new(FakeTransport::new(vec![0, 503, 200], Duration::ZERO));
        let provider = HttpProvider::with_transport(config(), transport.clone()).unwrap();
        assert_eq!(provider.complete(&request(2)).unwrap(), "echo m1");
        assert_eq!(transport.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_retries_is_transport_error() {
        let transport = Arc::new(FakeTransport::new(vec![0], Duration::ZERO));
        let provider = HttpProvider::with_transport(config(), transport.clone()).unwrap();
        match provider.complete(&request(2)) {
            Err(LlmError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_retryable_status_fails_fast() {
        let transport = Arc::new(FakeTransport::new(vec![401], Duration::ZERO));
        let provider = HttpProvider::with_transport(config(), transport.clone()).unwrap();
        match provider.complete(&request(5)) {
            Err(LlmError::Provider { status, .. }) => assert_eq!(status, 401),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(transport.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn in_flight_requests_stay_bounded() {
        let transport = Arc::new(FakeTransport::new(vec![200], Duration::from_millis(15)));
        let provider = Arc::new(
            HttpProvider::with_transport(
                ProviderConfig {
                    max_concurrent: 3,
                    ..config()
                },
                transport.clone(),
            )
            .unwrap(),
        );
        std::thread::scope(|scope| {
            for _ in 0..12 {
                let provider = provider.clone();
                scope.spawn(move || provider.complete(&request(0)).unwrap());
            }
        });
        assert_eq!(transport.calls.load(Ordering::SeqCst), 12);
        assert!(transport.peak.load(Ordering::SeqCst) <= 3);
        assert!(transport.peak.load(Ordering::SeqCst) >= 2);
    }

    #[test]
    fn zero_concurrency_is_rejected() {
        let cfg = ProviderConfig {
            max_concurrent: 0,
            ..config()
        };
        assert!(HttpProvider::new(cfg).is_err());
    }
}
