//! JSON-over-HTTP clients for external encoders, slot parsers and candidate
//! generators.
//!
//! Text encoder protocol: `POST {"texts": [..]}` answered by
//! `{"vectors": [[..], ..]}`, one vector per text in request order.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{CandidateProvider, Concurrency, SlotProvider, TextEncoder};
use crate::error::ProviderError;
use crate::numerics::EmbeddingVector;
use crate::prompt::{Bucket, SlotRequest};

type ProviderResult<T> = std::result::Result<T, ProviderError>;

/// A JSON endpoint with timeout, bounded retries and exponential backoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JsonEndpoint {
    pub url: String,
    /// Per-attempt timeout in milliseconds.
    pub timeout_ms: u64,
    /// Extra attempts after the first.
    pub retries: u32,
    /// First backoff delay in milliseconds; doubles on every retry.
    pub backoff_ms: u64,
    /// Passed through as `Authorization: Bearer <token>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bearer: Option<String>,
}

impl Default for JsonEndpoint {
    fn default() -> Self {
        Self {
            url: String::new(),
            timeout_ms: 10_000,
            retries: 3,
            backoff_ms: 100,
            bearer: None,
        }
    }
}

enum Attempt {
    Retry(ProviderError),
    Fatal(ProviderError),
}

impl JsonEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            ..Self::default()
        }
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(self.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into()
    }

    /// Posts `body` and returns the decoded JSON response.
    pub fn call(&self, body: &Value) -> ProviderResult<Value> {
        if self.url.is_empty() {
            return Err(ProviderError::Unavailable {
                attempts: 0,
                message: "no endpoint configured".into(),
            });
        }
        let agent = self.agent();
        let mut last = ProviderError::Unavailable {
            attempts: 0,
            message: "no attempt made".into(),
        };
        for attempt in 0..=self.retries {
            if attempt > 0 {
                let delay = self.backoff_ms.saturating_mul(1u64 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(&agent, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    log::debug!("attempt {} to {} failed: {e}", attempt + 1, self.url);
                    last = e;
                }
            }
        }
        Err(match last {
            ProviderError::Timeout(ms) => ProviderError::Timeout(ms),
            other => ProviderError::Unavailable {
                attempts: self.retries + 1,
                message: other.to_string(),
            },
        })
    }

    fn attempt(&self, agent: &ureq::Agent, body: &Value) -> Result<Value, Attempt> {
        let mut req = agent.post(&self.url);
        if let Some(token) = &self.bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| self.classify(e))?;
        let status = resp.status().as_u16();
        if status >= 500 {
            return Err(Attempt::Retry(ProviderError::Unavailable {
                attempts: 1,
                message: format!("server returned {status}"),
            }));
        }
        if status >= 400 {
            return Err(Attempt::Fatal(ProviderError::Protocol(format!("server returned {status}"))));
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => Attempt::Retry(ProviderError::Timeout(self.timeout_ms)),
                other => Attempt::Fatal(ProviderError::Protocol(format!("malformed response: {other}"))),
            })
    }

    fn classify(&self, e: ureq::Error) -> Attempt {
        match e {
            ureq::Error::Timeout(_) => Attempt::Retry(ProviderError::Timeout(self.timeout_ms)),
            ureq::Error::Io(ref io) if io.kind() == std::io::ErrorKind::TimedOut => {
                Attempt::Retry(ProviderError::Timeout(self.timeout_ms))
            }
            ureq::Error::BadUri(m) => Attempt::Fatal(ProviderError::Protocol(format!("bad endpoint url: {m}"))),
            other => Attempt::Retry(ProviderError::Unavailable {
                attempts: 1,
                message: other.to_string(),
            }),
        }
    }
}

/// Text encoder served over HTTP.
#[derive(Debug, Clone)]
pub struct RemoteTextEncoder {
    endpoint: JsonEndpoint,
    dim: usize,
    id: String,
}

impl RemoteTextEncoder {
    pub fn new(endpoint: JsonEndpoint, dim: usize) -> Self {
        let id = format!("remote/{}/dim={dim}", endpoint.url);
        Self { endpoint, dim, id }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

#[derive(Deserialize)]
struct VectorsResponse {
    vectors: Vec<Vec<f64>>,
}

impl TextEncoder for RemoteTextEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> ProviderResult<Vec<EmbeddingVector>> {
        let resp = self.endpoint.call(&json!({ "texts": texts }))?;
        let resp: VectorsResponse =
            serde_json::from_value(resp).map_err(|e| ProviderError::Protocol(format!("malformed response: {e}")))?;
        if resp.vectors.len() != texts.len() {
            return Err(ProviderError::Protocol(format!(
                "sent {} texts, received {} vectors",
                texts.len(),
                resp.vectors.len()
            )));
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(ProviderError::DimensionDrift {
                        declared: self.dim,
                        received: v.len(),
                    });
                }
                EmbeddingVector::unit(v).map_err(|e| ProviderError::Protocol(format!("unusable vector: {e}")))
            })
            .collect()
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::SerialOnly
    }
}

/// Slot parser served over HTTP: posts the [`SlotRequest`] and returns the
/// response object untouched (validation happens in the prompt module).
#[derive(Debug, Clone)]
pub struct HttpSlotProvider {
    pub endpoint: JsonEndpoint,
}

impl SlotProvider for HttpSlotProvider {
    fn request_slots(&self, request: &SlotRequest) -> ProviderResult<Value> {
        let body = serde_json::to_value(request).map_err(|e| ProviderError::Protocol(e.to_string()))?;
        self.endpoint.call(&body)
    }
}

/// Candidate generator served over HTTP: `POST {"phrase", "slot", "k"}`
/// answered by `{"candidates": [..]}`.
#[derive(Debug, Clone)]
pub struct HttpCandidateProvider {
    pub endpoint: JsonEndpoint,
}

#[derive(Deserialize)]
struct CandidatesResponse {
    candidates: Vec<String>,
}

impl CandidateProvider for HttpCandidateProvider {
    fn candidates(&self, phrase: &str, bucket: Bucket, k: usize) -> ProviderResult<Vec<String>> {
        let resp = self
            .endpoint
            .call(&json!({ "phrase": phrase, "slot": bucket.to_string(), "k": k }))?;
        let resp: CandidatesResponse =
            serde_json::from_value(resp).map_err(|e| ProviderError::Protocol(format!("malformed response: {e}")))?;
        Ok(resp.candidates)
    }
}
