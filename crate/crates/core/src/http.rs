//! Blocking JSON-over-HTTP client shared by the live backends.

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

const MAX_RESPONSE_BYTES: u64 = 256 * 1024 * 1024;

/// Exponential backoff for transport failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        // attempt is 1-based; no delay before the first try
        if attempt <= 1 {
            return Duration::ZERO;
        }
        let factor = 1u32 << (attempt - 2).min(16);
        (self.base_delay * factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone)]
pub struct Endpoint {
    pub url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl Endpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            timeout: Duration::from_secs(300),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

pub(crate) struct JsonClient {
    backend: &'static str,
    endpoint: Endpoint,
    agent: ureq::Agent,
}

enum Failure {
    Retryable(String),
    Fatal(String),
}

impl JsonClient {
    pub(crate) fn new(backend: &'static str, endpoint: Endpoint) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            backend,
            endpoint,
            agent,
        }
    }

    /// POSTs `body` and decodes the JSON reply. Transport errors, 429 and 5xx
    /// are retried per the endpoint's policy; other statuses fail at once.
    pub(crate) fn post<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R> {
        let policy = self.endpoint.retry;
        let attempts = policy.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            thread::sleep(policy.delay_before(attempt));
            match self.post_once(body) {
                Ok(r) => return Ok(r),
                Err(Failure::Fatal(message)) => {
                    return Err(Error::Backend {
                        backend: self.backend,
                        attempts: attempt,
                        message,
                    })
                }
                Err(Failure::Retryable(message)) => {
                    log::warn!(
                        "{} backend attempt {attempt}/{attempts} failed: {message}",
                        self.backend
                    );
                    last = message;
                }
            }
        }
        Err(Error::Backend {
            backend: self.backend,
            attempts,
            message: last,
        })
    }

    fn post_once<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R, Failure> {
        // compact encoding, so the bytes on the wire are the contract's
        let payload = serde_json::to_vec(body).map_err(|e| Failure::Fatal(e.to_string()))?;
        let mut req = self
            .agent
            .post(&self.endpoint.url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.endpoint.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send(&payload[..])
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Failure::Fatal(format!("HTTP {status}: {text}")));
        }
        resp.body_mut()
            .with_config()
            .limit(MAX_RESPONSE_BYTES)
            .read_json::<R>()
            .map_err(|e| Failure::Fatal(format!("malformed response: {e}")))
    }
}
