//! HTTP client for JSON completion APIs.
//!
//! Speaks the common completion wire shape (`model`, `prompt`,
//! `max_tokens`, `temperature`, `logprobs`, `echo`, `stop`) so the
//! pipeline can drive any locally hosted model. Transport failures are
//! retried with exponential backoff; every logical request carries a
//! client-generated idempotency key that is reused across its retries.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backend::{
    FinishReason, GenerationBackend, GenerationRequest, GenerationResult, SequenceScore,
    TokenDistribution, TokenLogprob,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Full URL of the completions endpoint.
    pub base_url: String,
    /// Name of the environment variable holding the API key; resolved
    /// at construction, never stored in config files.
    pub api_key_env: Option<String>,
    pub model_name: String,
    pub timeout_ms: u64,
    /// Upper bound on concurrent in-flight requests through this handle.
    pub max_in_flight: usize,
    /// Total attempts per logical request (first try included).
    pub max_attempts: u32,
    /// Base backoff; doubles per retry.
    pub retry_backoff_ms: u64,
    /// JSON field name image references are forwarded under; `None`
    /// drops them from the payload.
    pub image_field: Option<String>,
    /// How many alternatives to request per emitted token.
    pub logprobs_top_k: usize,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            base_url: "http://127.0.0.1:8000/v1/completions".to_string(),
            api_key_env: None,
            model_name: "local-model".to_string(),
            timeout_ms: 30_000,
            max_in_flight: 8,
            max_attempts: 3,
            retry_backoff_ms: 250,
            image_field: Some("image".to_string()),
            logprobs_top_k: 5,
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    permits: Semaphore,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self> {
        if config.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        if config.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("api key environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("failed to build http client: {e}")))?;
        let permits = Semaphore::new(config.max_in_flight);
        Ok(HttpBackend {
            config,
            api_key,
            client,
            permits,
        })
    }

    fn post(&self, body: &WireRequest) -> Result<WireResponse> {
        let _permit = self.permits.acquire();
        let idempotency_key = uuid::Uuid::new_v4().to_string();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match self.post_once(body, &idempotency_key) {
                Ok(response) => return Ok(response),
                Err(e) if e.is_retryable() && attempt < self.config.max_attempts => {
                    let backoff = self.config.retry_backoff_ms << (attempt - 1);
                    log::warn!(
                        "transient backend failure (attempt {attempt}/{}): {e}; retrying in {backoff} ms",
                        self.config.max_attempts
                    );
                    std::thread::sleep(Duration::from_millis(backoff));
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn post_once(&self, body: &WireRequest, idempotency_key: &str) -> Result<WireResponse> {
        let mut request = self
            .client
            .post(&self.config.base_url)
            .header("Idempotency-Key", idempotency_key)
            .json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                Error::Timeout(e.to_string())
            } else {
                Error::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Error::Transport(format!("server returned {status}")));
        }
        if !status.is_success() {
            let detail = response.text().unwrap_or_default();
            return Err(Error::Rejected(format!("{status}: {detail}")));
        }
        response
            .json::<WireResponse>()
            .map_err(|e| Error::Rejected(format!("malformed response body: {e}")))
    }

    fn wire_request(&self, request: &GenerationRequest) -> WireRequest {
        let mut extra = BTreeMap::new();
        if let (Some(field), Some(image)) = (&self.config.image_field, &request.image_ref) {
            extra.insert(field.clone(), serde_json::Value::String(image.clone()));
        }
        WireRequest {
            model: self.config.model_name.clone(),
            prompt: request.prompt.clone(),
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            logprobs: Some(self.config.logprobs_top_k),
            echo: false,
            stop: if request.stop_sequences.is_empty() {
                None
            } else {
                Some(request.stop_sequences.clone())
            },
            seed: request.seed,
            extra,
        }
    }

    fn first_choice(response: WireResponse) -> Result<WireChoice> {
        response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Rejected("response contained no choices".into()))
    }
}

impl GenerationBackend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        request.validate()?;
        let choice = Self::first_choice(self.post(&self.wire_request(request))?)?;
        let token_logprobs = choice.logprobs.as_ref().map(logprobs_to_tokens);
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("error") => FinishReason::Error,
            _ => FinishReason::Stop,
        };
        Ok(GenerationResult {
            text: choice.text,
            token_logprobs,
            finish_reason,
        })
    }

    fn score_sequence(
        &self,
        prompt: &str,
        image_ref: Option<&str>,
        continuation: &str,
    ) -> Result<SequenceScore> {
        if continuation.is_empty() {
            return Err(Error::EmptyInput("continuation is empty".into()));
        }
        let mut wire = self.wire_request(&GenerationRequest {
            prompt: format!("{prompt}{continuation}"),
            image_ref: image_ref.map(str::to_string),
            max_tokens: 1,
            temperature: 0.0,
            stop_sequences: Vec::new(),
            seed: None,
        });
        wire.max_tokens = 0;
        wire.echo = true;
        wire.logprobs = Some(1);
        let choice = Self::first_choice(self.post(&wire)?)?;
        let logprobs = choice.logprobs.ok_or_else(|| {
            Error::Capability("backend did not return logprobs for scoring".into())
        })?;
        let offsets = logprobs.text_offset.ok_or_else(|| {
            Error::Capability("backend did not return text offsets for scoring".into())
        })?;
        let boundary = prompt.len();
        let mut per_token = Vec::new();
        for (i, offset) in offsets.iter().enumerate() {
            if *offset < boundary {
                continue;
            }
            match logprobs.token_logprobs.get(i).copied().flatten() {
                Some(lp) => per_token.push(lp),
                None => {
                    return Err(Error::Capability(
                        "backend returned a null logprob inside the continuation".into(),
                    ))
                }
            }
        }
        if per_token.is_empty() {
            return Err(Error::Capability(
                "continuation produced no scored tokens".into(),
            ));
        }
        Ok(SequenceScore {
            total: per_token.iter().sum(),
            per_token,
        })
    }

    fn next_token_distribution(
        &self,
        prompt: &str,
        image_ref: Option<&str>,
        top_k: usize,
    ) -> Result<TokenDistribution> {
        if top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        let mut wire = self.wire_request(&GenerationRequest {
            prompt: prompt.to_string(),
            image_ref: image_ref.map(str::to_string),
            max_tokens: 1,
            temperature: 0.0,
            stop_sequences: Vec::new(),
            seed: None,
        });
        wire.logprobs = Some(top_k);
        let choice = Self::first_choice(self.post(&wire)?)?;
        let logprobs = choice.logprobs.ok_or_else(|| {
            Error::Capability("backend did not return logprobs for distributions".into())
        })?;
        let first = logprobs
            .top_logprobs
            .as_ref()
            .and_then(|t| t.first())
            .ok_or_else(|| Error::Capability("backend returned no top_logprobs".into()))?;
        let mut support: Vec<(String, f64)> = first
            .iter()
            .map(|(token, lp)| (token.clone(), lp.exp()))
            .collect();
        support.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        support.truncate(top_k);
        TokenDistribution::from_weighted(support)
    }
}

fn logprobs_to_tokens(lp: &WireLogprobs) -> Vec<TokenLogprob> {
    let empty: Vec<BTreeMap<String, f64>> = Vec::new();
    let tops = lp.top_logprobs.as_ref().unwrap_or(&empty);
    lp.tokens
        .iter()
        .enumerate()
        .map(|(i, token)| {
            let logprob = lp.token_logprobs.get(i).copied().flatten().unwrap_or(0.0);
            let mut top_k: Vec<(String, f64)> = tops
                .get(i)
                .map(|m| m.iter().map(|(t, l)| (t.clone(), *l)).collect())
                .unwrap_or_default();
            top_k.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            if !top_k.iter().any(|(t, _)| t == token) {
                top_k.push((token.clone(), logprob));
            }
            TokenLogprob {
                token: token.clone(),
                logprob,
                top_k,
            }
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct WireRequest {
    model: String,
    prompt: String,
    max_tokens: usize,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<usize>,
    echo: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Debug, Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<BTreeMap<String, f64>>>,
    #[serde(default)]
    text_offset: Option<Vec<usize>>,
}

/// Minimal counting semaphore for the in-flight cap.
struct Semaphore {
    state: Mutex<usize>,
    available: Condvar,
}

struct SemaphorePermit<'a> {
    semaphore: &'a Semaphore,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            state: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphorePermit<'_> {
        let mut count = self.state.lock().unwrap();
        while *count == 0 {
            count = self.available.wait(count).unwrap();
        }
        *count -= 1;
        SemaphorePermit { semaphore: self }
    }
}

impl Drop for SemaphorePermit<'_> {
    fn drop(&mut self) {
        let mut count = self.semaphore.state.lock().unwrap();
        *count += 1;
        self.semaphore.available.notify_one();
    }
}
