//! Remote completion APIs described by a field mapping.
//!
//! The request body is a JSON object built from [`RequestFields`] plus any
//! static `extra` fields; the completion text is read from the response at
//! the JSON pointer `response_text`. Optional `logprobs` and `tokenizer`
//! mappings enable per-label scoring and token counting.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{BackendError, ModelBackend, SamplingParams};
use crate::prompts::Dialogue;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestFields {
    pub prompt: String,
    pub model: String,
    pub max_tokens: String,
    pub temperature: String,
    pub top_p: String,
    pub stop: String,
    /// Field for the sampling seed; omitted from requests when unset.
    pub seed: Option<String>,
}

impl Default for RequestFields {
    fn default() -> Self {
        Self {
            prompt: "prompt".into(),
            model: "model".into(),
            max_tokens: "max_tokens".into(),
            temperature: "temperature".into(),
            top_p: "top_p".into(),
            stop: "stop".into(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobsMapping {
    /// Fields merged into a one-token request, e.g. `{"logprobs": 20}`.
    #[serde(default)]
    pub request: Map<String, Value>,
    /// Pointer to an object mapping token text to log-probability.
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerMapping {
    pub endpoint: String,
    #[serde(default = "default_text_field")]
    pub text_field: String,
    /// Pointer to either a token array or an integer count.
    pub response: String,
}

fn default_text_field() -> String {
    "text".into()
}

fn default_auth_header() -> String {
    "Authorization".into()
}

fn default_auth_prefix() -> String {
    "Bearer ".into()
}

fn default_response_text() -> String {
    "/choices/0/text".into()
}

fn default_timeout() -> u64 {
    120
}

fn default_votes() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding the API credential.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_auth_prefix")]
    pub auth_prefix: String,
    #[serde(default)]
    pub fields: RequestFields,
    #[serde(default)]
    pub extra: Map<String, Value>,
    #[serde(default = "default_response_text")]
    pub response_text: String,
    #[serde(default)]
    pub logprobs: Option<LogprobsMapping>,
    #[serde(default)]
    pub tokenizer: Option<TokenizerMapping>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Greedy samples per question when scoring falls back to voting.
    #[serde(default = "default_votes")]
    pub vote_samples: u32,
}

impl RemoteConfig {
    pub fn new(endpoint: &str) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            model: None,
            api_key_env: None,
            auth_header: default_auth_header(),
            auth_prefix: default_auth_prefix(),
            fields: RequestFields::default(),
            extra: Map::new(),
            response_text: default_response_text(),
            logprobs: None,
            tokenizer: None,
            timeout_secs: default_timeout(),
            vote_samples: default_votes(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(format!("endpoint '{}' is not an http(s) URL", self.endpoint));
        }
        let pointers = std::iter::once(&self.response_text)
            .chain(self.logprobs.as_ref().map(|l| &l.response))
            .chain(self.tokenizer.as_ref().map(|t| &t.response));
        for p in pointers {
            if !p.is_empty() && !p.starts_with('/') {
                return Err(format!("'{p}' is not a JSON pointer"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{message}")]
pub struct TransportError {
    pub status: Option<u16>,
    pub message: String,
    pub retryable: bool,
}

/// Moves one JSON request to a URL and returns the JSON response.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> Result<Value, TransportError>;
}

pub struct HttpTransport {
    client: std::sync::OnceLock<reqwest::blocking::Client>,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self { client: std::sync::OnceLock::new() }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> Result<Value, TransportError> {
        let client = self.client.get_or_init(reqwest::blocking::Client::new);
        let mut req = client.post(url).timeout(timeout).json(body);
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let resp = req.send().map_err(|e| TransportError {
            status: None,
            message: e.to_string(),
            retryable: e.is_timeout() || e.is_connect() || e.is_request(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            let code = status.as_u16();
            let text = resp.text().unwrap_or_default();
            return Err(TransportError {
                status: Some(code),
                message: format!("HTTP {code}: {}", text.chars().take(200).collect::<String>()),
                retryable: code == 408 || code == 429 || status.is_server_error(),
            });
        }
        resp.json().map_err(|e| TransportError { status: None, message: e.to_string(), retryable: false })
    }
}

pub(crate) struct RemoteBackend {
    cfg: RemoteConfig,
    transport: std::sync::Arc<dyn Transport>,
}

impl RemoteBackend {
    pub(crate) fn new(cfg: RemoteConfig, transport: std::sync::Arc<dyn Transport>) -> Self {
        Self { cfg, transport }
    }

    fn headers(&self) -> Result<Vec<(String, String)>, BackendError> {
        let mut out = Vec::new();
        if let Some(var) = &self.cfg.api_key_env {
            let key = std::env::var(var)
                .map_err(|_| BackendError::Fatal(format!("environment variable {var} is not set")))?;
            out.push((self.cfg.auth_header.clone(), format!("{}{}", self.cfg.auth_prefix, key)));
        }
        Ok(out)
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        self.transport
            .post_json(url, &self.headers()?, body, Duration::from_secs(self.cfg.timeout_secs))
            .map_err(|e| if e.retryable { BackendError::Transient(e.message) } else { BackendError::Fatal(e.message) })
    }

    fn request_body(&self, prompt: &str, params: &SamplingParams) -> Map<String, Value> {
        let f = &self.cfg.fields;
        let mut body = self.cfg.extra.clone();
        body.insert(f.prompt.clone(), Value::from(prompt));
        if let Some(model) = &self.cfg.model {
            body.insert(f.model.clone(), Value::from(model.as_str()));
        }
        body.insert(f.max_tokens.clone(), Value::from(params.max_tokens));
        body.insert(f.temperature.clone(), Value::from(params.temperature));
        body.insert(f.top_p.clone(), Value::from(params.nucleus_p));
        if !params.stop_sequences.is_empty() {
            body.insert(f.stop.clone(), Value::from(params.stop_sequences.clone()));
        }
        if let (Some(field), Some(seed)) = (&f.seed, params.seed) {
            body.insert(field.clone(), Value::from(seed));
        }
        body
    }
}

fn pointer<'a>(v: &'a Value, ptr: &str) -> Result<&'a Value, BackendError> {
    v.pointer(ptr).ok_or_else(|| BackendError::Fatal(format!("response has no field at {ptr}")))
}

impl ModelBackend for RemoteBackend {
    fn complete(&self, dialogue: &Dialogue, params: &SamplingParams, _sample_index: u64) -> Result<String, BackendError> {
        let body = self.request_body(&dialogue.render(), params);
        let resp = self.post(&self.cfg.endpoint, &Value::Object(body))?;
        match pointer(&resp, &self.cfg.response_text)? {
            Value::String(s) => Ok(s.clone()),
            Value::Null => Ok(String::new()),
            other => Err(BackendError::Fatal(format!("completion text is not a string: {other}"))),
        }
    }

    fn label_scores(&self, dialogue: &Dialogue, labels: &[String]) -> Result<Option<Vec<f64>>, BackendError> {
        let Some(mapping) = &self.cfg.logprobs else {
            return Ok(None);
        };
        let mut body = self.request_body(&dialogue.render(), &SamplingParams::greedy(1));
        for (k, v) in &mapping.request {
            body.insert(k.clone(), v.clone());
        }
        let resp = self.post(&self.cfg.endpoint, &Value::Object(body))?;
        let Some(Value::Object(top)) = resp.pointer(&mapping.response) else {
            return Ok(None);
        };
        let mut scores = vec![0.0; labels.len()];
        for (token, lp) in top {
            let Some(lp) = lp.as_f64() else { continue };
            if let Some(i) = labels.iter().position(|l| l == token.trim()) {
                scores[i] += lp.exp();
            }
        }
        Ok(scores.iter().any(|s| *s > 0.0).then_some(scores))
    }

    fn token_count(&self, text: &str) -> Result<Option<usize>, BackendError> {
        let Some(tok) = &self.cfg.tokenizer else {
            return Ok(None);
        };
        let mut body = Map::new();
        body.insert(tok.text_field.clone(), Value::from(text));
        if let Some(model) = &self.cfg.model {
            body.insert(self.cfg.fields.model.clone(), Value::from(model.as_str()));
        }
        let resp = self.post(&tok.endpoint, &Value::Object(body))?;
        match pointer(&resp, &tok.response)? {
            Value::Array(items) => Ok(Some(items.len())),
            Value::Number(n) => Ok(n.as_u64().map(|n| n as usize)),
            other => Err(BackendError::Fatal(format!("token count is not a number or array: {other}"))),
        }
    }
}
