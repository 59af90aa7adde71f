//! Client for a chat-completion server: builds the extraction prompt, sends
//! it, and returns the raw text for [`crate::schema::parse_response`].
//!
//! The wire format is the common chat-completion shape. `endpoint_url` is a
//! base URL (e.g. `http://localhost:8000/v1`); requests go to
//! `{endpoint_url}/chat/completions`.

use std::fmt;
use std::future::Future;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PredictionRecord, StudyRecord};
use crate::error::{Error, Result};

pub const ENV_ENDPOINT: &str = "EVISYNTH_ENDPOINT";
pub const ENV_MODEL: &str = "EVISYNTH_MODEL";
pub const ENV_TOKEN: &str = "EVISYNTH_TOKEN";

pub const DEFAULT_CONCURRENCY: usize = 4;
const MAX_BACKOFF: Duration = Duration::from_secs(30);

/// Extraction prompt with `{articles}`, `{comparison}` and `{outcome}` slots.
pub const PROMPT_TEMPLATE: &str = "Articles: {articles}

Question: Based on the given trial articles, what is the outcome type and corresponding numerical data for the following Comparison and Outcome?

Comparison: {comparison}
Outcome: {outcome}

First, determine and output the outcome_type as either: binary or continuous

Then, provide the extracted data in format as follows:
If the outcome is binary, use this format:

outcome_type: binary
intervention:
events: NUMBER total: NUMBER
comparator:
events: NUMBER total: NUMBER

If the outcome is continuous, use this format:

outcome_type: continuous
intervention:
mean: NUMBER standard_deviation: NUMBER group_size: NUMBER
comparator:
mean: NUMBER standard_deviation: NUMBER group_size: NUMBER

Use post-intervention data when both pre and post are available. If multiple timepoints are reported, choose the one closest to the timepoint of interest, or the latest available.
Think about it step by step.";

/// Fill the extraction prompt for one study.
pub fn build_prompt(record: &StudyRecord) -> Result<String> {
    if record.outcome_name.trim().is_empty() {
        return Err(Error::Validation(format!(
            "{}: empty outcome name",
            record.id
        )));
    }
    if record.comparison.trim().is_empty() {
        return Err(Error::Validation(format!(
            "{}: empty comparison",
            record.id
        )));
    }
    // Slots are filled in one pass so text inside a slot is never rescanned.
    let mut out = String::with_capacity(PROMPT_TEMPLATE.len() + record.study_text.len());
    let mut rest = PROMPT_TEMPLATE;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open..];
        let (value, len) = if after.starts_with("{articles}") {
            (record.study_text.as_str(), "{articles}".len())
        } else if after.starts_with("{comparison}") {
            (record.comparison.as_str(), "{comparison}".len())
        } else if after.starts_with("{outcome}") {
            (record.outcome_name.as_str(), "{outcome}".len())
        } else {
            ("{", 1)
        };
        out.push_str(value);
        rest = &after[len..];
    }
    out.push_str(rest);
    Ok(out)
}

/// A credential that never shows up in logs or debug output.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(<redacted>)")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_s: u64,
    pub max_retries: u32,
    pub auth_token: Option<Secret>,
    /// First retry delay; doubles on each further attempt.
    pub backoff_base_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://localhost:8000/v1".into(),
            model_name: String::new(),
            temperature: 0.7,
            max_tokens: 2048,
            timeout_s: 300,
            max_retries: 3,
            auth_token: None,
            backoff_base_ms: 500,
        }
    }
}

impl GatewayConfig {
    /// Defaults overlaid with `EVISYNTH_ENDPOINT`, `EVISYNTH_MODEL` and
    /// `EVISYNTH_TOKEN` when set.
    pub fn from_env() -> Self {
        let mut config = Self::default();
        if let Ok(url) = std::env::var(ENV_ENDPOINT) {
            config.endpoint_url = url;
        }
        if let Ok(model) = std::env::var(ENV_MODEL) {
            config.model_name = model;
        }
        if let Ok(token) = std::env::var(ENV_TOKEN) {
            if !token.is_empty() {
                config.auth_token = Some(Secret::new(token));
            }
        }
        config
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let fail = |m: String| Err(GatewayError::Config(m));
        if self.endpoint_url.trim().is_empty() {
            return fail("endpoint_url is empty".into());
        }
        if self.model_name.trim().is_empty() {
            return fail("model_name is empty".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature {} must be >= 0", self.temperature));
        }
        if self.max_tokens == 0 {
            return fail("max_tokens must be at least 1".into());
        }
        if self.timeout_s == 0 {
            return fail("timeout_s must be at least 1".into());
        }
        Ok(())
    }

    fn completions_url(&self) -> String {
        format!(
            "{}/chat/completions",
            self.endpoint_url.trim_end_matches('/')
        )
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor)).min(MAX_BACKOFF)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("network error: {0}")]
    Network(String),
    #[error("server returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid gateway configuration: {0}")]
    Config(String),
}

impl GatewayError {
    /// Stable machine-readable name.
    pub fn kind(&self) -> &'static str {
        match self {
            GatewayError::Network(_) => "network",
            GatewayError::Status { .. } => "status",
            GatewayError::Timeout => "timeout",
            GatewayError::MalformedResponse(_) => "malformed_response",
            GatewayError::Config(_) => "config",
        }
    }

    /// Worth retrying: connection trouble, timeouts, 408, 429 and 5xx.
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::Network(_) | GatewayError::Timeout => true,
            GatewayError::Status { status, .. } => {
                *status == 408 || *status == 429 || *status >= 500
            }
            _ => false,
        }
    }
}

/// Anything that turns a prompt into a raw response.
pub trait Completer: Sync {
    fn complete(&self, prompt: &str) -> impl Future<Output = Result<String, GatewayError>> + Send;
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

/// HTTP client with retry and exponential backoff.
#[derive(Debug, Clone)]
pub struct HttpCompleter {
    client: reqwest::Client,
    config: GatewayConfig,
}

impl HttpCompleter {
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self { client, config })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    async fn attempt(&self, prompt: &str) -> Result<String, GatewayError> {
        let body = ChatRequest {
            model: &self.config.model_name,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        };
        let mut request = self.client.post(self.config.completions_url()).json(&body);
        if let Some(token) = &self.config.auth_token {
            request = request.bearer_auth(token.expose());
        }
        let response = request.send().await.map_err(classify)?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            return Err(GatewayError::Status {
                status: status.as_u16(),
                body: body.chars().take(500).collect(),
            });
        }
        let text = response.text().await.map_err(classify)?;
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::MalformedResponse("no choices[0].message.content".into()))
    }
}

fn classify(err: reqwest::Error) -> GatewayError {
    if err.is_timeout() {
        GatewayError::Timeout
    } else {
        GatewayError::Network(err.to_string())
    }
}

impl Completer for HttpCompleter {
    async fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        let mut attempt = 0;
        loop {
            match self.attempt(prompt).await {
                Ok(text) => return Ok(text),
                Err(err) if err.is_transient() && attempt < self.config.max_retries => {
                    let delay = self.config.backoff(attempt);
                    warn!(
                        "{} (attempt {}/{}), retrying in {:?}",
                        err,
                        attempt + 1,
                        self.config.max_retries + 1,
                        delay
                    );
                    tokio::time::sleep(delay).await;
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }
}

/// One request, with retries.
pub async fn complete(config: &GatewayConfig, prompt: &str) -> Result<String, GatewayError> {
    HttpCompleter::new(config.clone())?.complete(prompt).await
}

/// Query every study with at most `concurrency` requests in flight.
///
/// The output has one record per study, in corpus order. Failures are
/// recorded on the record (`error` set, empty response) and never abort
/// the batch.
pub async fn run_batch<C: Completer>(
    completer: &C,
    corpus: &[StudyRecord],
    concurrency: usize,
) -> Vec<PredictionRecord> {
    let concurrency = concurrency.max(1);
    let mut results: Vec<(usize, PredictionRecord)> = stream::iter(corpus.iter().enumerate())
        .map(|(index, record)| async move {
            let outcome = match build_prompt(record) {
                Ok(prompt) => completer.complete(&prompt).await.map_err(|e| e.to_string()),
                Err(e) => Err(e.to_string()),
            };
            let prediction = match outcome {
                Ok(text) => PredictionRecord::new(&record.id, text),
                Err(message) => {
                    warn!("{}: {}", record.id, message);
                    PredictionRecord {
                        id: record.id.clone(),
                        raw_response: String::new(),
                        error: Some(message),
                    }
                }
            };
            debug!("finished {}", record.id);
            (index, prediction)
        })
        .buffer_unordered(concurrency)
        .collect()
        .await;
    results.sort_by_key(|(index, _)| *index);
    results.into_iter().map(|(_, p)| p).collect()
}
