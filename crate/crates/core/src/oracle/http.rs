//! Completions endpoint that echoes prompt log-probabilities.
//!
//! Scoring request body, byte for byte:
//!
//! ```json
//! {"model":"<model>","prompt":"<text>","max_tokens":0,"echo":true,"logprobs":1}
//! ```
//!
//! The response must carry `choices[0].logprobs.token_logprobs`; its leading
//! `null` (the first token has no context) is dropped. Generation requests
//! send `{"model","prompt","max_tokens":n,"temperature":0}` and read
//! `choices[0].text`. When the endpoint advertises vocabulary statistics,
//! scoring requests with `"vocab_stats":true` are answered with
//! `choices[0].logprobs.vocab_logprob_stats`, one `[mean, std]` pair per
//! echoed token.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use super::{LossOracle, LossProfile, OracleCapabilities, PositionStats};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Sleep before each retry; its length is the retry count.
    pub backoff: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            backoff: vec![
                Duration::from_millis(500),
                Duration::from_secs(2),
                Duration::from_secs(8),
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpOracleConfig {
    pub url: String,
    pub model: String,
    /// Bearer token, read from the environment by the caller.
    pub auth_token: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub capabilities: OracleCapabilities,
}

impl HttpOracleConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            auth_token: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            capabilities: OracleCapabilities {
                vocab_distribution_stats: false,
                generation: true,
            },
        }
    }
}

pub struct HttpOracle {
    cfg: HttpOracleConfig,
    agent: ureq::Agent,
    requests: AtomicU64,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    echo: bool,
    logprobs: u32,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    vocab_stats: bool,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: u32,
}

pub(crate) fn score_body(model: &str, prompt: &str, vocab_stats: bool) -> String {
    serde_json::to_string(&ScoreRequest {
        model,
        prompt,
        max_tokens: 0,
        echo: true,
        logprobs: 1,
        vocab_stats,
    })
    .expect("request serialisation cannot fail")
}

enum Attempt {
    Done(String),
    Retryable(String),
    Fatal(String),
}

impl HttpOracle {
    pub fn new(cfg: HttpOracleConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            cfg,
            agent,
            requests: AtomicU64::new(0),
        }
    }

    /// HTTP requests sent so far, retries included.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    fn post(&self, body: &str) -> Result<Value> {
        let mut failures = Vec::new();
        for attempt in 0..=self.cfg.retry.backoff.len() {
            if attempt > 0 {
                std::thread::sleep(self.cfg.retry.backoff[attempt - 1]);
            }
            match self.post_once(body) {
                Attempt::Done(text) => {
                    return serde_json::from_str(&text)
                        .map_err(|e| Error::Oracle(format!("malformed response from {}: {e}", self.cfg.url)));
                }
                Attempt::Fatal(msg) => return Err(Error::Oracle(msg)),
                Attempt::Retryable(msg) => {
                    log::warn!("oracle request failed (attempt {}): {msg}", attempt + 1);
                    failures.push(msg);
                }
            }
        }
        Err(Error::Oracle(format!(
            "{} failed after {} attempts: {}",
            self.cfg.url,
            failures.len(),
            failures.last().map(String::as_str).unwrap_or("")
        )))
    }

    fn post_once(&self, body: &str) -> Attempt {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let mut req = self
            .agent
            .post(&self.cfg.url)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.cfg.auth_token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        match req.send(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp.body_mut().read_to_string();
                match (status, text) {
                    (200..=299, Ok(text)) => Attempt::Done(text),
                    (200..=299, Err(e)) => Attempt::Retryable(format!("reading body: {e}")),
                    (500..=599, _) => Attempt::Retryable(format!("HTTP {status}")),
                    (_, text) => Attempt::Fatal(format!(
                        "HTTP {status} from {}: {}",
                        self.cfg.url,
                        text.unwrap_or_default()
                    )),
                }
            }
            Err(e) => Attempt::Retryable(format!("transport: {e}")),
        }
    }
}

fn first_choice<'a>(resp: &'a Value, field: &str) -> Result<&'a Value> {
    resp.pointer(&format!("/choices/0/{field}"))
        .ok_or_else(|| Error::Oracle(format!("response lacks choices[0].{}", field.replace('/', "."))))
}

/// Extracts per-token NLLs from an echoed-logprobs completion response.
pub(crate) fn parse_token_logprobs(resp: &Value) -> Result<LossProfile> {
    let arr = first_choice(resp, "logprobs/token_logprobs")?
        .as_array()
        .ok_or_else(|| Error::Oracle("token_logprobs is not an array".into()))?;
    let skip = usize::from(arr.first().is_some_and(Value::is_null));
    let log_probs = arr[skip..]
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_f64()
                .ok_or_else(|| Error::Oracle(format!("token_logprobs[{}] is not a number", i + skip)))
        })
        .collect::<Result<Vec<f64>>>()?;
    if log_probs.is_empty() {
        return Err(Error::Data("endpoint returned no scorable tokens".into()));
    }
    LossProfile::from_log_probs(&log_probs)
}

pub(crate) fn parse_vocab_stats(resp: &Value) -> Result<Vec<PositionStats>> {
    let arr = first_choice(resp, "logprobs/vocab_logprob_stats")?
        .as_array()
        .ok_or_else(|| Error::Oracle("vocab_logprob_stats is not an array".into()))?;
    let skip = usize::from(arr.first().is_some_and(Value::is_null));
    arr[skip..]
        .iter()
        .map(|pair| match pair.as_array().map(Vec::as_slice) {
            Some([m, s]) => match (m.as_f64(), s.as_f64()) {
                (Some(mean), Some(std)) => Ok(PositionStats { mean, std }),
                _ => Err(Error::Oracle("vocab stats entry is not numeric".into())),
            },
            _ => Err(Error::Oracle("vocab stats entry must be [mean, std]".into())),
        })
        .collect()
}

impl LossOracle for HttpOracle {
    fn identity(&self) -> String {
        format!("http:{}#{}", self.cfg.url, self.cfg.model)
    }

    fn capabilities(&self) -> OracleCapabilities {
        self.cfg.capabilities
    }

    fn score_text(&self, text: &str) -> Result<LossProfile> {
        let resp = self.post(&score_body(&self.cfg.model, text, false))?;
        parse_token_logprobs(&resp)
    }

    fn distribution_stats(&self, text: &str) -> Result<Vec<PositionStats>> {
        if !self.cfg.capabilities.vocab_distribution_stats {
            return Err(Error::Capability {
                capability: "vocab_distribution_stats",
                requester: "MIN-K%++",
            });
        }
        let resp = self.post(&score_body(&self.cfg.model, text, true))?;
        parse_vocab_stats(&resp)
    }

    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        if !self.cfg.capabilities.generation {
            return Err(Error::Capability {
                capability: "generation",
                requester: "ROUGE-L",
            });
        }
        if max_new_tokens == 0 {
            return Ok(String::new());
        }
        let body = serde_json::to_string(&GenerateRequest {
            model: &self.cfg.model,
            prompt,
            max_tokens: max_new_tokens,
            temperature: 0,
        })?;
        let resp = self.post(&body)?;
        first_choice(&resp, "text")?
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| Error::Oracle("choices[0].text is not a string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn score_body_is_bit_exact() {
        assert_eq!(
            score_body("gpt-x", "Hello \"world\"", false),
            r#"{"model":"gpt-x","prompt":"Hello \"world\"","max_tokens":0,"echo":true,"logprobs":1}"#
        );
        assert!(score_body("m", "p", true).ends_with(r#""logprobs":1,"vocab_stats":true}"#));
    }

    #[test]
    fn null_first_logprob_is_skipped() {
        let resp = json!({"choices": [{"logprobs": {"token_logprobs": [null, -1.0, -3.0]}}]});
        let p = parse_token_logprobs(&resp).unwrap();
        assert_eq!(p.token_nll(), &[1.0, 3.0]);
        assert_eq!(p.mean_nll(), 2.0);
    }

    #[test]
    fn malformed_responses() {
        let only_null = json!({"choices": [{"logprobs": {"token_logprobs": [null]}}]});
        assert!(matches!(parse_token_logprobs(&only_null), Err(Error::Data(_))));
        let inner_null = json!({"choices": [{"logprobs": {"token_logprobs": [-1.0, null]}}]});
        assert!(matches!(parse_token_logprobs(&inner_null), Err(Error::Oracle(_))));
        assert!(parse_token_logprobs(&json!({"choices": []})).is_err());
        let stats = json!({"choices": [{"logprobs": {"vocab_logprob_stats": [null, [-2.0, 0.5], [-1.0]]}}]});
        assert!(parse_vocab_stats(&stats).is_err());
    }

    #[test]
    fn unreachable_endpoint_is_an_oracle_error() {
        let mut cfg = HttpOracleConfig::new("http://127.0.0.1:1/v1/completions", "m");
        cfg.retry.backoff = vec![Duration::from_millis(1); 3];
        let oracle = HttpOracle::new(cfg);
        assert!(oracle.score_text("hi").unwrap_err().is_oracle());
        assert_eq!(oracle.request_count(), 4);
    }
}
