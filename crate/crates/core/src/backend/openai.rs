use std::env;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use rand::Rng;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::json;

use super::{Backend, Completion, CompletionRequest, TokenInfo, TopLogprob};
use crate::error::{Error, Result};

pub const ENV_API_KEY: &str = "CONF_API_KEY";
pub const ENV_BASE_URL: &str = "CONF_BASE_URL";

const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

/// Exponential backoff with full jitter: before retry `n` (from 0) sleep a
/// uniform draw from `[0, base_delay * multiplier^n]`.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    fn delay_cap(&self, retry: u32) -> Duration {
        self.base_delay.mul_f64(self.multiplier.powi(retry as i32))
    }
}

#[derive(Debug, Clone)]
pub struct OpenAiConfig {
    pub base_url: String,
    pub api_key: String,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl OpenAiConfig {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        OpenAiConfig {
            base_url: base_url.into(),
            api_key: api_key.into(),
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
        }
    }

    /// Reads `CONF_API_KEY` (required) and `CONF_BASE_URL`.
    pub fn from_env() -> Result<Self> {
        let key = env::var(ENV_API_KEY)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| Error::Credential(format!("{ENV_API_KEY} is not set")))?;
        let url = env::var(ENV_BASE_URL).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string());
        Ok(OpenAiConfig::new(url, key))
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<WireToken>>,
}

#[derive(Deserialize)]
struct WireToken {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<WireTop>,
}

#[derive(Deserialize)]
struct WireTop {
    token: String,
    logprob: f64,
}

/// Client for `POST {base_url}/chat/completions`.
pub struct OpenAiBackend {
    config: OpenAiConfig,
    client: Client,
    in_flight: Semaphore,
}

enum Attempt {
    Done(Completion),
    Retry(String),
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(OpenAiBackend {
            in_flight: Semaphore::new(config.max_in_flight),
            config,
            client,
        })
    }

    pub fn from_env() -> Result<Self> {
        OpenAiBackend::new(OpenAiConfig::from_env()?)
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    /// Request body. `sample_index` is local bookkeeping and never sent.
    pub fn body(request: &CompletionRequest) -> serde_json::Value {
        let mut body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "logprobs": request.want_logprobs,
        });
        if request.want_logprobs {
            body["top_logprobs"] = json!(request.top_logprobs);
        }
        body
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<Attempt> {
        let _permit = self.in_flight.acquire();
        let sent = self
            .client
            .post(self.endpoint())
            .bearer_auth(&self.config.api_key)
            .json(&Self::body(request))
            .send();
        let resp = match sent {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        let status = resp.status();
        let text = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(Error::Credential(format!("HTTP {status}: {text}")));
        }
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Ok(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Error::Transport(format!("HTTP {status}: {text}")));
        }
        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|e| Error::Transport(format!("malformed response body: {e}")))?;
        Ok(Attempt::Done(parse_choice(wire, request)?))
    }
}

fn parse_choice(wire: WireResponse, request: &CompletionRequest) -> Result<Completion> {
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| Error::Transport("response has no choices".into()))?;
    let tokens = choice
        .logprobs
        .and_then(|l| l.content)
        .unwrap_or_default()
        .into_iter()
        .map(|t| TokenInfo {
            token: t.token,
            logprob: t.logprob,
            alternatives: t
                .top_logprobs
                .into_iter()
                .map(|a| TopLogprob {
                    token: a.token,
                    logprob: a.logprob,
                })
                .collect(),
        })
        .collect();
    let mut completion = Completion {
        text: choice.message.content.unwrap_or_default(),
        tokens,
    };
    completion.normalize_alternatives(request.top_logprobs as usize);
    Ok(completion)
}

impl Backend for OpenAiBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        request.validate()?;
        let policy = &self.config.retry;
        let mut last = String::new();
        for attempt in 0..policy.max_attempts.max(1) {
            if attempt > 0 {
                let cap = policy.delay_cap(attempt - 1);
                let sleep = cap.mul_f64(rand::rng().random::<f64>());
                debug!("retry {attempt} after {sleep:?}: {last}");
                thread::sleep(sleep);
            }
            match self.attempt(request)? {
                Attempt::Done(c) => return Ok(c),
                Attempt::Retry(reason) => {
                    warn!("transient failure from {}: {reason}", self.endpoint());
                    last = reason;
                }
            }
        }
        Err(Error::Transport(format!(
            "gave up after {} attempts: {last}",
            policy.max_attempts
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Message;

    #[test]
    fn body_shape() {
        let mut r = CompletionRequest::new("gpt-x", vec![Message::user("hi")]);
        r.sample_index = 3;
        let b = OpenAiBackend::body(&r);
        assert_eq!(b["logprobs"], json!(false));
        assert!(b.get("top_logprobs").is_none());
        assert!(b.get("sample_index").is_none());
        r.want_logprobs = true;
        let b = OpenAiBackend::body(&r);
        assert_eq!(b["top_logprobs"], json!(20));
        assert_eq!(b["messages"][0]["role"], json!("user"));
    }

    #[test]
    fn parses_logprobs() {
        let raw = r#"{"choices":[{"message":{"role":"assistant","content":"A"},
            "logprobs":{"content":[{"token":"A","logprob":-0.1,
            "top_logprobs":[{"token":"B","logprob":-2.5},{"token":"A","logprob":-0.1}]}]}}]}"#;
        let wire: WireResponse = serde_json::from_str(raw).unwrap();
        let mut r = CompletionRequest::new("m", vec![]);
        r.want_logprobs = true;
        let c = parse_choice(wire, &r).unwrap();
        assert_eq!(c.text, "A");
        assert_eq!(c.tokens[0].alternatives[0].token, "A");
        assert_eq!(c.tokens[0].alternatives[1].logprob, -2.5);
    }

    #[test]
    fn backoff_caps_double() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_cap(0), Duration::from_secs(1));
        assert_eq!(p.delay_cap(3), Duration::from_secs(8));
    }
}
