use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, Completion, CompletionRequest, TokenInfo, TopLogprob};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureMatch {
    pub contains: String,
    /// When set, the entry only matches draws with this sample index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_index: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureToken {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top: Vec<TopLogprob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureResponse {
    pub text: String,
    #[serde(default)]
    pub tokens: Vec<FixtureToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    #[serde(rename = "match")]
    pub matcher: FixtureMatch,
    pub response: FixtureResponse,
}

impl FixtureEntry {
    pub fn new(contains: impl Into<String>, text: impl Into<String>) -> Self {
        FixtureEntry {
            matcher: FixtureMatch {
                contains: contains.into(),
                sample_index: None,
            },
            response: FixtureResponse {
                text: text.into(),
                tokens: Vec::new(),
            },
        }
    }

    pub fn for_sample(mut self, sample_index: u32) -> Self {
        self.matcher.sample_index = Some(sample_index);
        self
    }

    /// Appends one token position with the given alternatives; the first
    /// alternative is the sampled token.
    pub fn with_position(mut self, alternatives: &[(&str, f64)]) -> Self {
        let (token, logprob) = alternatives.first().copied().unwrap_or(("", 0.0));
        self.response.tokens.push(FixtureToken {
            token: token.to_string(),
            logprob,
            top: alternatives
                .iter()
                .map(|&(t, lp)| TopLogprob {
                    token: t.to_string(),
                    logprob: lp,
                })
                .collect(),
        });
        self
    }

    fn matches(&self, prompt: &str, request: &CompletionRequest) -> bool {
        prompt.contains(&self.matcher.contains)
            && self
                .matcher
                .sample_index
                .is_none_or(|i| i == request.sample_index)
    }
}

/// Scripted backend: the first fixture entry whose `contains` substring
/// occurs in the request's message text answers it.
#[derive(Debug, Default)]
pub struct MockBackend {
    entries: Vec<FixtureEntry>,
    calls: AtomicUsize,
    log: Mutex<Vec<CompletionRequest>>,
}

impl MockBackend {
    pub fn new(entries: Vec<FixtureEntry>) -> Self {
        MockBackend {
            entries,
            ..Default::default()
        }
    }

    pub fn from_jsonl_str(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| {
                    Error::InvalidInput(format!("fixture line {}: {e}", i + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MockBackend::new(entries))
    }

    pub fn from_jsonl_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read fixture {}: {e}", path.display())))?;
        MockBackend::from_jsonl_str(&text)
    }

    pub fn entries(&self) -> &[FixtureEntry] {
        &self.entries
    }

    /// Number of `complete` calls served, including fixture misses.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Every request received, in arrival order.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.log
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(request.clone());

        let prompt = request.prompt_text();
        let entry = self
            .entries
            .iter()
            .find(|e| e.matches(&prompt, request))
            .ok_or_else(|| Error::FixtureMiss(prompt.chars().take(80).collect()))?;

        let mut completion = Completion {
            text: entry.response.text.clone(),
            tokens: Vec::new(),
        };
        if request.want_logprobs {
            completion.tokens = entry
                .response
                .tokens
                .iter()
                .map(|t| TokenInfo {
                    token: t.token.clone(),
                    logprob: t.logprob,
                    alternatives: t.top.clone(),
                })
                .collect();
            completion.normalize_alternatives(request.top_logprobs as usize);
        }
        Ok(completion)
    }
}
