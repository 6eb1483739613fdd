//! Completion backends.
//!
//! Every model interaction goes through [`Backend::complete`]. Three
//! implementations are provided: [`OpenAiBackend`] for any OpenAI-compatible
//! chat-completions endpoint, [`MockBackend`] driven by a JSON-lines fixture,
//! and [`CachedBackend`], which wraps either one with a content-addressed
//! on-disk cache.

mod cache;
mod mock;
mod openai;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Label;

pub use cache::{cache_key, canonical_json, CacheEntry, CachedBackend, ResponseCache};
pub use mock::{FixtureEntry, FixtureMatch, FixtureResponse, FixtureToken, MockBackend};
pub use openai::{OpenAiBackend, OpenAiConfig, RetryPolicy, ENV_API_KEY, ENV_BASE_URL};

/// Upper bound on `top_logprobs` accepted by OpenAI-compatible servers.
pub const MAX_TOP_LOGPROBS: u8 = 20;

/// Gap below the least likely listed alternative assigned to a key that the
/// server did not list.
pub const MISSING_LOGPROB_GAP: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    pub top_logprobs: u8,
    /// Distinguishes repeated draws of an otherwise identical request.
    pub sample_index: u32,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, messages: Vec<Message>) -> Self {
        CompletionRequest {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_tokens: 512,
            want_logprobs: false,
            top_logprobs: MAX_TOP_LOGPROBS,
            sample_index: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_logprobs > MAX_TOP_LOGPROBS {
            return Err(Error::InvalidInput(format!(
                "top_logprobs {} exceeds {MAX_TOP_LOGPROBS}",
                self.top_logprobs
            )));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidInput("temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// Message contents joined by newlines; what mock fixtures match against.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub token: String,
    pub logprob: f64,
    /// Sorted by descending logprob.
    #[serde(default)]
    pub alternatives: Vec<TopLogprob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default)]
    pub tokens: Vec<TokenInfo>,
}

impl Completion {
    pub fn text_only(text: impl Into<String>) -> Self {
        Completion {
            text: text.into(),
            tokens: Vec::new(),
        }
    }

    pub fn token_logprobs(&self) -> Vec<f64> {
        self.tokens.iter().map(|t| t.logprob).collect()
    }

    /// Sorts every alternatives list descending and keeps at most `limit`.
    pub(crate) fn normalize_alternatives(&mut self, limit: usize) {
        for t in &mut self.tokens {
            t.alternatives
                .sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
            t.alternatives.truncate(limit);
        }
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion>;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        (**self).complete(request)
    }
}

/// Drops whitespace and punctuation from a token.
pub fn strip_token(token: &str) -> String {
    token
        .chars()
        .filter(|c| !c.is_whitespace() && !c.is_ascii_punctuation())
        .collect()
}

/// Reads the logprob of each key among the alternatives at `position`.
///
/// `classify` maps a stripped token to the key it denotes. Keys the server
/// did not list get `min(listed logprobs) - MISSING_LOGPROB_GAP`.
pub fn keyed_logprobs<K: Ord + Copy>(
    completion: &Completion,
    position: usize,
    keys: &[K],
    classify: impl Fn(&str) -> Option<K>,
) -> Result<BTreeMap<K, f64>> {
    let alternatives = completion
        .tokens
        .get(position)
        .map(|t| t.alternatives.as_slice())
        .filter(|a| !a.is_empty())
        .ok_or(Error::MissingLogprobs(position))?;

    let floor = alternatives
        .iter()
        .map(|a| a.logprob)
        .fold(f64::INFINITY, f64::min)
        - MISSING_LOGPROB_GAP;

    let mut found: BTreeMap<K, f64> = BTreeMap::new();
    for alt in alternatives {
        if let Some(key) = classify(&strip_token(&alt.token)) {
            if keys.contains(&key) {
                let e = found.entry(key).or_insert(f64::NEG_INFINITY);
                *e = e.max(alt.logprob);
            }
        }
    }
    Ok(keys
        .iter()
        .map(|&k| (k, found.get(&k).copied().unwrap_or(floor)))
        .collect())
}

/// Per-label logprobs at `position`; see [`keyed_logprobs`] for the
/// missing-label rule.
pub fn label_logprobs(
    completion: &Completion,
    position: usize,
    labels: &[Label],
) -> Result<BTreeMap<Label, f64>> {
    keyed_logprobs(completion, position, labels, |s| s.parse::<Label>().ok())
}

/// Index of the token carrying the answer letter.
///
/// First position whose sampled token is a label, else the first position
/// whose alternatives include one, else 0.
pub fn answer_position(completion: &Completion, labels: &[Label]) -> usize {
    let is_label = |tok: &str| {
        strip_token(tok)
            .parse::<Label>()
            .map(|l| labels.contains(&l))
            .unwrap_or(false)
    };
    completion
        .tokens
        .iter()
        .position(|t| is_label(&t.token))
        .or_else(|| {
            completion
                .tokens
                .iter()
                .position(|t| t.alternatives.iter().any(|a| is_label(&a.token)))
        })
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn completion(alts: &[(&str, f64)]) -> Completion {
        Completion {
            text: alts[0].0.to_string(),
            tokens: vec![TokenInfo {
                token: alts[0].0.to_string(),
                logprob: alts[0].1,
                alternatives: alts
                    .iter()
                    .map(|&(t, lp)| TopLogprob {
                        token: t.to_string(),
                        logprob: lp,
                    })
                    .collect(),
            }],
        }
    }

    fn l(c: char) -> Label {
        Label::new(c).unwrap()
    }

    #[test]
    fn direct_lookup() {
        let m = label_logprobs(&completion(&[("A", -0.1), ("B", -2.4)]), 0, &[l('A'), l('B')]).unwrap();
        assert_eq!(m[&l('A')], -0.1);
        assert_eq!(m[&l('B')], -2.4);
    }

    #[test]
    fn strips_whitespace() {
        let m = label_logprobs(&completion(&[(" A", -0.2), ("B", -1.9)]), 0, &[l('A'), l('B')]).unwrap();
        assert_eq!(m[&l('A')], -0.2);
        assert_eq!(m[&l('B')], -1.9);
    }

    #[test]
    fn floor_for_missing_labels() {
        let labels = [l('A'), l('B'), l('C')];
        let m = label_logprobs(&completion(&[("A", -0.1)]), 0, &labels).unwrap();
        assert_eq!(m[&l('A')], -0.1);
        assert!((m[&l('B')] - -2.1).abs() < 1e-12);
        assert!((m[&l('C')] - -2.1).abs() < 1e-12);
    }

    #[test]
    fn duplicate_spellings_keep_best() {
        let m = label_logprobs(
            &completion(&[("(B", -0.3), ("A", -1.0), (" B", -1.5)]),
            0,
            &[l('A'), l('B')],
        )
        .unwrap();
        assert_eq!(m[&l('B')], -0.3);
    }

    #[test]
    fn missing_logprobs() {
        let c = Completion::text_only("A");
        assert!(matches!(
            label_logprobs(&c, 0, &[l('A')]),
            Err(Error::MissingLogprobs(0))
        ));
    }

    #[test]
    fn finds_answer_position() {
        let mut c = completion(&[("(", -0.01)]);
        c.tokens.push(TokenInfo {
            token: "C".into(),
            logprob: -0.2,
            alternatives: vec![],
        });
        assert_eq!(answer_position(&c, &[l('A'), l('B'), l('C')]), 1);
        assert_eq!(answer_position(&Completion::text_only(""), &[l('A')]), 0);
    }

    #[test]
    fn never_empty_for_nonempty_labels() {
        let m = label_logprobs(&completion(&[("xyz", -0.5)]), 0, &[l('A'), l('B')]).unwrap();
        assert_eq!(m.len(), 2);
    }
}
