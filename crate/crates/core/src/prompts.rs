//! Prompt rendering and response parsing.
//!
//! Templates live in `templates/v1/` and are compiled into the binary, so a
//! build pins the exact wording. [`PROMPT_VERSION`] is recorded with every
//! prediction.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::Message;
use crate::error::{Error, Result};
use crate::types::{ExplanationPosition, Label, Question};

pub const PROMPT_VERSION: &str = "v1";

const SYSTEM: &str = include_str!("../templates/v1/system.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    StabilityExplain,
    StabilityAnswerGivenExplanation,
    Entailment,
    MostLikelyTf,
    CompleteDescriptionTf,
    TokenProb,
    Linguistic,
    Cot,
    Topk,
    ConditionalExplanation,
    TtaExplain,
    TtaConfidence,
}

impl PromptKind {
    pub const ALL: [PromptKind; 12] = [
        PromptKind::StabilityExplain,
        PromptKind::StabilityAnswerGivenExplanation,
        PromptKind::Entailment,
        PromptKind::MostLikelyTf,
        PromptKind::CompleteDescriptionTf,
        PromptKind::TokenProb,
        PromptKind::Linguistic,
        PromptKind::Cot,
        PromptKind::Topk,
        PromptKind::ConditionalExplanation,
        PromptKind::TtaExplain,
        PromptKind::TtaConfidence,
    ];

    fn template(self, position: ExplanationPosition) -> &'static str {
        match (self, position) {
            (PromptKind::StabilityExplain, ExplanationPosition::PreAnswer) => {
                include_str!("../templates/v1/stability_explain.txt")
            }
            (PromptKind::StabilityExplain, ExplanationPosition::PostAnswer) => {
                include_str!("../templates/v1/stability_explain_post.txt")
            }
            (PromptKind::StabilityAnswerGivenExplanation, _) => {
                include_str!("../templates/v1/stability_answer_given_explanation.txt")
            }
            (PromptKind::Entailment, _) => include_str!("../templates/v1/entailment.txt"),
            (PromptKind::MostLikelyTf, _) => include_str!("../templates/v1/most_likely_tf.txt"),
            (PromptKind::CompleteDescriptionTf, _) => {
                include_str!("../templates/v1/complete_description_tf.txt")
            }
            (PromptKind::TokenProb, _) => include_str!("../templates/v1/token_prob.txt"),
            (PromptKind::Linguistic, _) => include_str!("../templates/v1/linguistic.txt"),
            (PromptKind::Cot, _) => include_str!("../templates/v1/cot.txt"),
            (PromptKind::Topk, _) => include_str!("../templates/v1/topk.txt"),
            (PromptKind::ConditionalExplanation, _) => {
                include_str!("../templates/v1/conditional_explanation.txt")
            }
            (PromptKind::TtaExplain, _) => include_str!("../templates/v1/tta_explain.txt"),
            (PromptKind::TtaConfidence, _) => include_str!("../templates/v1/tta_confidence.txt"),
        }
    }
}

/// Values substituted into template placeholders beyond the question itself.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extras {
    pub explanation: Option<String>,
    pub answer: Option<Label>,
    pub k: Option<usize>,
    pub position: ExplanationPosition,
}

impl Extras {
    pub fn explanation(text: impl Into<String>) -> Self {
        Extras {
            explanation: Some(text.into()),
            ..Default::default()
        }
    }

    pub fn answer(label: Label) -> Self {
        Extras {
            answer: Some(label),
            ..Default::default()
        }
    }

    pub fn k(k: usize) -> Self {
        Extras {
            k: Some(k),
            ..Default::default()
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn with_position(mut self, position: ExplanationPosition) -> Self {
        self.position = position;
        self
    }
}

/// `(A) text` lines, one per option.
pub fn format_options(q: &Question) -> String {
    q.options
        .iter()
        .map(|o| format!("({}) {}", o.label, o.text))
        .collect::<Vec<_>>()
        .join("\n")
}

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{\{(\w+)\}\}").unwrap());

/// Renders the system and user messages for `kind`.
///
/// Substitution is a single pass over the template, so braces inside the
/// question or explanation text are never treated as placeholders.
pub fn render(kind: PromptKind, q: &Question, extras: &Extras) -> Result<Vec<Message>> {
    let template = kind.template(extras.position);
    let mut text = String::with_capacity(template.len() + q.stem.len());
    let mut last = 0;
    for caps in PLACEHOLDER.captures_iter(template) {
        let whole = caps.get(0).expect("group 0 always present");
        let key = &caps[1];
        let value = match key {
            "question" => Some(q.stem.clone()),
            "options" => Some(format_options(q)),
            "explanation" => extras.explanation.clone(),
            "answer" => extras.answer.map(|l| l.to_string()),
            "k" => extras.k.map(|k| k.to_string()),
            _ => {
                return Err(Error::Template(format!(
                    "unknown placeholder {{{{{key}}}}} in {kind:?}"
                )))
            }
        }
        .ok_or_else(|| Error::Template(format!("{kind:?} prompt requires extra {key:?}")))?;
        text.push_str(&template[last..whole.start()]);
        text.push_str(&value);
        last = whole.end();
    }
    text.push_str(&template[last..]);

    Ok(vec![
        Message::system(SYSTEM.trim_end()),
        Message::user(text.trim_end()),
    ])
}

// X after an "answer" keyword: parenthesized in either case, a bare capital,
// or a bare lowercase letter only when punctuation or line end follows.
const ANSWER_LETTER: &str = r"(?:\(([A-Za-z])\)|([A-Z])\b|([a-z])(?:[.,;:!]|\s*$))";

static ANSWER_IS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"(?m)(?i:answer\s+is)\s*:?\s*{ANSWER_LETTER}")).unwrap());
static ANSWER_COLON: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"(?m)(?i:answer)\s*:\s*{ANSWER_LETTER}")).unwrap());
static PAREN_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([A-Za-z])\)").unwrap());
static BARE_CAPITAL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-Z])\b").unwrap());
static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(\d+(?:\.\d+)?|\.\d+)\s*(%)?").unwrap());

fn last_valid_label(re: &Regex, text: &str, labels: &[Label]) -> Option<Label> {
    re.captures_iter(text)
        .filter_map(|caps| {
            let m = caps.iter().skip(1).flatten().next()?;
            let c = m.as_str().chars().next()?.to_ascii_uppercase();
            Label::new(c).ok().filter(|l| labels.contains(l))
        })
        .last()
}

/// Extracts the chosen option from free text.
///
/// Rules, most specific first; the first rule that yields a valid label wins
/// and within a rule the last occurrence counts:
/// 1. `answer is (X)` / `answer is X`
/// 2. `Answer: X`
/// 3. a parenthesized `(X)`
/// 4. the last standalone capital letter that is a label
pub fn parse_answer_label(text: &str, labels: &[Label]) -> Result<Label> {
    if text.trim().is_empty() {
        return Err(Error::parse("empty response", text));
    }
    [&*ANSWER_IS, &*ANSWER_COLON, &*PAREN_LETTER, &*BARE_CAPITAL]
        .into_iter()
        .find_map(|re| last_valid_label(re, text, labels))
        .ok_or_else(|| Error::parse("no answer label found", text))
}

/// Verbalized `(label, confidence)` guesses in order of appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedVerbalized {
    pub answers: Vec<(Label, f64)>,
}

/// Reads up to `k` label/confidence pairs.
///
/// Each standalone option letter is paired with the first number that
/// follows it before the next letter. `85%` and `85` read as 0.85, `0.85`
/// as itself; values are clamped to `[0, 1]`. Numbers glued to a word
/// (`G1`, `P2`) are ignored.
pub fn parse_verbalized(text: &str, k: usize, labels: &[Label]) -> Result<ParsedVerbalized> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let mut candidates: Vec<(usize, usize, Label)> = PAREN_LETTER
        .captures_iter(text)
        .chain(BARE_CAPITAL.captures_iter(text))
        .filter_map(|c| {
            let whole = c.get(0)?;
            let l = c[1].chars().next()?.to_ascii_uppercase();
            let l = Label::new(l).ok().filter(|l| labels.contains(l))?;
            Some((whole.start(), whole.end(), l))
        })
        .collect();
    candidates.sort_by_key(|&(start, end, _)| (start, std::cmp::Reverse(end)));
    // "(B)" also matches as a bare capital; keep only the outer span.
    let mut anchors: Vec<(usize, usize, Label)> = Vec::new();
    for a in candidates {
        if anchors.last().is_none_or(|last| a.0 >= last.1) {
            anchors.push(a);
        }
    }

    let bytes = text.as_bytes();
    let numbers: Vec<(usize, f64)> = NUMBER
        .captures_iter(text)
        .filter_map(|c| {
            let m = c.get(0)?;
            if m.start() > 0 && bytes[m.start() - 1].is_ascii_alphanumeric() {
                return None;
            }
            let value: f64 = c[1].parse().ok()?;
            let conf = if c.get(2).is_some() || value > 1.0 {
                value / 100.0
            } else {
                value
            };
            Some((m.start(), conf.clamp(0.0, 1.0)))
        })
        .collect();

    let mut answers: Vec<(Label, f64)> = Vec::new();
    for (i, &(_, end, label)) in anchors.iter().enumerate() {
        if answers.len() == k {
            break;
        }
        let limit = anchors.get(i + 1).map_or(text.len(), |a| a.0);
        let number = numbers.iter().find(|(pos, _)| *pos >= end && *pos < limit);
        if let Some(&(_, conf)) = number {
            if !answers.iter().any(|(l, _)| *l == label) {
                answers.push((label, conf));
            }
        }
    }
    if answers.is_empty() {
        return Err(Error::parse("no label/confidence pairs found", text));
    }
    Ok(ParsedVerbalized { answers })
}

static ANSWER_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*(?:final\s+)?answer\s*:|the\s+(?:correct\s+)?answer\s+is").unwrap());

/// Removes lines that state the final answer, leaving the reasoning.
pub fn strip_answer_lines(text: &str) -> String {
    let kept: Vec<&str> = text.lines().filter(|l| !ANSWER_LINE.is_match(l)).collect();
    let stripped = kept.join("\n").trim().to_string();
    if stripped.is_empty() {
        text.trim().to_string()
    } else {
        stripped
    }
}
