//! Domain types shared across the crate and the answer-distribution
//! arithmetic (label softmax and weighted mixing).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ probs = 1` for a valid [`AnswerDistribution`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A single uppercase option label, `A` through `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Label(u8);

impl Label {
    pub fn new(c: char) -> Result<Self> {
        if c.is_ascii_uppercase() {
            Ok(Label(c as u8))
        } else {
            Err(Error::InvalidInput(format!("label must be A-Z, got {c:?}")))
        }
    }

    /// The `i`-th label (`0 → A`).
    pub fn from_index(i: usize) -> Result<Self> {
        if i < 26 {
            Ok(Label(b'A' + i as u8))
        } else {
            Err(Error::InvalidInput(format!("label index {i} out of range")))
        }
    }

    pub fn index(self) -> usize {
        (self.0 - b'A') as usize
    }

    pub fn as_char(self) -> char {
        self.0 as char
    }

    /// Labels `A..` for `n` options.
    pub fn first_n(n: usize) -> Result<Vec<Label>> {
        (0..n).map(Label::from_index).collect()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Label::new(c),
            _ => Err(Error::InvalidInput(format!(
                "label must be a single character, got {s:?}"
            ))),
        }
    }
}

impl TryFrom<String> for Label {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Label> for String {
    fn from(l: Label) -> String {
        l.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: Label,
    pub text: String,
}

/// One multiple-choice item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub stem: String,
    pub options: Vec<AnswerOption>,
    pub gold: Label,
}

impl Question {
    /// Builds a question with labels assigned `A, B, ...` in option order.
    pub fn new(
        id: impl Into<String>,
        stem: impl Into<String>,
        options: &[&str],
        gold: Label,
    ) -> Result<Self> {
        let options = options
            .iter()
            .enumerate()
            .map(|(i, text)| {
                Ok(AnswerOption {
                    label: Label::from_index(i)?,
                    text: text.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let q = Question {
            id: id.into(),
            stem: stem.into(),
            options,
            gold,
        };
        q.validate()?;
        Ok(q)
    }

    /// Checks: at least two options, labels contiguous from `A`, gold among them.
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::Validation(format!(
                "question {}: needs at least 2 options, has {}",
                self.id,
                self.options.len()
            )));
        }
        for (i, opt) in self.options.iter().enumerate() {
            if opt.label.index() != i {
                return Err(Error::Validation(format!(
                    "question {}: option {} has label {}, expected {}",
                    self.id,
                    i + 1,
                    opt.label,
                    Label::from_index(i)?
                )));
            }
        }
        if self.gold.index() >= self.options.len() {
            return Err(Error::Validation(format!(
                "question {}: gold label {} is not an option",
                self.id, self.gold
            )));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<Label> {
        self.options.iter().map(|o| o.label).collect()
    }

    pub fn option_text(&self, label: Label) -> Option<&str> {
        self.options
            .iter()
            .find(|o| o.label == label)
            .map(|o| o.text.as_str())
    }
}

/// A normalized probability distribution over option labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<Label, f64>", into = "BTreeMap<Label, f64>")]
pub struct AnswerDistribution {
    probs: BTreeMap<Label, f64>,
}

impl AnswerDistribution {
    /// Validates that every entry is in `[0, 1]` and the total is 1 within
    /// [`SUM_TOLERANCE`].
    pub fn new(probs: BTreeMap<Label, f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty distribution".into()));
        }
        for (l, &p) in &probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!(
                    "probability for {l} is {p}, outside [0, 1]"
                )));
            }
        }
        let total: f64 = probs.values().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(AnswerDistribution { probs })
    }

    /// Divides non-negative masses by their total.
    pub fn normalized(masses: BTreeMap<Label, f64>) -> Result<Self> {
        if masses.values().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::InvalidInput(
                "masses must be finite and non-negative".into(),
            ));
        }
        let total: f64 = masses.values().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateWeights(total));
        }
        let probs = masses
            .into_iter()
            .map(|(l, m)| (l, (m / total).min(1.0)))
            .collect();
        AnswerDistribution::new(probs)
    }

    pub fn uniform(labels: &[Label]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidInput("empty label set".into()));
        }
        let p = 1.0 / labels.len() as f64;
        AnswerDistribution::normalized(labels.iter().map(|&l| (l, p)).collect())
    }

    /// All mass on `label`.
    pub fn point_mass(labels: &[Label], label: Label) -> Result<Self> {
        if !labels.contains(&label) {
            return Err(Error::InvalidInput(format!("{label} not in label set")));
        }
        AnswerDistribution::new(
            labels
                .iter()
                .map(|&l| (l, if l == label { 1.0 } else { 0.0 }))
                .collect(),
        )
    }

    pub fn get(&self, label: Label) -> f64 {
        self.probs.get(&label).copied().unwrap_or(0.0)
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.probs.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Label, f64)> + '_ {
        self.probs.iter().map(|(&l, &p)| (l, p))
    }

    pub fn as_map(&self) -> &BTreeMap<Label, f64> {
        &self.probs
    }

    /// Highest-probability label; ties go to the alphabetically lowest.
    pub fn argmax(&self) -> Label {
        let mut best: Option<(Label, f64)> = None;
        for (l, p) in self.iter() {
            match best {
                Some((_, bp)) if p <= bp => {}
                _ => best = Some((l, p)),
            }
        }
        best.expect("distribution is never empty").0
    }

    fn same_support(&self, other: &AnswerDistribution) -> bool {
        self.probs.keys().eq(other.probs.keys())
    }
}

impl TryFrom<BTreeMap<Label, f64>> for AnswerDistribution {
    type Error = Error;

    fn try_from(m: BTreeMap<Label, f64>) -> Result<Self> {
        AnswerDistribution::new(m)
    }
}

impl From<AnswerDistribution> for BTreeMap<Label, f64> {
    fn from(d: AnswerDistribution) -> Self {
        d.probs
    }
}

/// Softmax of per-label log scores, restricted to `labels`.
///
/// Uses a max shift so large scores cannot overflow.
pub fn softmax_over_labels(
    log_scores: &BTreeMap<Label, f64>,
    labels: &[Label],
) -> Result<AnswerDistribution> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty label set".into()));
    }
    let scores = labels
        .iter()
        .map(|l| {
            log_scores
                .get(l)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("no score for label {l}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if scores.iter().any(|s| s.is_nan() || *s == f64::INFINITY) {
        return Err(Error::InvalidInput("log scores must not be NaN or +inf".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidInput("all log scores are -inf".into()));
    }
    let masses = labels
        .iter()
        .zip(&scores)
        .map(|(&l, &s)| (l, (s - max).exp()))
        .collect();
    AnswerDistribution::normalized(masses)
}

/// Weighted mixture `Σ_n (w_n / Σw) · dist_n`.
///
/// Fails with [`Error::DegenerateWeights`] when the weights sum to zero; the
/// caller picks the fallback.
pub fn mix_distributions(weights: &[f64], dists: &[AnswerDistribution]) -> Result<AnswerDistribution> {
    if weights.is_empty() || weights.len() != dists.len() {
        return Err(Error::InvalidInput(format!(
            "need equal non-zero numbers of weights and distributions, got {} and {}",
            weights.len(),
            dists.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidInput(
            "weights must be finite and non-negative".into(),
        ));
    }
    if dists.iter().any(|d| !d.same_support(&dists[0])) {
        return Err(Error::InvalidInput(
            "distributions have different label sets".into(),
        ));
    }
    let z: f64 = weights.iter().sum();
    if z <= 0.0 {
        return Err(Error::DegenerateWeights(z));
    }
    let mut masses: BTreeMap<Label, f64> = dists[0].labels().map(|l| (l, 0.0)).collect();
    for (w, d) in weights.iter().zip(dists) {
        let share = w / z;
        for (l, p) in d.iter() {
            *masses.get_mut(&l).expect("same support") += share * p;
        }
    }
    AnswerDistribution::normalized(masses)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    TokenProb,
    Linguistic,
    Topk,
    CotConsistency,
    Stability,
    CotStability,
    StabilityEntailOnly,
    StabilityDistributionOnly,
    Tta,
}

impl MethodKind {
    pub const ALL: [MethodKind; 9] = [
        MethodKind::TokenProb,
        MethodKind::Linguistic,
        MethodKind::Topk,
        MethodKind::CotConsistency,
        MethodKind::Stability,
        MethodKind::CotStability,
        MethodKind::StabilityEntailOnly,
        MethodKind::StabilityDistributionOnly,
        MethodKind::Tta,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::TokenProb => "token_prob",
            MethodKind::Linguistic => "linguistic",
            MethodKind::Topk => "topk",
            MethodKind::CotConsistency => "cot_consistency",
            MethodKind::Stability => "stability",
            MethodKind::CotStability => "cot_stability",
            MethodKind::StabilityEntailOnly => "stability_entail_only",
            MethodKind::StabilityDistributionOnly => "stability_distribution_only",
            MethodKind::Tta => "tta",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlausibilityKind {
    #[default]
    Entailment,
    MostLikely,
    CompleteDescription,
    Uniform,
}

impl FromStr for PlausibilityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entailment" => Ok(PlausibilityKind::Entailment),
            "most_likely" => Ok(PlausibilityKind::MostLikely),
            "complete_description" => Ok(PlausibilityKind::CompleteDescription),
            "uniform" => Ok(PlausibilityKind::Uniform),
            _ => Err(Error::InvalidInput(format!("unknown plausibility {s:?}"))),
        }
    }
}

/// Whether explanations are requested before or after the model commits to
/// an answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationPosition {
    #[default]
    PreAnswer,
    PostAnswer,
}

impl FromStr for ExplanationPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" | "pre_answer" => Ok(ExplanationPosition::PreAnswer),
            "post" | "post_answer" => Ok(ExplanationPosition::PostAnswer),
            _ => Err(Error::InvalidInput(format!("unknown position {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: MethodKind,
    pub n_samples: usize,
    pub k: usize,
    pub temperature_explain: f64,
    pub temperature_answer: f64,
    pub plausibility: PlausibilityKind,
    pub explanation_position: ExplanationPosition,
}

impl MethodConfig {
    pub fn new(method: MethodKind) -> Self {
        MethodConfig {
            method,
            n_samples: 5,
            k: 5,
            temperature_explain: 0.7,
            temperature_answer: 0.0,
            plausibility: PlausibilityKind::Entailment,
            explanation_position: ExplanationPosition::PreAnswer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidInput("n_samples must be at least 1".into()));
        }
        if !(self.temperature_explain >= 0.0 && self.temperature_answer >= 0.0) {
            return Err(Error::InvalidInput("temperatures must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig::new(MethodKind::Stability)
    }
}

/// A sampled rationale and its plausibility weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub text: String,
    pub plausibility: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioned_label: Option<Label>,
}

/// One scored prediction: the unit every metric consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub question_id: String,
    pub method: String,
    pub predicted: Label,
    pub confidence: f64,
    pub correct: bool,
    pub n_samples: usize,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}
