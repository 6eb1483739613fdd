//! Confidence elicitation strategies.
//!
//! [`Estimator::stable`] is the main method: sample `N` explanations, weight
//! each by a plausibility score ρ (by default the model's probability that
//! the question entails the explanation), read the answer distribution the
//! model produces after each explanation, and return the ρ-weighted mixture
//!
//! ```text
//! p̂(a | q) = Σ_n (ρ_n / Σ_m ρ_m) · softmax(φ(q, e_n))_a
//! ```
//!
//! The remaining methods are baselines (token probability, verbalized
//! confidence, top-k, CoT consistency, TTA) and the two ablations that keep
//! only the weighting or only the conditional distributions.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    answer_position, keyed_logprobs, label_logprobs, strip_token, Backend, Completion,
    CompletionRequest, MAX_TOP_LOGPROBS,
};
use crate::error::{Error, Result};
use crate::prompts::{self, Extras, PromptKind};
use crate::types::{
    mix_distributions, softmax_over_labels, AnswerDistribution, Explanation, Label, MethodConfig, MethodKind, PlausibilityKind, Question,
};

/// Below this total plausibility the weights are replaced by uniform ones.
pub const DEGENERATE_WEIGHT_SUM: f64 = 1e-12;

pub const META_DEGENERATE: &str = "degenerate_weights";

const ANSWER_MAX_TOKENS: u32 = 8;
const VERBALIZED_MAX_TOKENS: u32 = 128;
const EXPLANATION_MAX_TOKENS: u32 = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceResult {
    pub distribution: AnswerDistribution,
    pub predicted: Label,
    pub confidence: f64,
    pub samples_used: usize,
    pub parse_failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanations: Option<Vec<Explanation>>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl ConfidenceResult {
    pub fn new(distribution: AnswerDistribution, samples_used: usize, parse_failures: usize) -> Self {
        let predicted = distribution.argmax();
        ConfidenceResult {
            confidence: distribution.get(predicted),
            predicted,
            distribution,
            samples_used,
            parse_failures,
            explanations: None,
            metadata: BTreeMap::new(),
        }
    }

    fn flag_degenerate(mut self, degenerate: bool) -> Self {
        if degenerate {
            self.metadata.insert(META_DEGENERATE.into(), "true".into());
        }
        self
    }

    fn with_explanations(mut self, explanations: Vec<Explanation>) -> Self {
        self.explanations = Some(explanations);
        self
    }
}

/// Mean per-token log-probability, in nats per token.
pub fn sequence_loglik(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::InvalidInput("no token logprobs".into()));
    }
    Ok(token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64)
}

/// `e^{pos} / (e^{pos} + e^{neg})`, evaluated without overflow.
pub fn two_way_probability(lp_pos: f64, lp_neg: f64) -> f64 {
    1.0 / (1.0 + (lp_neg - lp_pos).exp())
}

/// ρ-weighted mixture of conditional distributions. Weights summing below
/// [`DEGENERATE_WEIGHT_SUM`] are replaced by uniform weights; the flag
/// reports whether that happened.
pub fn marginalize(rhos: &[f64], dists: &[AnswerDistribution]) -> Result<(AnswerDistribution, bool)> {
    let z: f64 = rhos.iter().sum();
    if z < DEGENERATE_WEIGHT_SUM {
        let uniform = vec![1.0; dists.len()];
        return Ok((mix_distributions(&uniform, dists)?, true));
    }
    Ok((mix_distributions(rhos, dists)?, false))
}

/// Weighted vote over parsed answers; `None` marks a parse failure and is
/// left out of the denominator.
pub fn vote_distribution(
    answers: &[Option<Label>],
    weights: &[f64],
    labels: &[Label],
) -> Result<(AnswerDistribution, bool)> {
    if answers.len() != weights.len() {
        return Err(Error::InvalidInput("answers and weights differ in length".into()));
    }
    let parsed: Vec<(Label, f64)> = answers
        .iter()
        .zip(weights)
        .filter_map(|(a, &w)| a.map(|a| (a, w)))
        .collect();
    if parsed.is_empty() {
        return Err(Error::NoParsableSamples(answers.len()));
    }
    let z: f64 = parsed.iter().map(|(_, w)| w).sum();
    let degenerate = z < DEGENERATE_WEIGHT_SUM;
    // Scaled so the largest weight is exactly 1.
    let top = parsed.iter().map(|(_, w)| *w).fold(0.0, f64::max);
    let mut masses: BTreeMap<Label, f64> = labels.iter().map(|&l| (l, 0.0)).collect();
    for (label, w) in parsed {
        let slot = masses
            .get_mut(&label)
            .ok_or_else(|| Error::InvalidInput(format!("{label} not in label set")))?;
        *slot += if degenerate { 1.0 } else { w / top };
    }
    Ok((AnswerDistribution::normalized(masses)?, degenerate))
}

/// Distribution from verbalized guesses. Unlisted labels split the residual
/// `max(0, 1 - Σ listed)` equally, then everything is renormalized.
pub fn verbalized_distribution(pairs: &[(Label, f64)], labels: &[Label]) -> Result<(AnswerDistribution, bool)> {
    let mut masses: BTreeMap<Label, Option<f64>> = labels.iter().map(|&l| (l, None)).collect();
    for &(label, conf) in pairs {
        if let Some(slot) = masses.get_mut(&label) {
            slot.get_or_insert(conf.clamp(0.0, 1.0));
        }
    }
    let listed: f64 = masses.values().flatten().sum();
    let unlisted = masses.values().filter(|m| m.is_none()).count();
    let share = if unlisted > 0 {
        (1.0 - listed).max(0.0) / unlisted as f64
    } else {
        0.0
    };
    let filled: BTreeMap<Label, f64> = masses
        .into_iter()
        .map(|(l, m)| (l, m.unwrap_or(share)))
        .collect();
    match AnswerDistribution::normalized(filled) {
        Ok(d) => Ok((d, false)),
        Err(Error::DegenerateWeights(_)) => Ok((AnswerDistribution::uniform(labels)?, true)),
        Err(e) => Err(e),
    }
}

/// `r` on the stated label, `(1 - r) / (|labels| - 1)` on each other label.
pub fn linguistic_distribution(label: Label, r: f64, labels: &[Label]) -> Result<AnswerDistribution> {
    if !labels.contains(&label) || labels.len() < 2 {
        return Err(Error::InvalidInput(format!("{label} not among at least two labels")));
    }
    let r = r.clamp(0.0, 1.0);
    let rest = (1.0 - r) / (labels.len() - 1) as f64;
    AnswerDistribution::normalized(
        labels
            .iter()
            .map(|&l| (l, if l == label { r } else { rest }))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Verdict {
    True,
    False,
}

fn classify_verdict(token: &str) -> Option<Verdict> {
    match token.to_ascii_lowercase().as_str() {
        "true" | "t" => Some(Verdict::True),
        "false" | "f" => Some(Verdict::False),
        _ => None,
    }
}

fn verdict_position(completion: &Completion) -> usize {
    let is_verdict = |t: &str| classify_verdict(&strip_token(t)).is_some();
    completion
        .tokens
        .iter()
        .position(|t| is_verdict(&t.token))
        .or_else(|| {
            completion
                .tokens
                .iter()
                .position(|t| t.alternatives.iter().any(|a| is_verdict(&a.token)))
        })
        .unwrap_or(0)
}

/// One row of the correct- vs incorrect-conditioned explanation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub question_id: String,
    pub conditioned_correct: bool,
    pub conditioned_label: Label,
    pub loglik: f64,
    pub entail_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StudyOutcome {
    pub rows: Vec<StudyRow>,
    pub skipped: usize,
    pub errors: Vec<String>,
}

/// Draws a wrong label for `question_id`, reproducibly from `seed`.
pub fn study_wrong_label(q: &Question, seed: u64) -> Result<Label> {
    let digest = Sha256::digest(q.id.as_bytes());
    let id_bits = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id_bits);
    let wrong: Vec<Label> = q.labels().into_iter().filter(|&l| l != q.gold).collect();
    wrong
        .choose(&mut rng)
        .copied()
        .ok_or_else(|| Error::InvalidInput(format!("question {} has no wrong option", q.id)))
}

/// Runs confidence methods against a backend.
pub struct Estimator<B> {
    backend: B,
    model: String,
    config: MethodConfig,
}

impl<B: Backend> Estimator<B> {
    pub fn new(backend: B, model: impl Into<String>, config: MethodConfig) -> Result<Self> {
        config.validate()?;
        Ok(Estimator {
            backend,
            model: model.into(),
            config,
        })
    }

    pub fn config(&self) -> &MethodConfig {
        &self.config
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    /// Runs the configured method.
    pub fn estimate(&self, q: &Question) -> Result<ConfidenceResult> {
        q.validate()?;
        match self.config.method {
            MethodKind::TokenProb => self.token_prob(q),
            MethodKind::Linguistic => self.linguistic(q),
            MethodKind::Topk => self.topk(q, self.config.k),
            MethodKind::CotConsistency => self.cot_consistency(q, self.config.n_samples),
            MethodKind::Stability => self.stable(q, PromptKind::StabilityExplain, self.config.plausibility),
            MethodKind::CotStability => self.stable(q, PromptKind::Cot, self.config.plausibility),
            MethodKind::StabilityEntailOnly => self.stable_entail_only(q),
            MethodKind::StabilityDistributionOnly => {
                self.stable(q, PromptKind::StabilityExplain, PlausibilityKind::Uniform)
            }
            MethodKind::Tta => self.tta(q),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn call(
        &self,
        kind: PromptKind,
        q: &Question,
        extras: &Extras,
        temperature: f64,
        max_tokens: u32,
        want_logprobs: bool,
        sample_index: u32,
    ) -> Result<Completion> {
        let mut request = CompletionRequest::new(self.model.clone(), prompts::render(kind, q, extras)?);
        request.temperature = temperature;
        request.max_tokens = max_tokens;
        request.want_logprobs = want_logprobs;
        request.top_logprobs = MAX_TOP_LOGPROBS;
        request.sample_index = sample_index;
        self.backend.complete(&request)
    }

    fn answer_distribution(&self, completion: &Completion, labels: &[Label]) -> Result<AnswerDistribution> {
        let position = answer_position(completion, labels);
        softmax_over_labels(&label_logprobs(completion, position, labels)?, labels)
    }

    /// Softmax over the option letters at the answer position.
    pub fn token_prob(&self, q: &Question) -> Result<ConfidenceResult> {
        let c = self.call(
            PromptKind::TokenProb,
            q,
            &Extras::default(),
            self.config.temperature_answer,
            ANSWER_MAX_TOKENS,
            true,
            0,
        )?;
        Ok(ConfidenceResult::new(self.answer_distribution(&c, &q.labels())?, 1, 0))
    }

    /// Single verbalized answer and confidence.
    pub fn linguistic(&self, q: &Question) -> Result<ConfidenceResult> {
        let labels = q.labels();
        let c = self.call(
            PromptKind::Linguistic,
            q,
            &Extras::default(),
            self.config.temperature_answer,
            VERBALIZED_MAX_TOKENS,
            false,
            0,
        )?;
        let parsed = prompts::parse_verbalized(&c.text, 1, &labels)?;
        let (label, r) = parsed.answers[0];
        Ok(ConfidenceResult::new(linguistic_distribution(label, r, &labels)?, 1, 0))
    }

    /// `k` verbalized guesses with confidences.
    pub fn topk(&self, q: &Question, k: usize) -> Result<ConfidenceResult> {
        if k < 2 {
            return Err(Error::InvalidInput("top-k needs k >= 2".into()));
        }
        let labels = q.labels();
        let c = self.call(
            PromptKind::Topk,
            q,
            &Extras::k(k),
            self.config.temperature_answer,
            VERBALIZED_MAX_TOKENS,
            false,
            0,
        )?;
        let parsed = prompts::parse_verbalized(&c.text, k, &labels)?;
        let (dist, degenerate) = verbalized_distribution(&parsed.answers, &labels)?;
        Ok(ConfidenceResult::new(dist, 1, 0).flag_degenerate(degenerate))
    }

    fn cot_samples(&self, q: &Question, n: usize) -> Result<Vec<(String, Option<Label>)>> {
        let labels = q.labels();
        (0..n)
            .map(|i| {
                let c = self.call(
                    PromptKind::Cot,
                    q,
                    &Extras::default(),
                    self.config.temperature_explain,
                    EXPLANATION_MAX_TOKENS,
                    false,
                    i as u32,
                )?;
                let label = prompts::parse_answer_label(&c.text, &labels).ok();
                Ok((c.text, label))
            })
            .collect()
    }

    /// Relative frequency of parsed answers across `n` CoT samples.
    pub fn cot_consistency(&self, q: &Question, n: usize) -> Result<ConfidenceResult> {
        if n == 0 {
            return Err(Error::InvalidInput("need at least one sample".into()));
        }
        let samples = self.cot_samples(q, n)?;
        let answers: Vec<Option<Label>> = samples.iter().map(|(_, a)| *a).collect();
        let failures = answers.iter().filter(|a| a.is_none()).count();
        let (dist, _) = vote_distribution(&answers, &vec![1.0; n], &q.labels())?;
        Ok(ConfidenceResult::new(dist, n, failures))
    }

    /// Plausibility ρ ∈ [0, 1] of explanation text for `q`.
    pub fn score_plausibility(
        &self,
        scorer: PlausibilityKind,
        q: &Question,
        explanation: &str,
        sample_index: u32,
    ) -> Result<f64> {
        let kind = match scorer {
            PlausibilityKind::Uniform => return Ok(1.0),
            PlausibilityKind::Entailment => PromptKind::Entailment,
            PlausibilityKind::MostLikely => PromptKind::MostLikelyTf,
            PlausibilityKind::CompleteDescription => PromptKind::CompleteDescriptionTf,
        };
        let c = self.call(
            kind,
            q,
            &Extras::explanation(explanation),
            self.config.temperature_answer,
            ANSWER_MAX_TOKENS,
            true,
            sample_index,
        )?;
        let lps = keyed_logprobs(
            &c,
            verdict_position(&c),
            &[Verdict::True, Verdict::False],
            classify_verdict,
        )?;
        Ok(two_way_probability(lps[&Verdict::True], lps[&Verdict::False]))
    }

    fn explain(&self, q: &Question, kind: PromptKind, sample_index: u32) -> Result<String> {
        let extras = Extras::default().with_position(self.config.explanation_position);
        let c = self.call(
            kind,
            q,
            &extras,
            self.config.temperature_explain,
            EXPLANATION_MAX_TOKENS,
            false,
            sample_index,
        )?;
        Ok(prompts::strip_answer_lines(&c.text))
    }

    /// Explanation-weighted posterior over answers. `explain_kind` selects
    /// the explanation prompt (`StabilityExplain` or `Cot`), `scorer` the
    /// plausibility weight.
    pub fn stable(&self, q: &Question, explain_kind: PromptKind, scorer: PlausibilityKind) -> Result<ConfidenceResult> {
        let labels = q.labels();
        let n = self.config.n_samples;
        let mut explanations = Vec::with_capacity(n);
        let mut dists = Vec::with_capacity(n);
        for i in 0..n as u32 {
            let text = self.explain(q, explain_kind, i)?;
            let rho = self.score_plausibility(scorer, q, &text, i)?;
            let c = self.call(
                PromptKind::StabilityAnswerGivenExplanation,
                q,
                &Extras::explanation(&text),
                self.config.temperature_answer,
                ANSWER_MAX_TOKENS,
                true,
                i,
            )?;
            dists.push(self.answer_distribution(&c, &labels)?);
            explanations.push(Explanation {
                text,
                plausibility: rho,
                token_logprobs: None,
                conditioned_label: None,
            });
        }
        let rhos: Vec<f64> = explanations.iter().map(|e| e.plausibility).collect();
        let (dist, degenerate) = marginalize(&rhos, &dists)?;
        Ok(ConfidenceResult::new(dist, n, 0)
            .flag_degenerate(degenerate)
            .with_explanations(explanations))
    }

    /// CoT answers reweighted by the plausibility of their reasoning.
    pub fn stable_entail_only(&self, q: &Question) -> Result<ConfidenceResult> {
        let n = self.config.n_samples;
        let samples = self.cot_samples(q, n)?;
        let mut answers = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut explanations = Vec::new();
        for (i, (text, label)) in samples.into_iter().enumerate() {
            let rho = match label {
                Some(_) => {
                    let reasoning = prompts::strip_answer_lines(&text);
                    let rho = self.score_plausibility(self.config.plausibility, q, &reasoning, i as u32)?;
                    explanations.push(Explanation {
                        text: reasoning,
                        plausibility: rho,
                        token_logprobs: None,
                        conditioned_label: None,
                    });
                    rho
                }
                None => 0.0,
            };
            answers.push(label);
            weights.push(rho);
        }
        let failures = answers.iter().filter(|a| a.is_none()).count();
        let (dist, degenerate) = vote_distribution(&answers, &weights, &q.labels())?;
        Ok(ConfidenceResult::new(dist, n, failures)
            .flag_degenerate(degenerate)
            .with_explanations(explanations))
    }

    /// One explanation per option, then a single top-k elicitation that sees
    /// all of them.
    pub fn tta(&self, q: &Question) -> Result<ConfidenceResult> {
        let labels = q.labels();
        let mut explanations = Vec::with_capacity(labels.len());
        for (i, &label) in labels.iter().enumerate() {
            let c = self.call(
                PromptKind::TtaExplain,
                q,
                &Extras::answer(label),
                self.config.temperature_explain,
                EXPLANATION_MAX_TOKENS,
                false,
                i as u32,
            )?;
            explanations.push(Explanation {
                text: c.text.trim().to_string(),
                plausibility: 1.0,
                token_logprobs: None,
                conditioned_label: Some(label),
            });
        }
        let block = explanations
            .iter()
            .map(|e| {
                format!(
                    "({}): {}",
                    e.conditioned_label.expect("set above"),
                    e.text
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        let k = self.config.k.clamp(1, labels.len());
        let c = self.call(
            PromptKind::TtaConfidence,
            q,
            &Extras::explanation(block).with_k(k),
            self.config.temperature_answer,
            VERBALIZED_MAX_TOKENS,
            false,
            0,
        )?;
        let parsed = prompts::parse_verbalized(&c.text, k, &labels)?;
        let (dist, degenerate) = verbalized_distribution(&parsed.answers, &labels)?;
        Ok(ConfidenceResult::new(dist, labels.len(), 0)
            .flag_degenerate(degenerate)
            .with_explanations(explanations))
    }

    fn conditioned_explanation(&self, q: &Question, label: Label) -> Result<(Explanation, f64)> {
        let c = self.call(
            PromptKind::ConditionalExplanation,
            q,
            &Extras::answer(label),
            self.config.temperature_explain,
            EXPLANATION_MAX_TOKENS,
            true,
            0,
        )?;
        let logprobs = c.token_logprobs();
        let loglik = sequence_loglik(&logprobs)?;
        let text = prompts::strip_answer_lines(&c.text);
        let rho = self.score_plausibility(self.config.plausibility, q, &text, 0)?;
        Ok((
            Explanation {
                text,
                plausibility: rho,
                token_logprobs: Some(logprobs),
                conditioned_label: Some(label),
            },
            loglik,
        ))
    }

    /// For each question, one explanation conditioned on the gold label and
    /// one on a seeded random wrong label, each with its length-normalized
    /// log-likelihood and plausibility. Failed rows are skipped and counted.
    pub fn explanation_study(&self, questions: &[Question], seed: u64) -> Result<StudyOutcome> {
        let mut out = StudyOutcome::default();
        for q in questions {
            q.validate()?;
            let wrong = study_wrong_label(q, seed)?;
            for (label, correct) in [(q.gold, true), (wrong, false)] {
                match self.conditioned_explanation(q, label) {
                    Ok((e, loglik)) => out.rows.push(StudyRow {
                        question_id: q.id.clone(),
                        conditioned_correct: correct,
                        conditioned_label: label,
                        loglik,
                        entail_prob: e.plausibility,
                    }),
                    Err(err) => {
                        out.skipped += 1;
                        out.errors.push(format!("{} ({label}): {err}", q.id));
                    }
                }
            }
        }
        Ok(out)
    }
}
