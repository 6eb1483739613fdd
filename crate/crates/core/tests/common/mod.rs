#![allow(dead_code)]

use std::path::PathBuf;

use expconf::backend::FixtureEntry;
use expconf::{Label, Question};

pub fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

pub fn question(n_options: usize) -> Question {
    let texts: Vec<String> = (0..n_options).map(|i| format!("choice {i}")).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    Question::new("inst", "Which choice?", &refs, Label::new('A').unwrap()).unwrap()
}

pub fn labels(n: usize) -> Vec<Label> {
    Label::first_n(n).unwrap()
}

/// One explanation sample of a scripted stability instance.
#[derive(Debug, Clone)]
pub struct Draw {
    /// Logprobs of "True" and "False" on the entailment prompt.
    pub verdict: (f64, f64),
    /// Logprob of each option letter on the answer prompt.
    pub letters: Vec<f64>,
}

fn explanation_text(n: usize) -> String {
    format!("Scripted explanation number {n}.")
}

/// Fixture for `stability` / `stability_distribution_only`: sample `n` gets
/// its own explanation, entailment verdict and answer logprobs.
pub fn stability_fixture(draws: &[Draw]) -> Vec<FixtureEntry> {
    let mut entries = Vec::new();
    for (n, d) in draws.iter().enumerate() {
        let text = explanation_text(n);
        entries.push(FixtureEntry::new(format!("Hypothesis: {text}"), "True").with_position(&[
            ("True", d.verdict.0),
            ("False", d.verdict.1),
        ]));
        let letters: Vec<(String, f64)> = d
            .letters
            .iter()
            .enumerate()
            .map(|(i, &lp)| (Label::from_index(i).unwrap().to_string(), lp))
            .collect();
        let refs: Vec<(&str, f64)> = letters.iter().map(|(t, lp)| (t.as_str(), *lp)).collect();
        entries.push(FixtureEntry::new(format!("Explanation: {text}\n"), "A").with_position(&refs));
        entries.push(FixtureEntry::new("First explain", format!("{text}\nAnswer: (A)")).for_sample(n as u32));
    }
    entries
}

/// Fixture for `cot_consistency` / `stability_entail_only`: sample `n`
/// answers `answers[n]` (or nothing parsable) and every entailment verdict
/// uses `verdict`.
pub fn cot_fixture(answers: &[Option<Label>], verdict: (f64, f64)) -> Vec<FixtureEntry> {
    let mut entries = vec![FixtureEntry::new("Hypothesis:", "True").with_position(&[("True", verdict.0), ("False", verdict.1)])];
    for (n, a) in answers.iter().enumerate() {
        let text = match a {
            Some(l) => format!("{}\nThe answer is ({l})", explanation_text(n)),
            None => explanation_text(n),
        };
        entries.push(FixtureEntry::new("step by step", text).for_sample(n as u32));
    }
    entries
}

/// Σ_n (ρ_n / z) · p_n(a), written as plain nested loops.
pub fn naive_mixture(draws: &[Draw]) -> Vec<f64> {
    let k = draws[0].letters.len();
    let rhos: Vec<f64> = draws
        .iter()
        .map(|d| d.verdict.0.exp() / (d.verdict.0.exp() + d.verdict.1.exp()))
        .collect();
    let mut z = 0.0;
    for r in &rhos {
        z += r;
    }
    let mut out = vec![0.0; k];
    for (d, r) in draws.iter().zip(&rhos) {
        let mut norm = 0.0;
        for lp in &d.letters {
            norm += lp.exp();
        }
        for (slot, lp) in out.iter_mut().zip(&d.letters) {
            *slot += r / z * lp.exp() / norm;
        }
    }
    out
}
