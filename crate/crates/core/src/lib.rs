//! Black-box confidence estimation for multiple-choice LLM answers.
//!
//! The central estimator samples explanations from the model, weights each by
//! how strongly the question entails it, reads the answer distribution the
//! model produces given that explanation, and marginalizes. Baselines
//! (token probability, verbalized confidence, top-k, CoT consistency, TTA)
//! and ablations share the same backend and prompt machinery, and the
//! [`metrics`] module scores any of them with ECE, AURC and AUROC.

pub mod backend;
pub mod error;
pub mod methods;
pub mod metrics;
pub mod prompts;
pub mod runner;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    mix_distributions, softmax_over_labels, AnswerDistribution, AnswerOption, Explanation,
    ExplanationPosition, Label, MethodConfig, MethodKind, PlausibilityKind, PredictionRecord,
    Question,
};
