//! Experiment orchestration: score a dataset with one method, persist
//! records as JSON lines, and turn them into summaries, curves, sample-size
//! sweeps and the conditioned-explanation study.

mod dataset;
mod report;

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, CachedBackend, MockBackend, OpenAiBackend, OpenAiConfig, ResponseCache};
use crate::error::{Error, Result};
use crate::methods::{ConfidenceResult, Estimator};
use crate::types::{MethodConfig, PredictionRecord, Question};

pub use dataset::{load_dataset, parse_dataset, DatasetChoice, DatasetFile, DatasetRow};
pub use report::{
    emit_curves, evaluate, load_records, study, study_summary, sweep_samples, write_summary, ConditionStats,
    CurveFiles, EvalReport, StudySummary, SweepRow,
};

pub const DEFAULT_LIMIT: usize = 250;
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    OpenaiCompatible,
    Mock,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "openai_compatible" | "openai" => Ok(BackendKind::OpenaiCompatible),
            "mock" => Ok(BackendKind::Mock),
            _ => Err(Error::InvalidInput(format!("unknown backend {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_path: PathBuf,
    pub backend: BackendKind,
    /// Fixture file for the mock backend.
    pub fixture_path: Option<PathBuf>,
    pub model: String,
    pub method_config: MethodConfig,
    pub concurrency: usize,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub output_path: PathBuf,
    pub limit: Option<usize>,
}

impl RunConfig {
    pub fn new(dataset_path: impl Into<PathBuf>, output_path: impl Into<PathBuf>, method_config: MethodConfig) -> Self {
        RunConfig {
            dataset_path: dataset_path.into(),
            backend: BackendKind::Mock,
            fixture_path: None,
            model: "mock".into(),
            method_config,
            concurrency: DEFAULT_CONCURRENCY,
            seed: 0,
            cache_dir: None,
            output_path: output_path.into(),
            limit: Some(DEFAULT_LIMIT),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            return Err(Error::InvalidInput("concurrency must be at least 1".into()));
        }
        if self.limit == Some(0) {
            return Err(Error::InvalidInput("limit must be at least 1".into()));
        }
        self.method_config.validate()
    }

    /// Questions from the dataset, truncated to `limit`.
    pub fn questions(&self) -> Result<Vec<Question>> {
        let mut questions = load_dataset(&self.dataset_path)?.questions;
        if let Some(limit) = self.limit {
            questions.truncate(limit);
        }
        Ok(questions)
    }

    /// Backend described by the config, behind the response cache when a
    /// cache directory is set. `offline` turns cache misses into errors.
    pub fn build_backend(&self, offline: bool) -> Result<Arc<dyn Backend>> {
        let base: Arc<dyn Backend> = match self.backend {
            BackendKind::Mock => {
                let path = self
                    .fixture_path
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput("the mock backend needs a fixture file".into()))?;
                Arc::new(MockBackend::from_jsonl_file(path)?)
            }
            BackendKind::OpenaiCompatible if offline => Arc::new(Unreachable),
            BackendKind::OpenaiCompatible => {
                let mut cfg = OpenAiConfig::from_env()?;
                cfg.max_in_flight = self.concurrency;
                Arc::new(OpenAiBackend::new(cfg)?)
            }
        };
        match &self.cache_dir {
            Some(dir) => Ok(Arc::new(CachedBackend::new(base, ResponseCache::open(dir)?).offline(offline))),
            None if offline => Err(Error::InvalidInput("cache-only mode needs a cache directory".into())),
            None => Ok(base),
        }
    }
}

/// Stands in for a remote backend in cache-only mode.
struct Unreachable;

impl Backend for Unreachable {
    fn complete(&self, _: &crate::backend::CompletionRequest) -> Result<crate::backend::Completion> {
        Err(Error::Transport("backend disabled in cache-only mode".into()))
    }
}

/// A question that could not be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRecord {
    pub question_id: String,
    pub method: String,
    pub failed: bool,
    pub error: String,
}

/// One line of a records file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecordLine {
    Failed(FailedRecord),
    Scored(PredictionRecord),
}

impl RecordLine {
    pub fn question_id(&self) -> &str {
        match self {
            RecordLine::Failed(f) => &f.question_id,
            RecordLine::Scored(r) => &r.question_id,
        }
    }

    pub fn is_failed(&self) -> bool {
        matches!(self, RecordLine::Failed(_))
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }
}

pub fn to_record(q: &Question, method: &str, result: &ConfidenceResult) -> Result<PredictionRecord> {
    let mut metadata = result.metadata.clone();
    metadata.insert("distribution".into(), serde_json::to_string(&result.distribution)?);
    metadata.insert("parse_failures".into(), result.parse_failures.to_string());
    Ok(PredictionRecord {
        question_id: q.id.clone(),
        method: method.to_string(),
        predicted: result.predicted,
        confidence: result.confidence,
        correct: result.predicted == q.gold,
        n_samples: result.samples_used,
        metadata,
    })
}

/// Scores `questions` on up to `concurrency` threads and hands each line to
/// `sink` in input order, whatever order the workers finish in.
pub fn score_questions<B, F>(
    estimator: &Estimator<B>,
    questions: &[Question],
    concurrency: usize,
    mut sink: F,
) -> Result<()>
where
    B: Backend,
    F: FnMut(RecordLine) -> Result<()>,
{
    let method = estimator.config().method.as_str();
    let score = |q: &Question| -> RecordLine {
        match estimator.estimate(q).and_then(|r| to_record(q, method, &r)) {
            Ok(rec) => RecordLine::Scored(rec),
            Err(e) => {
                warn!("question {} failed: {e}", q.id);
                RecordLine::Failed(FailedRecord {
                    question_id: q.id.clone(),
                    method: method.to_string(),
                    failed: true,
                    error: e.to_string(),
                })
            }
        }
    };
    let workers = concurrency.clamp(1, questions.len().max(1));
    let next = AtomicUsize::new(0);
    thread::scope(|s| {
        let (tx, rx) = mpsc::channel::<(usize, RecordLine)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, score) = (&next, &score);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(q) = questions.get(i) else { break };
                if tx.send((i, score(q))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut emit = 0usize;
        for (i, line) in rx {
            pending.insert(i, line);
            while let Some(line) = pending.remove(&emit) {
                if let Err(e) = sink(line) {
                    // Stop handing out work; in-flight questions finish and are dropped.
                    next.store(questions.len(), Ordering::Relaxed);
                    return Err(e);
                }
                emit += 1;
            }
        }
        Ok(())
    })
}

/// Reads the complete lines of an existing records file. A trailing partial
/// line from an interrupted run is cut off the file.
fn existing_lines(path: &Path) -> Result<Vec<RecordLine>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    if complete.len() != text.len() {
        warn!("dropping partial last line of {}", path.display());
        OpenOptions::new().write(true).open(path)?.set_len(complete.len() as u64)?;
    }
    complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Dataset {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutcome {
    /// Every line now in the output file, in file order.
    pub lines: Vec<RecordLine>,
    pub resumed: usize,
    pub scored: usize,
    pub failed: usize,
}

impl RunOutcome {
    pub fn records(&self) -> Vec<PredictionRecord> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                RecordLine::Scored(r) => Some(r.clone()),
                RecordLine::Failed(_) => None,
            })
            .collect()
    }
}

/// Runs with the backend named in `config`.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let backend = config.build_backend(false)?;
    run_with_backend(config, backend)
}

/// Scores every question not already present in `config.output_path`,
/// appending one line per question. Fails with [`Error::RunAborted`] when
/// more than half of the newly attempted questions fail.
pub fn run_with_backend<B: Backend>(config: &RunConfig, backend: B) -> Result<RunOutcome> {
    config.validate()?;
    let questions = config.questions()?;
    let mut lines = existing_lines(&config.output_path)?;
    let done: HashSet<String> = lines.iter().map(|l| l.question_id().to_string()).collect();
    let todo: Vec<Question> = questions.into_iter().filter(|q| !done.contains(&q.id)).collect();
    info!(
        "{}: {} questions to score, {} already in {}",
        config.method_config.method,
        todo.len(),
        done.len(),
        config.output_path.display()
    );
    if let Some(dir) = config.output_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = OpenOptions::new().create(true).append(true).open(&config.output_path)?;
    let mut out = BufWriter::new(file);
    let estimator = Estimator::new(backend, config.model.clone(), config.method_config.clone())?;
    let mut outcome = RunOutcome {
        resumed: lines.len(),
        ..Default::default()
    };
    score_questions(&estimator, &todo, config.concurrency, |line| {
        out.write_all(line.to_json_line()?.as_bytes())?;
        out.flush()?;
        if line.is_failed() {
            outcome.failed += 1;
        } else {
            outcome.scored += 1;
        }
        lines.push(line);
        Ok(())
    })?;
    outcome.lines = lines;
    let attempted = outcome.scored + outcome.failed;
    if outcome.failed * 2 > attempted {
        return Err(Error::RunAborted {
            failed: outcome.failed,
            attempted,
        });
    }
    Ok(outcome)
}
