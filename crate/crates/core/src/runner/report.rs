//! Turning records files into summaries, curve tables, sweeps and the
//! conditioned-explanation study.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{existing_lines, to_record, RecordLine, RunConfig};
use crate::error::{Error, Result};
use crate::methods::{Estimator, StudyOutcome, StudyRow};
use crate::metrics::{self, CurvePoint, EvalOptions, EvalSummary, Scored};
use crate::types::PredictionRecord;

/// Scored records of a records file plus the number of failed lines.
pub fn load_records(path: impl AsRef<Path>) -> Result<(Vec<PredictionRecord>, usize)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::InvalidInput(format!("no records file at {}", path.display())));
    }
    let mut failed = 0;
    let mut records = Vec::new();
    for line in existing_lines(path)? {
        match line {
            RecordLine::Scored(r) => records.push(r),
            RecordLine::Failed(_) => failed += 1,
        }
    }
    Ok((records, failed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub summary: EvalSummary,
    /// Failed lines left out of every metric.
    pub failed: usize,
}

fn report(records: &[PredictionRecord], failed: usize, opts: &EvalOptions) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput(format!("no usable records ({failed} failed)")));
    }
    Ok(EvalReport {
        summary: metrics::summarize(records, opts)?,
        failed,
    })
}

pub fn evaluate(records_path: impl AsRef<Path>, opts: &EvalOptions) -> Result<EvalReport> {
    let (records, failed) = load_records(records_path)?;
    report(&records, failed, opts)
}

/// Pretty JSON with a trailing newline.
pub fn write_summary<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurveFiles {
    pub risk_coverage: PathBuf,
    pub roc: PathBuf,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(prefix.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

fn curve_csv(header: [&str; 2], points: &[CurvePoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for p in points {
        w.write_record([p.x.to_string(), p.y.to_string()]).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes `{prefix}.rc.csv` (`coverage,accuracy`) and `{prefix}.roc.csv`
/// (`fpr,tpr`). Tied confidences get one draw of `N(0, σ²)` noise from
/// `seed` first. Nothing is written if either curve fails.
pub fn emit_curves(records_path: impl AsRef<Path>, out_prefix: impl AsRef<Path>, sigma: f64, seed: u64) -> Result<CurveFiles> {
    let (records, _) = load_records(records_path)?;
    if records.is_empty() {
        return Err(Error::InvalidInput("no usable records".into()));
    }
    let mut scored: Vec<(f64, bool)> = records.iter().map(|r| (r.confidence(), r.correct())).collect();
    let mut sorted: Vec<f64> = scored.iter().map(|s| s.0).collect();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut scored {
            s.0 += normal.sample(&mut rng);
        }
    }
    let rc = curve_csv(["coverage", "accuracy"], &metrics::risk_coverage_points(&scored)?)?;
    let roc = curve_csv(["fpr", "tpr"], &metrics::roc_points(&scored)?)?;
    let prefix = out_prefix.as_ref();
    let files = CurveFiles {
        risk_coverage: with_suffix(prefix, ".rc.csv"),
        roc: with_suffix(prefix, ".roc.csv"),
    };
    fs::write(&files.risk_coverage, rc)?;
    fs::write(&files.roc, roc)?;
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_samples: usize,
    pub report: EvalReport,
}

/// Re-scores the dataset from the response cache alone, keeping only the
/// first `n` samples per question for each `n` in `sizes`. Rows are written
/// to `out_csv` when given.
pub fn sweep_samples(config: &RunConfig, sizes: &[usize], opts: &EvalOptions, out_csv: Option<&Path>) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let cached = config.method_config.n_samples;
    if sizes.is_empty() {
        return Err(Error::InvalidInput("no sample sizes given".into()));
    }
    if let Some(&bad) = sizes.iter().find(|&&n| n == 0 || n > cached) {
        return Err(Error::InvalidInput(format!(
            "sample size {bad} is outside 1..={cached}; the cache holds {cached} samples per question"
        )));
    }
    let questions = config.questions()?;
    let backend = config.build_backend(true)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut method = config.method_config.clone();
        method.n_samples = n;
        let estimator = Estimator::new(backend.clone(), config.model.clone(), method)?;
        let name = estimator.config().method.as_str();
        let (mut records, mut failed) = (Vec::new(), 0);
        for q in &questions {
            match estimator.estimate(q) {
                Ok(r) => records.push(to_record(q, name, &r)?),
                Err(Error::CacheMiss(key)) => {
                    return Err(Error::InvalidInput(format!(
                        "question {} with {n} samples needs a completion that is not cached (key {key}); \
                         run `score` with at least that many samples first",
                        q.id
                    )))
                }
                Err(_) => failed += 1,
            }
        }
        rows.push(SweepRow {
            n_samples: n,
            report: report(&records, failed, opts)?,
        });
    }
    if let Some(path) = out_csv {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["n_samples", "n", "failed", "accuracy", "ece", "aurc", "auroc"])
            .map_err(csv_err)?;
        for row in &rows {
            let s = &row.report.summary;
            w.write_record([
                row.n_samples.to_string(),
                s.n.to_string(),
                row.report.failed.to_string(),
                s.accuracy.to_string(),
                s.ece.to_string(),
                s.aurc.to_string(),
                s.auroc.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionStats {
    pub n: usize,
    pub mean_loglik: Option<f64>,
    pub mean_entail_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub correct: ConditionStats,
    pub incorrect: ConditionStats,
    pub skipped: usize,
    pub errors: Vec<String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn study_summary(outcome: &StudyOutcome) -> StudySummary {
    let stats = |correct: bool| {
        let rows: Vec<&StudyRow> = outcome.rows.iter().filter(|r| r.conditioned_correct == correct).collect();
        ConditionStats {
            n: rows.len(),
            mean_loglik: mean(rows.iter().map(|r| r.loglik)),
            mean_entail_prob: mean(rows.iter().map(|r| r.entail_prob)),
        }
    };
    StudySummary {
        correct: stats(true),
        incorrect: stats(false),
        skipped: outcome.skipped,
        errors: outcome.errors.clone(),
    }
}

/// Runs the conditioned-explanation study, writing
/// `question_id,conditioned_correct,loglik,entail_prob` rows to `out_csv`
/// and per-condition means to `<out_csv stem>.summary.json`.
pub fn study(config: &RunConfig, out_csv: impl AsRef<Path>) -> Result<StudySummary> {
    config.validate()?;
    let questions = config.questions()?;
    let estimator = Estimator::new(config.build_backend(false)?, config.model.clone(), config.method_config.clone())?;
    let outcome = estimator.explanation_study(&questions, config.seed)?;
    let out_csv = out_csv.as_ref();
    let mut w = csv::Writer::from_path(out_csv).map_err(csv_err)?;
    w.write_record(["question_id", "conditioned_correct", "loglik", "entail_prob"])
        .map_err(csv_err)?;
    for r in &outcome.rows {
        w.write_record([
            r.question_id.clone(),
            r.conditioned_correct.to_string(),
            r.loglik.to_string(),
            r.entail_prob.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let summary = study_summary(&outcome);
    write_summary(&summary, out_csv.with_extension("summary.json"))?;
    Ok(summary)
}
