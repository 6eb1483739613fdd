mod common;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use common::data;
use expconf::backend::{CachedBackend, FixtureEntry, MockBackend, ResponseCache};
use expconf::metrics::EvalOptions;
use expconf::runner::{
    emit_curves, evaluate, load_records, run, run_with_backend, study, sweep_samples, BackendKind, RunConfig,
};
use expconf::{Error, MethodConfig, MethodKind};

fn config(dir: &Path, method: MethodKind, out: &str) -> RunConfig {
    let mut c = RunConfig::new(data("sample.jsonl"), dir.join(out), MethodConfig::new(method));
    c.backend = BackendKind::Mock;
    c.fixture_path = Some(data("sample_fixture.jsonl"));
    c
}

fn fixture() -> Arc<MockBackend> {
    Arc::new(MockBackend::from_jsonl_file(data("sample_fixture.jsonl")).unwrap())
}

fn write_records(path: &Path, rows: &[(f64, bool)]) {
    let lines: String = rows
        .iter()
        .enumerate()
        .map(|(i, (r, c))| {
            format!(
                "{{\"question_id\":\"q{i}\",\"method\":\"token_prob\",\"predicted\":\"A\",\"confidence\":{r},\"correct\":{c},\"n_samples\":1,\"metadata\":{{}}}}\n"
            )
        })
        .collect();
    fs::write(path, lines).unwrap();
}

#[test]
fn mock_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = config(dir.path(), MethodKind::TokenProb, "a.jsonl");
    a.limit = Some(3);
    let mut b = a.clone();
    b.output_path = dir.path().join("b.jsonl");
    b.concurrency = 1;
    assert_eq!(run(&a).unwrap().records().len(), 3);
    run(&b).unwrap();
    let bytes = fs::read(&a.output_path).unwrap();
    assert_eq!(bytes, fs::read(&b.output_path).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 3);
}

#[test]
fn resume_scores_only_missing_questions() {
    let dir = tempfile::tempdir().unwrap();
    let mut full = config(dir.path(), MethodKind::CotConsistency, "full.jsonl");
    full.limit = Some(3);
    run(&full).unwrap();

    let mut part = full.clone();
    part.output_path = dir.path().join("part.jsonl");
    part.limit = Some(2);
    run(&part).unwrap();
    part.limit = Some(3);
    let mock = fixture();
    let outcome = run_with_backend(&part, mock.clone()).unwrap();
    assert_eq!((outcome.resumed, outcome.scored), (2, 1));
    assert_eq!(mock.calls(), 5);
    assert_eq!(fs::read(&full.output_path).unwrap(), fs::read(&part.output_path).unwrap());
}

#[test]
fn stability_call_accounting_and_cache_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), MethodKind::Stability, "s.jsonl");
    cfg.limit = Some(1);
    let mock = fixture();
    let cache = || ResponseCache::open(dir.path().join("cache")).unwrap();

    let cold = CachedBackend::new(mock.clone(), cache());
    run_with_backend(&cfg, &cold).unwrap();
    let kinds = |needle: &str| mock.requests().iter().filter(|r| r.prompt_text().contains(needle)).count();
    assert_eq!(kinds("First explain"), 5);
    assert_eq!(kinds("Hypothesis:"), 5);
    assert_eq!(kinds("Using the explanation above"), 5);
    assert_eq!(mock.calls(), 15);

    cfg.output_path = dir.path().join("s2.jsonl");
    let warm = CachedBackend::new(mock.clone(), cache());
    run_with_backend(&cfg, &warm).unwrap();
    assert_eq!(mock.calls(), 15);
    assert_eq!(warm.hits(), 15);
    assert_eq!(
        fs::read(dir.path().join("s.jsonl")).unwrap(),
        fs::read(dir.path().join("s2.jsonl")).unwrap()
    );
}

#[test]
fn failures_are_recorded_and_can_abort() {
    let dir = tempfile::tempdir().unwrap();
    let fixture_path = dir.path().join("partial.jsonl");
    // Only the first question's token-probability prompt is scripted.
    let entry = FixtureEntry::new("(D) Mercury\nRespond", "B").with_position(&[("B", -0.1), ("A", -2.5)]);
    fs::write(&fixture_path, serde_json::to_string(&entry).unwrap() + "\n").unwrap();
    let mut cfg = config(dir.path(), MethodKind::TokenProb, "r.jsonl");
    cfg.fixture_path = Some(fixture_path);
    cfg.limit = Some(2);
    let outcome = run(&cfg).unwrap();
    assert_eq!((outcome.scored, outcome.failed), (1, 1));
    let text = fs::read_to_string(&cfg.output_path).unwrap();
    assert!(text.lines().nth(1).unwrap().contains("\"failed\":true"));

    let report = evaluate(&cfg.output_path, &EvalOptions::default()).unwrap();
    assert_eq!((report.summary.n, report.failed), (1, 1));

    cfg.output_path = dir.path().join("r3.jsonl");
    cfg.limit = Some(3);
    assert!(matches!(run(&cfg), Err(Error::RunAborted { failed: 2, attempted: 3 })));
    assert_eq!(load_records(&cfg.output_path).unwrap(), (load_records(dir.path().join("r.jsonl")).unwrap().0, 2));
}

#[test]
fn evaluate_examples() {
    let dir = tempfile::tempdir().unwrap();
    let perfect = dir.path().join("perfect.jsonl");
    write_records(&perfect, &[(1.0, true), (1.0, true), (1.0, true)]);
    let s = evaluate(&perfect, &EvalOptions::default()).unwrap().summary;
    assert_eq!((s.accuracy, s.ece, s.aurc, s.auroc), (1.0, 0.0, 1.0, None));

    let four = dir.path().join("four.jsonl");
    write_records(&four, &[(0.95, true), (0.85, true), (0.65, false), (0.30, false)]);
    let opts = EvalOptions {
        seed: 17,
        ..EvalOptions::default()
    };
    let a = evaluate(&four, &opts).unwrap();
    assert!((a.summary.ece - 0.2875).abs() < 1e-12);
    assert_eq!(a, evaluate(&four, &opts).unwrap());

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert!(matches!(evaluate(&empty, &opts), Err(Error::InvalidInput(_))));
}

fn csv_rows(path: &Path) -> Vec<(f64, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (x, y) = l.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect()
}

#[test]
fn curve_files() {
    let dir = tempfile::tempdir().unwrap();
    let recs = dir.path().join("r.jsonl");
    write_records(&recs, &[(0.9, true), (0.8, true), (0.7, false)]);
    let files = emit_curves(&recs, dir.path().join("c"), 1e-6, 0).unwrap();
    assert!(fs::read_to_string(&files.risk_coverage).unwrap().starts_with("coverage,accuracy\n"));
    assert!(fs::read_to_string(&files.roc).unwrap().starts_with("fpr,tpr\n"));
    let want = [(1.0 / 3.0, 1.0), (2.0 / 3.0, 1.0), (1.0, 2.0 / 3.0)];
    for ((x, y), (wx, wy)) in csv_rows(&files.risk_coverage).into_iter().zip(want) {
        assert!((x - wx).abs() < 1e-4 && (y - wy).abs() < 1e-4);
    }

    write_records(&recs, &[(0.9, true), (0.2, false)]);
    let files = emit_curves(&recs, dir.path().join("sep"), 1e-6, 0).unwrap();
    assert_eq!(csv_rows(&files.roc), vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);

    fs::write(&recs, "").unwrap();
    assert!(emit_curves(&recs, dir.path().join("none"), 1e-6, 0).is_err());
    assert!(!dir.path().join("none.rc.csv").exists());
    assert!(!dir.path().join("none.roc.csv").exists());
}

#[test]
fn tied_confidences_get_one_noise_draw() {
    let dir = tempfile::tempdir().unwrap();
    let recs = dir.path().join("r.jsonl");
    write_records(&recs, &[(0.5, true), (0.5, false), (0.5, true)]);
    let a = emit_curves(&recs, dir.path().join("a"), 1e-6, 9).unwrap();
    let b = emit_curves(&recs, dir.path().join("b"), 1e-6, 9).unwrap();
    assert_eq!(fs::read(&a.roc).unwrap(), fs::read(&b.roc).unwrap());
    assert_eq!(csv_rows(&a.roc).len(), 4);
}

#[test]
fn sweep_reuses_cache() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), MethodKind::Stability, "s.jsonl");
    cfg.cache_dir = Some(dir.path().join("cache"));
    cfg.limit = Some(4);
    run(&cfg).unwrap();

    let csv = dir.path().join("sweep.csv");
    let opts = EvalOptions::default();
    let rows = sweep_samples(&cfg, &[1, 3, 5], &opts, Some(&csv)).unwrap();
    assert_eq!(rows.iter().map(|r| r.n_samples).collect::<Vec<_>>(), [1, 3, 5]);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("n_samples,n,failed,accuracy,ece,aurc,auroc\n"));
    assert_eq!(text.lines().count(), 4);
    assert_eq!(rows[2].report, evaluate(&cfg.output_path, &opts).unwrap());

    assert!(matches!(sweep_samples(&cfg, &[7], &opts, None), Err(Error::InvalidInput(_))));

    // A fresh single-sample run with its own cache lands on the same summary.
    let mut fresh = cfg.clone();
    fresh.method_config.n_samples = 1;
    fresh.cache_dir = Some(dir.path().join("fresh_cache"));
    fresh.output_path = dir.path().join("fresh.jsonl");
    run(&fresh).unwrap();
    assert_eq!(rows[0].report, evaluate(&fresh.output_path, &opts).unwrap());
}

#[test]
fn sweep_reports_uncached_samples() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), MethodKind::Stability, "s.jsonl");
    cfg.cache_dir = Some(dir.path().join("cache"));
    cfg.limit = Some(2);
    cfg.method_config.n_samples = 2;
    run(&cfg).unwrap();
    cfg.method_config.n_samples = 5;
    match sweep_samples(&cfg, &[3], &EvalOptions::default(), None) {
        Err(Error::InvalidInput(msg)) => assert!(msg.contains("not cached"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn study_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), MethodKind::Stability, "unused");
    cfg.limit = Some(2);
    let csv = dir.path().join("study.csv");
    let summary = study(&cfg, &csv).unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("question_id,conditioned_correct,loglik,entail_prob\n"));
    assert_eq!(text.lines().count(), 5);
    assert!((summary.incorrect.mean_entail_prob.unwrap() - 0.2).abs() < 1e-6);
    assert!((summary.correct.mean_entail_prob.unwrap() - 0.85).abs() < 1e-6);
    assert!(dir.path().join("study.summary.json").exists());
}

#[test]
fn study_with_constant_logprobs() {
    let dir = tempfile::tempdir().unwrap();
    let fixture_path = dir.path().join("flat.jsonl");
    let entries = [
        FixtureEntry::new("The correct answer is", "Flat text.")
            .with_position(&[("Flat", -1.0)])
            .with_position(&[(" text", -1.0)]),
        FixtureEntry::new("Hypothesis:", "True").with_position(&[("True", -0.5), ("False", -1.5)]),
    ];
    let body: String = entries.iter().map(|e| serde_json::to_string(e).unwrap() + "\n").collect();
    fs::write(&fixture_path, body).unwrap();
    let mut cfg = config(dir.path(), MethodKind::Stability, "unused");
    cfg.fixture_path = Some(fixture_path);
    let s = study(&cfg, dir.path().join("flat.csv")).unwrap();
    assert_eq!(s.correct.mean_loglik, s.incorrect.mean_loglik);
    assert_eq!(s.correct.mean_entail_prob, s.incorrect.mean_entail_prob);
    assert_eq!(s.correct.n, 12);
}
