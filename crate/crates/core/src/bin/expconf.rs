//! Command-line front end: `score`, `eval`, `curves`, `sweep`, `study`.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when the work
//! itself fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use expconf::metrics::{EvalOptions, DEFAULT_BINS, DEFAULT_NOISE_REPEATS, DEFAULT_NOISE_SIGMA};
use expconf::runner::{self, BackendKind, RunConfig, DEFAULT_CONCURRENCY, DEFAULT_LIMIT};
use expconf::{ExplanationPosition, MethodConfig, MethodKind, PlausibilityKind};

#[derive(Parser)]
#[command(name = "expconf", version, about = "Confidence estimation for multiple-choice LLM answers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a dataset with one method and append records to a JSON-lines file.
    Score {
        #[command(flatten)]
        run: RunArgs,
        /// Records file (JSON lines); existing records are kept and skipped.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a records file as JSON.
    Eval {
        #[arg(long)]
        records: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Summary path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write risk-coverage and ROC curve CSVs.
    Curves {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out_prefix: PathBuf,
        #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-evaluate with the first N cached samples for each N in --sizes.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        sizes: Vec<usize>,
        #[command(flatten)]
        eval: EvalArgs,
        /// Noise seed for evaluation; `--seed` is the run seed here.
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        /// CSV table of per-size metrics.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare explanations conditioned on correct and incorrect answers.
    Study {
        #[command(flatten)]
        run: RunArgs,
        /// CSV of rows; a `.summary.json` sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "stability")]
    method: MethodKind,
    #[arg(long, default_value = "openai_compatible")]
    backend: BackendKind,
    /// Fixture file for `--backend mock`.
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long, default_value = "gpt-4o-mini")]
    model: String,
    /// Explanations (or CoT samples) per question.
    #[arg(long, default_value_t = 5)]
    samples: usize,
    /// Guesses requested by top-k style prompts.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Sampling temperature for explanations.
    #[arg(long, default_value_t = 0.7)]
    temperature: f64,
    #[arg(long, default_value = "entailment")]
    plausibility: PlausibilityKind,
    #[arg(long, default_value = "pre")]
    position: ExplanationPosition,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_LIMIT)]
    limit: usize,
    /// Response cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CONCURRENCY)]
    concurrency: usize,
}

impl RunArgs {
    fn config(&self, out: PathBuf) -> RunConfig {
        let mut method = MethodConfig::new(self.method);
        method.n_samples = self.samples;
        method.k = self.k;
        method.temperature_explain = self.temperature;
        method.plausibility = self.plausibility;
        method.explanation_position = self.position;
        RunConfig {
            dataset_path: self.dataset.clone(),
            backend: self.backend,
            fixture_path: self.fixture.clone(),
            model: self.model.clone(),
            method_config: method,
            concurrency: self.concurrency,
            seed: self.seed,
            cache_dir: self.cache.clone(),
            output_path: out,
            limit: Some(self.limit),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
    noise_sigma: f64,
    #[arg(long, default_value_t = DEFAULT_NOISE_REPEATS)]
    noise_repeats: usize,
}

impl EvalArgs {
    fn options(&self, seed: u64) -> EvalOptions {
        EvalOptions {
            bins: self.bins,
            sigma: self.noise_sigma,
            repeats: self.noise_repeats,
            seed,
        }
    }
}

fn execute(command: Command) -> expconf::Result<()> {
    match command {
        Command::Score { run, out } => {
            let outcome = runner::run(&run.config(out.clone()))?;
            println!(
                "{}: {} scored, {} failed, {} already present",
                out.display(),
                outcome.scored,
                outcome.failed,
                outcome.resumed
            );
        }
        Command::Eval { records, eval, seed, out } => {
            let report = runner::evaluate(&records, &eval.options(seed))?;
            match out {
                Some(path) => runner::write_summary(&report, path)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Curves {
            records,
            out_prefix,
            noise_sigma,
            seed,
        } => {
            let files = runner::emit_curves(&records, &out_prefix, noise_sigma, seed)?;
            println!("{}\n{}", files.risk_coverage.display(), files.roc.display());
        }
        Command::Sweep {
            run,
            sizes,
            eval,
            eval_seed,
            out,
        } => {
            let config = run.config(PathBuf::new());
            let rows = runner::sweep_samples(&config, &sizes, &eval.options(eval_seed), Some(&out))?;
            println!("{}: {} rows", out.display(), rows.len());
        }
        Command::Study { run, out } => {
            let summary = runner::study(&run.config(PathBuf::new()), &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

/// Argument combinations clap cannot reject on its own.
fn check_usage(command: &Command) -> expconf::Result<()> {
    match command {
        Command::Score { run, .. } | Command::Sweep { run, .. } | Command::Study { run, .. } => {
            run.config(PathBuf::new()).validate()?;
            if run.backend == BackendKind::Mock && run.fixture.is_none() {
                return Err(expconf::Error::InvalidInput("--backend mock needs --fixture".into()));
            }
            Ok(())
        }
        Command::Eval { eval, .. } if eval.bins == 0 || eval.noise_repeats == 0 => {
            Err(expconf::Error::InvalidInput("--bins and --noise-repeats must be at least 1".into()))
        }
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Err(e) = check_usage(&cli.command) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
