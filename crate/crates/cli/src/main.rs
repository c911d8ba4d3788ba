//! `jomi`: selection-conditional conformal prediction from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 assertion failure, 3 data error.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use jomi::harness::oracle::{permutation_invariance_check, reference_mismatches};
use jomi::harness::rng::{stream, Role};
use jomi::harness::runner::{evaluate_split, run_trials, TrialRecord};
use jomi::io::{read_dataset, write_predictions};
use jomi::pipeline::Method;
use jomi::report::{detail_rows, write_detail, Check, ResultDocument, Status};
use jomi::{Dataset, JomiError};
use rand::Rng;

use config::{RunConfig, Source};

#[derive(Parser)]
#[command(
    name = "jomi",
    version,
    about = "Selection-conditional conformal prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build sets for the selected units of one calibration/test split.
    Predict(Args),
    /// Run a Monte Carlo experiment (or score one labelled split) and write a
    /// result document.
    Evaluate(Args),
    /// Compare specialized reference sets with brute-force recomputation.
    OracleCheck(Args),
}

/// Flags mirror the keys of the JSON configuration and override it.
#[derive(clap::Args, Debug, Default)]
pub struct Args {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// vanilla, jomi, jomi_rand or ps; repeatable.
    #[arg(long)]
    pub method: Vec<Method>,
    /// Rule as JSON, e.g. '{"kind":"top_k","k":10}'.
    #[arg(long)]
    pub rule: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// `all`, `size_of_selection`, or JSON.
    #[arg(long)]
    pub taxonomy: Option<String>,
    /// Second-stage score family.
    #[arg(long)]
    pub family: Option<String>,
    /// Repeatable.
    #[arg(long)]
    pub alpha: Vec<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Data generating process as JSON.
    #[arg(long)]
    pub dgp: Option<String>,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub detail: Option<PathBuf>,
    #[arg(long)]
    pub oracle_instances: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long, env = "JOMI_THREADS")]
    pub threads: Option<usize>,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

fn data(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 3,
        error: error.into(),
    }
}

type Outcome = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let start = Instant::now();
    let result = match &cli.command {
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::OracleCheck(a) => oracle_check(a),
    };
    match result {
        Ok(code) => {
            eprintln!("finished in {:.2}s", start.elapsed().as_secs_f64());
            ExitCode::from(code)
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load(args: &Args) -> Result<RunConfig, Failure> {
    RunConfig::load(args).map_err(usage)
}

/// Loads input files; rule parameters that only fail against the data's
/// sizes count as usage errors.
fn load_files(cfg: &RunConfig, calib: &Path, test: &Path) -> Result<Dataset, Failure> {
    let d = read_dataset(calib, test).map_err(data)?;
    cfg.rule.validate(d.n(), d.m()).map_err(usage)?;
    Ok(d)
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, bytes)
            .map_err(|e| data(anyhow::anyhow!("cannot write {}: {e}", p.display()))),
        None => std::io::stdout().write_all(bytes).map_err(data),
    }
}

fn uniforms(seed: u64, m: usize) -> Vec<f64> {
    let mut rng = stream(seed, 0, Role::Uniform);
    (0..m).map(|_| rng.random()).collect()
}

fn predict(args: &Args) -> Outcome {
    let cfg = load(args)?;
    let Source::Files { calib, test } = cfg.source().map_err(usage)? else {
        return Err(usage(anyhow::anyhow!(
            "predict reads `calib` and `test` files"
        )));
    };
    let ([method], [alpha]) = (cfg.methods.as_slice(), cfg.alphas.as_slice()) else {
        return Err(usage(anyhow::anyhow!(
            "predict takes exactly one method and one alpha"
        )));
    };
    let d = load_files(&cfg, calib, test)?;
    let rows = cfg
        .pipeline()
        .predict(*method, *alpha, &d, &uniforms(cfg.master_seed, d.m()))
        .map_err(data)?;
    let mut out = Vec::new();
    write_predictions(&mut out, &rows).map_err(data)?;
    write_output(cfg.output.as_deref(), &out)?;
    Ok(0)
}

fn records(cfg: &RunConfig, threads: Option<usize>) -> Result<Vec<TrialRecord>, Failure> {
    match cfg.source().map_err(usage)? {
        Source::Dgp { dgp, n, m } => {
            run_trials(&cfg.experiment(dgp, n, m), threads).map_err(|e| match e {
                JomiError::InvalidParameter(_) | JomiError::BetaTooSmall { .. } => usage(e),
                e => data(e),
            })
        }
        Source::Files { calib, test } => {
            if cfg.trials == 0 {
                return Ok(Vec::new());
            }
            let d = load_files(cfg, calib, test)?;
            let rec = evaluate_split(
                &cfg.pipeline(),
                &cfg.methods,
                &cfg.alphas,
                &d,
                &uniforms(cfg.master_seed, d.m()),
                false,
            )
            .map_err(data)?;
            Ok(vec![rec])
        }
    }
}

fn finish(cfg: &RunConfig, doc: &ResultDocument) -> Outcome {
    write_output(cfg.output.as_deref(), doc.to_json().as_bytes())?;
    for c in doc.checks.iter().filter(|c| !c.passed) {
        eprintln!("check failed: {} ({})", c.name, c.detail);
    }
    Ok(if doc.passed() { 0 } else { 2 })
}

fn evaluate(args: &Args) -> Outcome {
    let cfg = load(args)?;
    let recs = records(&cfg, args.threads)?;
    if let Some(path) = &cfg.detail {
        let mut out = Vec::new();
        write_detail(&mut out, &detail_rows(&recs)).map_err(data)?;
        write_output(Some(path), &out)?;
    }
    let echo = serde_json::to_value(&cfg).map_err(usage)?;
    let doc = ResultDocument::new("evaluate", echo).with_records(&recs, &cfg.assertions);
    finish(&cfg, &doc)
}

/// Largest sizes `oracle-check` accepts.
const DESK_N: usize = 200;
const DESK_M: usize = 20;

fn oracle_check(args: &Args) -> Outcome {
    let cfg = load(args)?;
    let pipeline = cfg.pipeline();
    let rule = cfg.rule.build();
    let datasets: Vec<Dataset> = match cfg.source().map_err(usage)? {
        Source::Dgp { dgp, n, m } => {
            if n > DESK_N || m > DESK_M {
                return Err(usage(anyhow::anyhow!(
                    "oracle-check is limited to n <= {DESK_N} and m <= {DESK_M}"
                )));
            }
            (0..cfg.oracle_instances as u64)
                .map(|t| dgp.generate(n, m, cfg.master_seed, t).map(|g| g.data))
                .collect::<jomi::Result<_>>()
                .map_err(data)?
        }
        Source::Files { calib, test } => vec![load_files(&cfg, calib, test)?],
    };
    let echo = serde_json::to_value(&cfg).map_err(usage)?;
    let mut doc = ResultDocument::new("oracle-check", echo);
    doc.trials = datasets.len();
    if datasets.is_empty() {
        doc.status = Status::NoTrials;
        return finish(&cfg, &doc);
    }
    let (mut compared, mut mismatches, mut variant) = (0, 0, 0);
    for (t, d) in datasets.iter().enumerate() {
        pipeline.validate(d).map_err(data)?;
        let (c, x) = reference_mismatches(&pipeline, d).map_err(data)?;
        compared += c;
        mismatches += x;
        let mut rng = stream(cfg.master_seed, t as u64, Role::Selection);
        if !permutation_invariance_check(rule.as_ref(), d, 5, &mut rng).map_err(data)? {
            variant += 1;
        }
    }
    doc.checks = vec![
        Check {
            name: "reference_sets".into(),
            passed: mismatches == 0,
            detail: format!("{mismatches} mismatches in {compared} reference sets"),
        },
        Check {
            name: "permutation_invariance".into(),
            passed: variant == 0,
            detail: format!(
                "{variant} of {} instances changed under calibration shuffles",
                datasets.len()
            ),
        },
    ];
    let doc = doc.finish();
    finish(&cfg, &doc)
}
