//! Command-line front end: `train`, `eval`, `generate` and `check`.
//!
//! Exit codes: 0 success, 1 usage/parse/validation error, 2 numerical
//! failure, 3 failed self-check.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use thiserror::Error;

use crate::check::{run_suite, Fault, SuiteConfig};
use crate::corpus::{parse_corpus, parse_raw_documents, serialize_corpus, DepDocument};
use crate::elbo::ElboError;
use crate::inference::{estep_document, train, EStepConfig, InferenceError, TrainConfig};
use crate::model::{deserialize_model, serialize_model, Hyperparams};
use crate::oracle::{random_stochastic_matrix, sample_corpus};
use crate::rng::derive_seed;
use crate::special::exact_sum;

#[derive(Debug, Parser)]
#[command(
    name = "treestm",
    version,
    about = "Variational inference for a dependency-tree topic model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a corpus with variational EM.
    Train(TrainArgs),
    /// Per-word held-out bound of a corpus under a trained model.
    Eval(EvalArgs),
    /// Sample a synthetic corpus and its true topic assignments.
    Generate(GenerateArgs),
    /// Run the oracle self-verification suite.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct PriorArgs {
    /// Number of topics K.
    #[arg(long)]
    pub topics: usize,
    /// Document prior base measure: one value for all topics or a comma list of K values.
    #[arg(long, default_value = "1.0")]
    pub alpha_d: String,
    #[arg(long, default_value_t = 1.0)]
    pub beta_star: f64,
    /// Symmetric prior weight on transition rows.
    #[arg(long, default_value_t = 1.0)]
    pub alpha_t: f64,
}

#[derive(Debug, Args)]
pub struct EStepArgs {
    #[arg(long, default_value_t = 1e-6)]
    pub estep_tol: f64,
    #[arg(long, default_value_t = 50)]
    pub max_sweeps: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Where to write the fitted model.
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the per-iteration trace (CSV).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub prior: PriorArgs,
    #[arg(long, default_value_t = 200)]
    pub max_em_iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub em_tol: f64,
    #[command(flatten)]
    pub estep: EStepArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub estep: EStepArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub prior: PriorArgs,
    #[arg(long)]
    pub vocab: usize,
    #[arg(long)]
    pub docs: usize,
    #[arg(long)]
    pub mean_length: f64,
    /// Corpus output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Truth sidecar path; defaults to the corpus path with `.truth` appended.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InjectFault {
    PhiEntropySign,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Monte-Carlo samples per instance (accepts e.g. 1e6).
    #[arg(long, default_value = "1e6", value_parser = parse_count)]
    pub mc_samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_fault: Option<InjectFault>,
}

fn parse_count(s: &str) -> Result<u64, String> {
    let x: f64 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    if !(x >= 1.0 && x.fract() == 0.0 && x <= u64::MAX as f64) {
        return Err(format!("expected a positive integer, got {s}"));
    }
    Ok(x as u64)
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0} check(s) failed")]
    CheckFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Config(m) => CliError::Input(m),
            InferenceError::Elbo(ElboError::Contract(m)) => CliError::Input(m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn hyperparams(p: &PriorArgs) -> Result<Hyperparams<f64>, CliError> {
    let values = p
        .alpha_d
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::Input(format!("--alpha-d: cannot parse {:?}", p.alpha_d)))?;
    if p.topics == 0 {
        return Err(CliError::Input("--topics must be >= 1".into()));
    }
    let alpha_d = match values.len() {
        1 => vec![values[0]; p.topics],
        n if n == p.topics => values,
        n => {
            return Err(CliError::Input(format!(
                "--alpha-d has {n} values, expected 1 or {}",
                p.topics
            )))
        }
    };
    Hyperparams::new(alpha_d, p.beta_star, p.alpha_t).map_err(|e| CliError::Input(e.to_string()))
}

fn estep_config(a: &EStepArgs) -> EStepConfig {
    EStepConfig {
        max_sweeps: a.max_sweeps,
        tol: a.estep_tol,
        ..EStepConfig::default()
    }
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, CliError> {
    if threads == 0 {
        return Err(CliError::Input("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Input(e.to_string()))
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let corpus = parse_corpus(&read(&a.corpus)?).map_err(|e| CliError::Input(e.to_string()))?;
    let hyper = hyperparams(&a.prior)?;
    let cfg = TrainConfig {
        max_em_iters: a.max_em_iters,
        em_tol: a.em_tol,
        estep: estep_config(&a.estep),
        seed: a.seed,
        worker_count: a.threads,
        ..TrainConfig::default()
    };
    let (global, trace) = train(&corpus, &hyper, &cfg)?;
    write(&a.out, &serialize_model(&global, &hyper, corpus.vocabulary()))?;
    if let Some(path) = &a.trace {
        write(path, &trace.to_csv())?;
    }
    let elbo = trace.final_elbo().unwrap_or(f64::NAN);
    writeln!(
        out,
        "trained K={} on {} documents ({} tokens) in {} iterations; final ELBO {elbo:.17e}",
        hyper.num_topics(),
        corpus.len(),
        corpus.token_count(),
        trace.records.len()
    )
    .ok();
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (global, hyper, vocab) =
        deserialize_model::<f64>(&read(&a.model)?).map_err(|e| CliError::Input(e.to_string()))?;
    let raw = parse_raw_documents(&read(&a.corpus)?).map_err(|e| CliError::Input(e.to_string()))?;
    // tokens the model has never seen share one reserved id past the vocabulary
    let unknown = vocab.len();
    let docs = raw
        .into_iter()
        .enumerate()
        .map(|(d, r)| {
            let words = r.tokens.iter().map(|t| vocab.get(t).unwrap_or(unknown)).collect();
            DepDocument::new(words, r.parent).map_err(|v| {
                let msgs: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                CliError::Input(format!("document {}: {}", d + 1, msgs.join("; ")))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = estep_config(&a.estep);
    cfg.validate()?;
    let pool = thread_pool(a.threads)?;
    let totals = pool.install(|| {
        docs.par_iter()
            .enumerate()
            .map(|(d, doc)| {
                if doc.is_empty() {
                    return Ok(0.0);
                }
                let (_, elbo) = estep_document(doc, &global, &hyper, &cfg, derive_seed(a.seed, d as u64))?;
                if !elbo.total.is_finite() {
                    return Err(InferenceError::NonFinite {
                        term: format!("document {} bound", d + 1),
                    });
                }
                Ok(elbo.total)
            })
            .collect::<Result<Vec<f64>, InferenceError>>()
    })?;

    writeln!(out, "{:>6} {:>6} {:>24} {:>24}", "doc", "words", "bound", "per_word").ok();
    for (d, (doc, &total)) in docs.iter().zip(&totals).enumerate() {
        let per_word = if doc.is_empty() { 0.0 } else { total / doc.len() as f64 };
        writeln!(out, "{:>6} {:>6} {total:>24.15e} {per_word:>24.15e}", d + 1, doc.len()).ok();
    }
    let tokens: usize = docs.iter().map(DepDocument::len).sum();
    let mean = if tokens == 0 {
        0.0
    } else {
        exact_sum(totals.iter().copied()) / tokens as f64
    };
    writeln!(out, "mean per-word bound over {tokens} words: {mean:.15e}").ok();
    Ok(())
}

fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let hyper = hyperparams(&a.prior)?;
    if a.vocab == 0 || a.docs == 0 {
        return Err(CliError::Input("--vocab and --docs must be >= 1".into()));
    }
    let k = hyper.num_topics();
    let tau = random_stochastic_matrix(k, a.vocab, derive_seed(a.seed, u64::MAX));
    let pi = random_stochastic_matrix(k, k, derive_seed(a.seed, u64::MAX - 1));
    let synth =
        sample_corpus(&tau, &pi, &hyper, a.docs, a.mean_length, a.seed).map_err(|e| CliError::Input(e.to_string()))?;
    let truth = a.truth.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".truth");
        PathBuf::from(p)
    });
    write(&a.out, &serialize_corpus(&synth.corpus))?;
    write(&truth, &synth.truth_sidecar())?;
    writeln!(
        out,
        "docs {} tokens {} V {}",
        synth.corpus.len(),
        synth.corpus.token_count(),
        synth.corpus.vocab_size()
    )
    .ok();
    Ok(())
}

fn cmd_check(a: &CheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = SuiteConfig {
        mc_samples: a.mc_samples,
        seed: a.seed,
        fault: a.inject_fault.map(|InjectFault::PhiEntropySign| Fault::PhiEntropySign),
    };
    let results = run_suite(&cfg);
    for r in &results {
        writeln!(out, "{r}").ok();
    }
    match results.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        n => Err(CliError::CheckFailed(n)),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            write!(target, "{}", e.render()).ok();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Generate(a) => cmd_generate(a, out),
        Command::Check(a) => cmd_check(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            writeln!(err, "error: {e}").ok();
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(
            std::iter::once("treestm").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn parse_count_accepts_scientific() {
        assert_eq!(parse_count("1e6"), Ok(1_000_000));
        assert_eq!(parse_count("100"), Ok(100));
        assert!(parse_count("0").is_err());
        assert!(parse_count("2.5").is_err());
    }

    #[test]
    fn alpha_d_broadcast_and_list() {
        let p = |alpha: &str, k| PriorArgs {
            topics: k,
            alpha_d: alpha.into(),
            beta_star: 1.0,
            alpha_t: 1.0,
        };
        assert_eq!(hyperparams(&p("0.5", 3)).unwrap().alpha_d, vec![0.5; 3]);
        assert_eq!(hyperparams(&p("0.5,1,2", 3)).unwrap().alpha_d, vec![0.5, 1.0, 2.0]);
        assert!(hyperparams(&p("0.5,1", 3)).is_err());
        assert!(hyperparams(&p("x", 3)).is_err());
        assert!(hyperparams(&p("-1", 3)).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_args(&["train", "--topics", "2", "--out", "m"]).0, 1);
        assert_eq!(run_args(&["check", "--bogus"]).0, 1);
        assert_eq!(run_args(&["frobnicate"]).0, 1);
        assert_eq!(run_args(&[]).0, 1);
        assert_eq!(run_args(&["--help"]).0, 0);
    }
}
