//! Experiment runner: config parsing, seed fan-out and result files.

mod config;
mod record;
mod runner;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{
    check_seeds, parse_config, parse_config_str, parse_seeds, resolve_data_path, ActivationName,
    ActiveSpec, ContinualSpec, DataSource, DatasetSpec, ExperimentKind, GeometrySpec, LearnerKind,
    MethodName, ModelSpec, ParsedConfig, PosteriorName, ProposalName, ResolvedConfig, RunConfig,
    SoapbubbleSpec, UnknownKey, DATA_DIR_ENV,
};
pub use record::{
    read_records, summarize, summarize_files, write_records, write_summary, ExperimentRecord,
    SummaryRow, RECORD_COLUMNS, SUMMARY_COLUMNS,
};
pub use runner::{collect_records, content_hash, run, RunReport};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "evalbench",
    version,
    about = "Desk-scale Bayesian deep learning benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sequential tasks with VCL, coresets and EWC.
    Continual(RunArgs),
    /// Learning curves under actively acquired training data.
    ActiveLearn(RunArgs),
    /// Risk estimation error of a fixed model from actively chosen test labels.
    ActiveTest(RunArgs),
    /// Estimator bias for a fixed model.
    BiasProbe(RunArgs),
    /// Split of the overall bias into its statistical and overfitting parts.
    OfbProbe(RunArgs),
    /// Product-matrix covariance, analytic against Monte Carlo.
    GeometryProbe(RunArgs),
    /// Norms of Gaussian and radial noise across dimensions.
    SoapbubbleProbe(RunArgs),
    /// Mean, std and standard error per group of result rows.
    Summarize {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; falls back to `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `0..k`, `a..=b` or a comma list; replaces `seeds` in the config.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Reject unknown config keys instead of warning.
    #[arg(long)]
    pub strict: bool,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn execute(kind: ExperimentKind, args: &RunArgs, err: &mut dyn Write) -> Result<RunReport, Error> {
    let parsed = parse_config(&args.config, args.strict)?;
    for u in &parsed.unknown {
        let _ = writeln!(err, "warning: {}: {u}", args.config.display());
    }
    let seeds = args.seeds.as_deref().map(parse_seeds).transpose()?;
    if args.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let dir = args
        .config
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let rc = parsed.config.resolve(kind, seeds, args.out.clone(), &dir)?;
    run(&rc, &args.config, &parsed.text, args.jobs)
}

/// Runs the command line and returns the process exit code.
pub fn main_with(
    argv: impl IntoIterator<Item = impl Into<std::ffi::OsString> + Clone>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
            } else {
                let _ = write!(out, "{}", e.render());
            }
            return code;
        }
    };
    let (kind, args) = match &cli.command {
        Command::Summarize { csv } => {
            return match summarize_files(csv).and_then(|rows| write_summary(&rows, &mut *out)) {
                Ok(()) => EXIT_OK,
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    match e {
                        Error::Parse { .. } => EXIT_CONFIG,
                        _ => EXIT_RUNTIME,
                    }
                }
            };
        }
        Command::Continual(a) => (ExperimentKind::Continual, a),
        Command::ActiveLearn(a) => (ExperimentKind::ActiveLearn, a),
        Command::ActiveTest(a) => (ExperimentKind::ActiveTest, a),
        Command::BiasProbe(a) => (ExperimentKind::BiasProbe, a),
        Command::OfbProbe(a) => (ExperimentKind::OfbProbe, a),
        Command::GeometryProbe(a) => (ExperimentKind::GeometryProbe, a),
        Command::SoapbubbleProbe(a) => (ExperimentKind::SoapbubbleProbe, a),
    };
    match execute(kind, args, err) {
        Ok(r) => {
            let _ = writeln!(out, "wrote {} rows to {}", r.rows, r.csv.display());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
