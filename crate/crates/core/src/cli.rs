//! Command-line front end.
//!
//! Exit codes: 0 success, 1 data or validation failure, 2 usage error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};

use crate::diff::DEFAULT_ALTERED_THRESHOLD;
use crate::metrics::Pooling;
use crate::pipeline::{self, AnalysisJob, DiffJob, FixtureJob, PipelineError};
use crate::stats::{KurtosisMode, LogBase, SummaryOptions};

pub const EXIT_OK: u8 = 0;
pub const EXIT_DATA: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

pub const DEFAULT_ROW_SUM_TOL: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(
    name = "concept-attn",
    version,
    about = "Concept-span attention analysis for transformer attention bundles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check bundles for row-stochastic, non-negative, properly masked attention.
    Validate(ValidateArgs),
    /// Concept proportions, deltas, distribution summaries and layer profiles.
    Analyze(AnalyzeArgs),
    /// Raw attention difference for one head, with heatmaps and top changes.
    Diff(DiffArgs),
    /// Write deterministic fixture bundles and their annotation file.
    Fixtures(FixturesArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PoolingArg {
    Pooled,
    PerQuery,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Pooled => Pooling::Pooled,
            PoolingArg::PerQuery => Pooling::PerQuery,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KurtosisArg {
    Plain,
    Excess,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EntropyBaseArg {
    #[value(name = "e")]
    E,
    #[value(name = "2")]
    Two,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Bundle directories.
    #[arg(required = true)]
    pub bundles: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ROW_SUM_TOL)]
    pub row_sum_tol: f64,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Base model bundle, or a directory holding one bundle per sequence.
    #[arg(long)]
    pub base: PathBuf,
    /// Trained model bundle(s); repeat for several models.
    #[arg(long, required = true)]
    pub trained: Vec<PathBuf>,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Only analyze these concept labels.
    #[arg(long = "concept")]
    pub concepts: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "pooled")]
    pub pooling: PoolingArg,
    #[arg(long, value_enum, default_value = "plain")]
    pub kurtosis: KurtosisArg,
    #[arg(long, value_enum, default_value = "e")]
    pub entropy_base: EntropyBaseArg,
    /// Fixed histogram bin count instead of Sturges' rule.
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_ROW_SUM_TOL)]
    pub row_sum_tol: f64,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub trained: PathBuf,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub head: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Minimum |delta| for a relation or concept fragment to count as changed.
    #[arg(long, default_value_t = DEFAULT_ALTERED_THRESHOLD)]
    pub threshold: f64,
    /// Annotation file; adds per-concept fragment reports.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ROW_SUM_TOL)]
    pub row_sum_tol: f64,
}

#[derive(Debug, Args)]
pub struct FixturesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 8)]
    pub head_dim: usize,
    /// Tokens per run (including the start token) for a single synthetic
    /// sequence instead of the bundled corpus.
    #[arg(long)]
    pub tokens: Option<usize>,
    /// Omit the start-of-sequence token.
    #[arg(long)]
    pub no_bos: bool,
    /// Logit boost applied to concept keys in the first trained variant.
    #[arg(long, default_value_t = 2.0)]
    pub boost: f64,
}

fn summary_options(args: &AnalyzeArgs) -> SummaryOptions {
    SummaryOptions {
        kurtosis_mode: match args.kurtosis {
            KurtosisArg::Plain => KurtosisMode::Plain,
            KurtosisArg::Excess => KurtosisMode::Excess,
        },
        log_base: match args.entropy_base {
            EntropyBaseArg::E => LogBase::Natural,
            EntropyBaseArg::Two => LogBase::Base2,
        },
        num_bins: args.bins,
    }
}

fn run_validate(args: &ValidateArgs) -> Result<u8, PipelineError> {
    let mut status = EXIT_OK;
    for bundle in &args.bundles {
        match pipeline::cmd_validate(bundle, args.row_sum_tol) {
            Ok(report) if report.is_empty() => info!("{}: ok", bundle.display()),
            Ok(report) => {
                status = EXIT_DATA;
                error!(
                    "{}: {} violations",
                    bundle.display(),
                    report.violations.len()
                );
                for v in &report.violations {
                    eprintln!("  {v}");
                }
            }
            Err(e) => {
                status = EXIT_DATA;
                error!("{}: {e}", bundle.display());
            }
        }
    }
    Ok(status)
}

fn dispatch(cli: Cli) -> Result<u8, PipelineError> {
    match cli.command {
        Command::Validate(args) => run_validate(&args),
        Command::Analyze(args) => {
            let job = AnalysisJob {
                base: args.base.clone(),
                trained: args.trained.clone(),
                annotations: args.annotations.clone(),
                concepts: args.concepts.clone(),
                out: args.out.clone(),
                pooling: args.pooling.into(),
                summary: summary_options(&args),
                row_sum_tolerance: args.row_sum_tol,
            };
            let out = pipeline::cmd_analyze(&job)?;
            info!(
                "{} summary records, {} files under {}",
                out.records.len(),
                out.files.len(),
                job.out.display()
            );
            Ok(EXIT_OK)
        }
        Command::Diff(args) => {
            let job = DiffJob {
                base: args.base,
                trained: args.trained,
                layer: args.layer,
                head: args.head,
                out: args.out,
                top_k: args.top_k,
                threshold: args.threshold,
                annotations: args.annotations,
                row_sum_tolerance: args.row_sum_tol,
            };
            let out = pipeline::cmd_diff(&job)?;
            info!(
                "{} relations changed by at least {}",
                out.significant.len(),
                job.threshold
            );
            Ok(EXIT_OK)
        }
        Command::Fixtures(args) => {
            let job = FixtureJob {
                out: args.out,
                num_layers: args.layers,
                num_heads: args.heads,
                head_dim: args.head_dim,
                seed: args.seed,
                tokens: args.tokens,
                bos: !args.no_bos,
                boost: args.boost,
            };
            pipeline::cmd_fixtures(&job)?;
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flag_values_parse() {
        let cli = Cli::try_parse_from([
            "concept-attn",
            "analyze",
            "--base",
            "b",
            "--trained",
            "t1",
            "--trained",
            "t2",
            "--annotations",
            "a.json",
            "--out",
            "o",
            "--pooling",
            "per-query",
            "--kurtosis",
            "excess",
            "--entropy-base",
            "2",
        ])
        .unwrap();
        let Command::Analyze(args) = cli.command else {
            panic!("wrong subcommand")
        };
        assert_eq!(args.trained.len(), 2);
        assert_eq!(Pooling::from(args.pooling), Pooling::PerQuery);
        let opts = summary_options(&args);
        assert_eq!(opts.kurtosis_mode, KurtosisMode::Excess);
        assert_eq!(opts.log_base, LogBase::Base2);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["concept-attn", "analyze", "--base", "x"]), EXIT_USAGE);
        assert_eq!(run(["concept-attn", "bogus"]), EXIT_USAGE);
        assert_eq!(
            run([
                "concept-attn",
                "fixtures",
                "--out",
                "/nonexistent",
                "--layers",
                "0"
            ]),
            EXIT_USAGE
        );
    }
}
