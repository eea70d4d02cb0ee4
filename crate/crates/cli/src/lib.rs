//! Command-line pipeline: config loading, the experiment commands and the
//! output manifest.

pub mod artifacts;
pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use suscept::corpus::{write_corpus, BigramSource, InductionPlant};
use suscept::model::{init_model, save_checkpoint, ModelConfig};
use suscept::oracle::{default_scenarios, load_scenarios, run_scenarios, Mutation};
use thiserror::Error;

use crate::artifacts::write_json;
use crate::config::{load_config, ConfigError};
use crate::pipeline::{load_inputs, CommandSummary, Inputs};

/// Exit status 2: the config or an input it names is unusable.
/// Exit status 1: anything else, including cells that failed to compute.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{failed} of {total} cells failed")]
    CellsFailed { failed: usize, total: usize },
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "suscept", version, about = "Susceptibility experiments on small attention-only transformers")]
pub struct Cli {
    /// Worker threads; all cores when unset.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set sgld.n_draws=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check corpora and write bigram and pattern statistics.
    Ingest(ConfigArgs),
    /// Susceptibility grid over checkpoints, probes and components.
    Estimate(ConfigArgs),
    /// Per-token susceptibilities over sampled probe contexts.
    PerToken(ConfigArgs),
    /// PCA of the response matrix with pattern profiles.
    Pca(ConfigArgs),
    /// Joint PCA across checkpoints.
    Trajectory(ConfigArgs),
    /// HTML heatmaps of per-token susceptibilities.
    Report(ConfigArgs),
    /// ingest, estimate, per-token, pca and report; trajectory too with several checkpoints.
    Run(ConfigArgs),
    /// Estimators against closed-form Gaussian answers.
    OracleCheck {
        /// Scenario JSON; the bundled set when absent.
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// Negate the estimated susceptibility; the check must then fail.
        #[arg(long)]
        flip_sign: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus.
    #[command(subcommand)]
    Synth(Synth),
    /// Write a freshly initialized checkpoint.
    InitModel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        context_len: usize,
        #[arg(long)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 0.02)]
        init_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct SynthCommon {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "synthetic")]
    pub id: String,
    #[arg(long)]
    pub vocab: usize,
    /// Defaults to the last vocabulary entry.
    #[arg(long)]
    pub bos: Option<u32>,
    /// First token id emitted; ids below it are never generated.
    #[arg(long, default_value_t = 0)]
    pub first_token: u32,
    #[arg(long)]
    pub sequences: usize,
    #[arg(long)]
    pub length: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Synth {
    Bigram {
        #[command(flatten)]
        common: SynthCommon,
        #[arg(long, default_value_t = 4)]
        fanout: usize,
        #[arg(long, default_value_t = 0.8)]
        concentration: f64,
        /// Seed of the successor table.
        #[arg(long, default_value_t = 0)]
        table_seed: u64,
    },
    Induction {
        #[command(flatten)]
        common: SynthCommon,
        #[arg(long, default_value_t = 0.1)]
        rate: f64,
    },
}

fn print_summary(s: &CommandSummary) {
    if s.cells > 0 {
        eprintln!("{}: {} cells, {} failed", s.command, s.cells, s.failures.len());
    } else {
        eprintln!("{}: done", s.command);
    }
    for f in &s.failures {
        eprintln!("  {}: {}", f.cell, f.error);
    }
}

fn checked(s: CommandSummary) -> Result<(), CliError> {
    print_summary(&s);
    if s.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::CellsFailed {
            failed: s.failures.len(),
            total: s.cells,
        })
    }
}

fn with_inputs(args: &ConfigArgs, f: impl FnOnce(&Inputs) -> Result<(), CliError>) -> Result<(), CliError> {
    let loaded = load_config(&args.config, &args.overrides)?;
    let inputs = load_inputs(&loaded)?;
    let result = f(&inputs);
    inputs.manifest()?;
    result
}

fn run_all(inp: &Inputs) -> Result<(), CliError> {
    checked(pipeline::cmd_ingest(inp)?)?;
    let grid = checked(pipeline::cmd_estimate(inp)?);
    checked(pipeline::cmd_per_token(inp)?)?;
    checked(pipeline::cmd_pca(inp)?)?;
    checked(pipeline::cmd_report(inp)?)?;
    if inp.config.checkpoints.len() > 1 && grid.is_ok() {
        checked(pipeline::cmd_trajectory(inp)?)?;
    }
    grid
}

fn synth_source(c: &SynthCommon) -> (u32, std::ops::Range<u32>) {
    let bos = c.bos.unwrap_or(c.vocab.saturating_sub(1) as u32);
    let end = if bos as usize + 1 == c.vocab { bos } else { c.vocab as u32 };
    (bos, c.first_token..end)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.into()))?;
    }
    match cli.command {
        Command::Ingest(a) => with_inputs(&a, |i| checked(pipeline::cmd_ingest(i)?)),
        Command::Estimate(a) => with_inputs(&a, |i| checked(pipeline::cmd_estimate(i)?)),
        Command::PerToken(a) => with_inputs(&a, |i| checked(pipeline::cmd_per_token(i)?)),
        Command::Pca(a) => with_inputs(&a, |i| checked(pipeline::cmd_pca(i)?)),
        Command::Trajectory(a) => with_inputs(&a, |i| checked(pipeline::cmd_trajectory(i)?)),
        Command::Report(a) => with_inputs(&a, |i| checked(pipeline::cmd_report(i)?)),
        Command::Run(a) => with_inputs(&a, run_all),
        Command::OracleCheck { fixture, flip_sign, out } => {
            let scenarios = match fixture {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| CliError::Config(format!("fixture {}: {e}", path.display())))?;
                    load_scenarios(&text).map_err(|e| CliError::Config(e.to_string()))?
                }
                None => default_scenarios(),
            };
            let mutation = if flip_sign { Mutation::FlipSusceptibilitySign } else { Mutation::None };
            let reports = run_scenarios(&scenarios, mutation).map_err(|e| CliError::Other(e.into()))?;
            let mut failed = 0;
            for r in &reports {
                for c in &r.checks {
                    let status = if c.passed { "PASS" } else { "FAIL" };
                    println!(
                        "[{status}] {}: {} expected {:.6e} measured {:.6e} tolerance {:.3e}",
                        r.name, c.quantity, c.expected, c.measured, c.tolerance
                    );
                    failed += usize::from(!c.passed);
                }
            }
            if let Some(path) = out {
                write_json(&path, &reports)?;
            }
            let total = reports.iter().map(|r| r.checks.len()).sum();
            if failed > 0 {
                return Err(CliError::CellsFailed { failed, total });
            }
            Ok(())
        }
        Command::Synth(s) => {
            let (common, corpus) = match &s {
                Synth::Bigram {
                    common,
                    fanout,
                    concentration,
                    table_seed,
                } => {
                    let (bos, tokens) = synth_source(common);
                    let src = BigramSource {
                        vocab_size: common.vocab,
                        bos,
                        tokens,
                        fanout: *fanout,
                        concentration: *concentration,
                        seed: *table_seed,
                    };
                    (common, src.generate(&common.id, common.sequences, common.length, common.seed))
                }
                Synth::Induction { common, rate } => {
                    let (bos, tokens) = synth_source(common);
                    let src = InductionPlant {
                        vocab_size: common.vocab,
                        bos,
                        tokens,
                        rate: *rate,
                    };
                    (common, src.generate(&common.id, common.sequences, common.length, common.seed).map(|(c, _)| c))
                }
            };
            let corpus = corpus.map_err(|e| CliError::Config(e.to_string()))?;
            write_corpus(&common.out, &corpus).map_err(|e| CliError::Other(e.into()))?;
            Ok(())
        }
        Command::InitModel {
            out,
            vocab,
            context_len,
            d_model,
            layers,
            heads,
            init_std,
            seed,
        } => {
            let cfg = ModelConfig {
                vocab_size: vocab,
                context_len,
                d_model,
                n_layers: layers,
                n_heads: heads,
                init_std,
                seed,
                ..ModelConfig::default()
            };
            let params = init_model(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
            save_checkpoint(&out, &cfg, &params).map_err(|e| CliError::Other(e.into()))?;
            Ok(())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    }
}
