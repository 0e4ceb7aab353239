mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use setemd::{ExtractionConfig, GradMode, KShotMethod, SolverKind, Strategy, WeightScheme};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "setemd", version, about = "Differentiable EMD between embedding sets")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Root seed; every command is deterministic given it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value = "simplex", value_parser = parse_solver)]
    pub solver: SolverKind,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "setemd-out")]
    pub out: PathBuf,
    /// Interior-point convergence tolerance.
    #[arg(long, global = true, default_value_t = 1e-9)]
    pub tol: f64,
    /// Print extra progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a transportation problem given as JSON {cost, supply, demand}.
    Solve {
        problem: PathBuf,
    },
    /// Compare analytic LP derivatives with finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic labelled collection.
    Gen(GenArgs),
    /// Evaluate few-shot episodes on a collection.
    Episodes(EpisodesArgs),
    /// Rank a gallery by EMD similarity and report P@1, RP and MAP@R.
    Retrieve(RetrieveArgs),
    /// Train a linear projection end to end through the EMD.
    Train(TrainArgs),
    /// Dump the optimal matching flows between two feature maps.
    Flows(FlowsArgs),
    /// Time the LP solvers on EMD-sized problems.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Instance {
    Random,
    Constant,
    Assignment,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Rows and columns of the generated instance.
    #[arg(long, default_value_t = 3)]
    pub size: usize,
    #[arg(long, default_value = "full", value_parser = parse_mode)]
    pub mode: GradMode,
    #[arg(long, value_enum, default_value_t = Instance::Random)]
    pub instance: Instance,
    /// Check this problem file instead of a generated instance.
    #[arg(long)]
    pub problem: Option<PathBuf>,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 20)]
    pub sets_per_class: usize,
    #[arg(long, default_value_t = 3)]
    pub height: usize,
    #[arg(long, default_value_t = 3)]
    pub width: usize,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    /// Distance between class means.
    #[arg(long, default_value_t = 8.0)]
    pub sep: f64,
    #[arg(long, default_value_t = 0.0)]
    pub background_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub background_scale: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ExtractArgs {
    #[arg(long, default_value = "fcn", value_parser = parse_strategy)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 3)]
    pub grid_rows: usize,
    #[arg(long, default_value_t = 3)]
    pub grid_cols: usize,
    #[arg(long, default_value_t = 9)]
    pub patches: usize,
    #[arg(long, default_value_t = 2.0)]
    pub context_enlarge: f64,
    /// Pyramid levels, e.g. `1,2,3`; replaces the strategy's nodes.
    #[arg(long, value_delimiter = ',')]
    pub pyramid: Vec<usize>,
    #[arg(long, default_value = "cross", value_parser = parse_weights)]
    pub weights: WeightScheme,
}

impl ExtractArgs {
    pub fn config(&self, seed: u64) -> ExtractionConfig {
        ExtractionConfig {
            strategy: self.strategy,
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            patch_count: self.patches,
            context_enlarge: self.context_enlarge,
            pyramid_levels: self.pyramid.clone(),
            rng_seed: seed,
            ..ExtractionConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct EpisodesArgs {
    /// Collection manifest (`label<TAB>path` per line).
    #[arg(long)]
    pub collection: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub n_way: usize,
    #[arg(long, default_value_t = 1)]
    pub k_shot: usize,
    /// Queries per class.
    #[arg(long, default_value_t = 15)]
    pub queries: usize,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value = "sfc", value_parser = parse_method)]
    pub method: KShotMethod,
    #[command(flatten)]
    pub extract: ExtractArgs,
    #[command(flatten)]
    pub sfc: SfcArgs,
}

#[derive(Debug, Args)]
pub struct SfcArgs {
    #[arg(long, default_value_t = 0.1)]
    pub sfc_lr: f64,
    #[arg(long, default_value_t = 100)]
    pub sfc_iterations: usize,
    #[arg(long, default_value_t = 5)]
    pub sfc_batch: usize,
    /// Initialize prototypes from all support nodes instead of node means.
    #[arg(long)]
    pub sfc_concat: bool,
    /// Softmax temperature for the SFC loss.
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Gallery manifest; also the query set unless `--queries` is given.
    #[arg(long)]
    pub collection: PathBuf,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[command(flatten)]
    pub extract: ExtractArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub collection: PathBuf,
    /// Held-out collection evaluated before and after training.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub validation_episodes: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub episodes_per_epoch: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    #[arg(long, default_value_t = 5)]
    pub n_way: usize,
    #[arg(long, default_value_t = 5)]
    pub queries: usize,
    #[arg(long)]
    pub out_channels: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub init_noise: f64,
    #[command(flatten)]
    pub extract: ExtractArgs,
}

#[derive(Debug, Args)]
pub struct FlowsArgs {
    /// Query feature map (`H x W x C` tensor file).
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub support: PathBuf,
    #[command(flatten)]
    pub extract: ExtractArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Spatial side lengths; side `s` gives `s*s` nodes.
    #[arg(long, value_delimiter = ',', default_value = "5")]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "256,2048")]
    pub dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "simplex,ipm", value_parser = parse_solver)]
    pub solvers: Vec<SolverKind>,
    #[arg(long, default_value_t = 7)]
    pub repeats: usize,
    /// Problems per timed sample.
    #[arg(long, default_value_t = 10)]
    pub batch: usize,
}

fn parse_solver(s: &str) -> Result<SolverKind, String> {
    s.parse()
}
fn parse_mode(s: &str) -> Result<GradMode, String> {
    s.parse()
}
fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}
fn parse_weights(s: &str) -> Result<WeightScheme, String> {
    s.parse()
}
fn parse_method(s: &str) -> Result<KShotMethod, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage errors are validation failures; exit code 2 is reserved
            // for numerical breakdowns
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

pub type CmdResult = Result<u8, CliError>;
