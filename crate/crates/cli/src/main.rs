use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "databalance", version, about = "Streaming data balancing: fit, weigh, subsample and audit")]
struct Cli {
    /// Read flags from a `key = value` file; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit dual variables on a dataset and write a checkpoint.
    #[command(args_override_self = true)]
    Fit(FitArgs),
    /// Emit the weight of every record under a checkpoint.
    #[command(args_override_self = true)]
    Weigh(WeighArgs),
    /// Decide which records to keep and emit a decision log.
    #[command(args_override_self = true)]
    Subsample(SubsampleArgs),
    /// Measure representation and association bias before and after.
    #[command(args_override_self = true)]
    Audit(AuditArgs),
    /// Find the largest average weight whose constraints stay satisfiable.
    #[command(name = "search-eta", args_override_self = true)]
    SearchEta(SearchEtaArgs),
    /// Generate a synthetic dataset.
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Solve a small instance exactly.
    #[command(hide = true, args_override_self = true)]
    Oracle(OracleArgs),
}

#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    /// Line-delimited JSON records; `-` reads standard input.
    #[arg(long, default_value = "-")]
    pub input: PathBuf,
    /// Fail on the first malformed line instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SpecArgs {
    /// JSON problem file with `spec` and optional `groups` (see `synth --problem-out`).
    #[arg(long, value_name = "FILE")]
    pub problem: Option<PathBuf>,
    /// Target prevalence per attribute, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub pi: Option<Vec<f64>>,
    /// Attribute groups for default targets, e.g. `0,1;2-7`. Each attribute
    /// without an explicit target gets the median prevalence of its group.
    #[arg(long)]
    pub attr_groups: Option<String>,
    /// Association tolerance.
    #[arg(long)]
    pub eps_d: Option<f64>,
    /// Representation tolerance.
    #[arg(long)]
    pub eps_r: Option<f64>,
    /// Attributes whose association with labels is constrained, e.g. `0,1`.
    /// Defaults to all.
    #[arg(long)]
    pub assoc_attrs: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct HyperArgs {
    /// Average weight.
    #[arg(long, default_value_t = 0.9)]
    pub eta: f64,
    /// Maximum weight.
    #[arg(long, default_value_t = 1.0)]
    pub q_max: f64,
    /// Enforcement level on the bias constraints.
    #[arg(long = "v", default_value_t = 100.0)]
    pub v_level: f64,
    /// Base learning rate.
    #[arg(long, default_value_t = 0.1)]
    pub tau0: f64,
    /// `inverse_sqrt` or `constant`.
    #[arg(long, default_value = "inverse_sqrt")]
    pub schedule: databalance::Schedule,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Passes over the data.
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    /// Shuffle seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Visit records in file order instead of shuffling.
    #[arg(long)]
    pub in_order: bool,
    /// Continue from this checkpoint; its spec and hyperparameters are kept.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Write the moving-average dual loss as JSON lines.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub trace_every: u64,
    #[arg(long, default_value_t = 1000)]
    pub trace_window: usize,
}

#[derive(Args, Debug)]
pub struct WeighArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// Output file; standard output by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SubsampleArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// `bernoulli` or `top_q`.
    #[arg(long, default_value = "bernoulli")]
    pub mode: databalance::SampleMode,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction kept in top_q mode; defaults to eta / q_max.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Emit only kept records, in input format, instead of the decision log.
    #[arg(long)]
    pub kept_only: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    /// Records or a decision log. With a decision log the kept records form
    /// the "after" view.
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Weights file from `weigh`, used as the "after" view.
    #[arg(long, value_name = "FILE")]
    pub weights: Option<PathBuf>,
    /// Pair group `NAME:ATTRS:LABELS`, e.g. `gender x age:0,1:20-25`. Repeatable.
    #[arg(long = "group")]
    pub groups: Vec<String>,
    /// Also write the report as JSON.
    #[arg(long, value_name = "FILE")]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SearchEtaArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Candidate values, tried from largest to smallest.
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.95,0.9,0.85,0.8,0.75,0.7,0.6,0.5,0.4,0.3,0.2,0.1")]
    pub grid: Vec<f64>,
    /// Largest acceptable constraint residual, in reweighted-distribution units.
    #[arg(long, default_value_t = 0.01)]
    pub tol: f64,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// `demographics` or `pair`.
    #[arg(long, default_value = "demographics")]
    pub scenario: String,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Attribute prevalence (pair scenario).
    #[arg(long, default_value_t = 0.5)]
    pub p_s: f64,
    /// Label prevalence (pair scenario).
    #[arg(long, default_value_t = 0.5)]
    pub p_y: f64,
    /// Pearson correlation (pair scenario).
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    /// Log-normal utility spread; constant utility when absent.
    #[arg(long)]
    pub utility_sigma: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the scenario's balancing problem here.
    #[arg(long, value_name = "FILE")]
    pub problem_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Also write the optimal weights as JSON lines.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DATABALANCE_LOG", "warn")).init();

    let argv = match config::expand(std::env::args_os().collect()) {
        Ok(argv) => argv,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Weigh(a) => commands::weigh(a),
        Command::Subsample(a) => commands::subsample(a),
        Command::Audit(a) => commands::audit(a),
        Command::SearchEta(a) => commands::search_eta(a),
        Command::Synth(a) => commands::synth(a),
        Command::Oracle(a) => commands::oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code())
        }
    }
}
