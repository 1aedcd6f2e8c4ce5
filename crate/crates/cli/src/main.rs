use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Gait recognition experiments on synthetic walkers.
#[derive(Parser, Debug)]
#[command(name = "gaitlab", version)]
struct Cli {
    /// Run configuration file (`key=value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log debug output.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic walker dataset.
    GenData(GenData),
    /// Train a model.
    Train(Train),
    /// Evaluate a checkpoint on a gallery/probe protocol.
    Eval(Eval),
    /// Train one model per loss configuration and compare rank-1 accuracy.
    Ablate(Ablate),
    /// Cross-decode appearance and pose sources into a mosaic.
    Visualize(Visualize),
    /// Compare analytic gradients with finite differences.
    Gradcheck(Gradcheck),
    /// Time frame loading and per-frame inference.
    Bench(Bench),
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long, default_value_t = 20)]
    pub subjects: usize,
    /// Comma-separated conditions out of NM, CL, BG, FAST, SLOW.
    #[arg(long, default_value = "NM,CL")]
    pub conditions: String,
    /// Clips per subject and condition.
    #[arg(long, default_value_t = 4)]
    pub clips: usize,
    /// Frames per clip.
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    #[arg(long, default_value_t = 15.0)]
    pub fps: f64,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct RunOverrides {
    /// Dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Extra `key=value` configuration overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct Train {
    #[command(flatten)]
    pub run: RunOverrides,
}

#[derive(Args, Debug)]
pub struct Eval {
    /// Checkpoint file or run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "NM")]
    pub gallery: String,
    #[arg(long, default_value = "CL")]
    pub probe: String,
    /// Which clips to evaluate: held-out, train or all. Defaults to held-out
    /// when a run configuration is known, all otherwise.
    #[arg(long)]
    pub subset: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    pub ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05")]
    pub fars: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct Ablate {
    #[command(flatten)]
    pub run: RunOverrides,
    /// `orderings` for the five cells compared by the two ablation orderings,
    /// `all` for the full grid.
    #[arg(long, default_value = "orderings")]
    pub cells: String,
    #[arg(long, default_value = "NM")]
    pub gallery: String,
    #[arg(long, default_value = "CL")]
    pub probe: String,
}

#[derive(Args, Debug)]
pub struct Visualize {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Clip ids supplying appearance (mosaic rows).
    #[arg(long, value_delimiter = ',', required = true)]
    pub appearance: Vec<String>,
    /// Clip ids supplying pose (mosaic columns).
    #[arg(long, value_delimiter = ',', required = true)]
    pub pose: Vec<String>,
    /// Frame index taken from every source clip.
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
}

#[derive(Args, Debug)]
pub struct Gradcheck {
    /// Random instances per check.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Scale the analytic gradient of one check (self-test of the report).
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Args, Debug)]
pub struct Bench {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub frames: usize,
}

pub struct Global {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let global = Global {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&global, &a),
        Command::Train(a) => commands::train(&global, &a),
        Command::Eval(a) => commands::eval(&global, &a),
        Command::Ablate(a) => commands::ablate(&global, &a),
        Command::Visualize(a) => commands::visualize(&global, &a),
        Command::Gradcheck(a) => commands::gradcheck(&global, &a),
        Command::Bench(a) => commands::bench(&global, &a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
