//! `flowedit`: data generation, training, sampling, multi-turn editing,
//! evaluation, math verification and plotting.
//!
//! Settings resolve as flags > `--config` TOML file > built-in defaults.
//! Exit codes: 0 success, 1 runtime error, 2 config or usage error,
//! 3 verification failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Verification(String),
}

impl Failure {
    /// Maps a library error, sending config errors to exit code 2.
    pub fn core(e: flowedit::Error) -> Self {
        match e {
            flowedit::Error::Config(_) => Failure::Config(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }

    pub fn config(e: flowedit::Error) -> Self {
        Failure::Config(e.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

impl From<flowedit::Error> for Failure {
    fn from(e: flowedit::Error) -> Self {
        Failure::core(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "flowedit", version = flowedit::build_version(), about = "In-context rectified-flow editing on a toy benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a procedural edit dataset.
    GenerateData(GenerateArgs),
    /// Train a model; writes checkpoints, loss.csv and the resolved config.
    Train(TrainArgs),
    /// Edit context image(s) with one instruction.
    Sample(SampleArgs),
    /// Apply an instruction script turn by turn, feeding each output back.
    EditLoop(EditLoopArgs),
    /// Score a checkpoint on held-out edits and multi-turn drift.
    Eval(EvalArgs),
    /// Check the schedule, target, rotary and solver identities.
    VerifyMath(VerifyArgs),
    /// Write schedule curves as CSV or a drift CSV as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded execution.
    #[arg(long)]
    deterministic: bool,
}

impl Common {
    fn resolve(&self, apply: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        apply(&mut cfg);
        cfg.resolve()
    }
}

#[derive(Debug, Args)]
pub struct SamplerFlags {
    /// Euler steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
}

impl SamplerFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(n) = self.steps {
            cfg.sampler.num_steps = n;
        }
        if let Some(g) = self.guidance {
            cfg.sampler.guidance_scale = g;
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    examples: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    /// Image storage: raw or png.
    #[arg(long)]
    storage: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset from generate-data; generated in memory from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Context image; repeat for several.
    #[arg(long)]
    context: Vec<PathBuf>,
    /// Instruction text, e.g. "recolor red circle blue".
    #[arg(long)]
    instruction: String,
    #[command(flatten)]
    sampler: SamplerFlags,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditLoopArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Starting image.
    #[arg(long)]
    image: PathBuf,
    /// Instruction script, one instruction per line.
    #[arg(long)]
    script: PathBuf,
    #[command(flatten)]
    sampler: SamplerFlags,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    sampler: SamplerFlags,
    #[arg(long)]
    examples: Option<usize>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    turns: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Logit-normal sample size.
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[command(flatten)]
    common: Common,
    /// Timestep distribution as `mu=..,sigma=..` or `alpha=..`; repeatable.
    #[arg(long, conflicts_with = "drift")]
    schedule: Vec<String>,
    /// Points per schedule curve.
    #[arg(long, default_value_t = 101)]
    points: usize,
    /// Drift CSV (from eval or edit-loop) to chart as SVG.
    #[arg(long)]
    drift: Option<PathBuf>,
    /// Output file; CSV goes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_threads(common: &Common) -> Result<(), Failure> {
    let threads = if common.deterministic {
        Some(1)
    } else {
        match std::env::var("FLOWEDIT_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                Failure::Config(anyhow::anyhow!("FLOWEDIT_THREADS must be a positive integer, got {v:?}"))
            })?),
            Err(_) => None,
        }
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenerateData(a) => {
            init_threads(&a.common)?;
            commands::generate_data(&a)
        }
        Command::Train(a) => {
            init_threads(&a.common)?;
            commands::train(&a)
        }
        Command::Sample(a) => {
            init_threads(&a.common)?;
            commands::sample(&a)
        }
        Command::EditLoop(a) => {
            init_threads(&a.common)?;
            commands::edit_loop(&a)
        }
        Command::Eval(a) => {
            init_threads(&a.common)?;
            commands::eval(&a)
        }
        Command::VerifyMath(a) => {
            init_threads(&a.common)?;
            commands::verify_math(&a)
        }
        Command::Plot(a) => commands::plot(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("config error: {e:#}"),
                Failure::Runtime(e) => eprintln!("error: {e:#}"),
                Failure::Verification(msg) => eprintln!("verification failed: {msg}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
