//! `maskpredict` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskpredict::Error;

use crate::config::{RawConfig, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "maskpredict", version, about = "Mask-predict text-to-token-grid experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate train/val/test corpus files.
    GenData,
    /// Train (or resume) a model and log learning curves.
    Train,
    /// Decode captions from the test split with a checkpoint.
    Decode,
    /// Compare mask-predict and autoregressive decoding cost.
    Bench,
    /// Evaluate a checkpoint at several iteration counts.
    SweepIterations,
    /// Train and evaluate every regime × training schedule × inference schedule cell.
    SweepSchedules,
}

#[derive(Args, Debug)]
struct Shared {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// fully_nar | iter_v1 | iter_v2 | iter_v3 | ar
    #[arg(long, global = true)]
    regime: Option<String>,
    /// linear | cosine
    #[arg(long, global = true)]
    train_schedule: Option<String>,
    /// linear | cosine
    #[arg(long, global = true)]
    infer_schedule: Option<String>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    candidates: Option<usize>,
    #[arg(long, global = true)]
    gumbel_temp: Option<f64>,
    /// freeze | revise (default: chosen from the checkpoint's regime)
    #[arg(long, global = true)]
    algorithm: Option<String>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Any other config key, as key=value; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Shared {
    fn overrides(&self) -> Result<Vec<(String, String)>, Error> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
            out.push((k.to_string(), v.to_string()));
        }
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        put("seed", self.seed.map(|v| v.to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        put("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()));
        put("regime", self.regime.clone());
        put("train_schedule", self.train_schedule.clone());
        put("infer_schedule", self.infer_schedule.clone());
        put("iterations", self.iterations.map(|v| v.to_string()));
        put("candidates", self.candidates.map(|v| v.to_string()));
        put("gumbel_temp", self.gumbel_temp.map(|v| v.to_string()));
        put("algorithm", self.algorithm.clone());
        if self.force {
            put("force", Some("true".into()));
        }
        Ok(out)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownFamily(_) | Error::TooManyIterations { .. } => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Checkpoint { .. } => 3,
        e if e.is_numeric() => 4,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let raw = RawConfig::resolve(cli.shared.config.as_deref(), &cli.shared.overrides()?)?;
    let cfg = RunConfig::from_raw(raw)?;
    println!("# resolved config");
    print!("{}", cfg.raw.render());
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Decode => commands::decode(&cfg),
        Command::Bench => commands::bench(&cfg),
        Command::SweepIterations => commands::sweep_iterations(&cfg),
        Command::SweepSchedules => commands::sweep_schedules(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
