use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mshnet::Exec;
use mshnet_cli::{exit_code, run, Mode, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "mshnet", version, about = "Multi-similarity few-shot segmentation")]
struct Cli {
    #[command(subcommand)]
    mode: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    fold: Option<usize>,
    /// contiguous | interleaved
    #[arg(long, global = true)]
    scheme: Option<String>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// both | gps | cosine
    #[arg(long, global = true)]
    sim: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory of precomputed `<id>.mshp` feature pyramids.
    #[arg(long, global = true)]
    features: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Episodic training; writes a checkpoint and a loss CSV.
    Train,
    /// Test-split evaluation of a checkpoint; writes per-class counts and mIoU.
    Eval,
    /// Trains and evaluates both, gps-only and cosine-only models.
    Ablate,
    /// Per-block similarity energy maps for one episode.
    EnergyMap,
    /// Renders a synthetic corpus to image and label tensors.
    SynthData,
    /// Finite-difference gradient suite.
    GradCheck,
}

impl Command {
    fn mode(self) -> Mode {
        match self {
            Command::Train => Mode::Train,
            Command::Eval => Mode::Eval,
            Command::Ablate => Mode::Ablate,
            Command::EnergyMap => Mode::EnergyMap,
            Command::SynthData => Mode::SynthData,
            Command::GradCheck => Mode::GradCheck,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let mode = cli.mode.mode();
    let overrides = Overrides {
        config: cli.config,
        fold: cli.fold,
        scheme: cli.scheme,
        k: cli.k,
        sim: cli.sim,
        seed: cli.seed,
        features: cli.features,
        out: cli.out,
    };
    let result = RunConfig::resolve(mode, &overrides).and_then(|cfg| run(mode, &cfg, Exec::default()));
    match result {
        Ok(summary) => {
            for line in &summary.lines {
                println!("{}", line);
            }
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mshnet {}: {}", mode.name(), e);
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
