mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Ctx, StudyKind};
use config::RunConfig;
use qnerf::Error;

#[derive(Parser)]
#[command(name = "qnerf", version, about = "Quantum neural radiance fields on a statevector simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Blender-style scene directory.
    #[arg(long, global = true)]
    scene: Option<PathBuf>,
    /// full, dual, classical or classical-q.
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    qubits: Option<usize>,
    #[arg(long, global = true)]
    ell: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; every artifact is written below it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Standard deviation of Gaussian angle noise.
    #[arg(long, global = true)]
    noise_sigma: Option<f64>,
    /// Symmetric readout bit-flip probability.
    #[arg(long, global = true)]
    readout_p: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write logs and a checkpoint.
    Train,
    /// Render one view from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Frame index within the chosen split.
        #[arg(long)]
        frame: Option<usize>,
        /// train or test.
        #[arg(long)]
        split: Option<String>,
        /// JSON file with camera_angle_x, width, height and transform_matrix.
        #[arg(long)]
        pose_file: Option<PathBuf>,
    },
    /// Score a checkpoint on every frame of a split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Print amplitude, parameter and gate counts for a model.
    Info,
    /// fidelity, gradvar, concentration or scaling-ablation.
    Study { kind: String },
    /// Write the procedural test scene to `<out>/scene`.
    Synth {
        #[arg(long, default_value_t = 100)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        train: usize,
        #[arg(long, default_value_t = 10)]
        test: usize,
    },
}

fn build_config(cli: &Cli) -> qnerf::Result<RunConfig> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut over: Vec<(&str, String)> = Vec::new();
    if let Some(v) = &c.scene {
        over.push(("scene", v.display().to_string()));
    }
    if let Some(v) = &c.variant {
        over.push(("variant", v.clone()));
    }
    if let Some(v) = c.qubits {
        over.push(("qubits", v.to_string()));
    }
    if let Some(v) = c.ell {
        over.push(("ell", v.to_string()));
    }
    if let Some(v) = c.seed {
        over.push(("seed", v.to_string()));
    }
    if let Some(v) = &c.out {
        over.push(("out", v.display().to_string()));
    }
    if let Some(v) = c.noise_sigma {
        over.push(("noise_sigma", v.to_string()));
    }
    if let Some(v) = c.readout_p {
        over.push(("readout_p", v.to_string()));
    }
    match &cli.command {
        Command::Render { checkpoint, frame, split, pose_file } => {
            if let Some(v) = checkpoint {
                over.push(("checkpoint", v.display().to_string()));
            }
            if let Some(v) = frame {
                over.push(("frame", v.to_string()));
            }
            if let Some(v) = split {
                over.push(("split", v.clone()));
            }
            if let Some(v) = pose_file {
                over.push(("pose_file", v.display().to_string()));
            }
        }
        Command::Eval { checkpoint, split } => {
            if let Some(v) = checkpoint {
                over.push(("checkpoint", v.display().to_string()));
            }
            if let Some(v) = split {
                over.push(("split", v.clone()));
            }
        }
        _ => {}
    }
    for (k, v) in over {
        cfg.set(k, &v)?;
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::Load { .. } | Error::Format { .. } => 2,
        Error::NonFinite { .. } => 3,
        Error::CheckpointVersion { .. } => 4,
        _ => 1,
    }
}

fn run(cli: &Cli) -> qnerf::Result<()> {
    if let Some(k) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("cannot set thread count: {e}")))?;
    }
    let cfg = build_config(cli)?;
    let ctx = Ctx { cfg, data_root: std::env::var_os("QNERF_DATA_DIR").map(PathBuf::from) };
    match &cli.command {
        Command::Train => commands::train(&ctx),
        Command::Render { .. } => commands::render(&ctx),
        Command::Eval { .. } => commands::eval(&ctx),
        Command::Info => commands::info(&ctx),
        Command::Study { kind } => commands::study(&ctx, StudyKind::from_name(kind)?),
        Command::Synth { size, train, test } => commands::synth(&ctx, *size, *train, *test),
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
