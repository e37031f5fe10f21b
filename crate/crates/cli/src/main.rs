//! `rp2pn` command-line driver.
//!
//! Exit codes: 0 on success, 2 for usage errors, and a fixed code per
//! error category otherwise (see [`exit_code`]).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "rp2pn", version = env!("CARGO_PKG_VERSION"), about = "Polarization-to-polarization reflection removal")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML config layered over its preset (default: the desk preset).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set schedule.max_steps=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Directory that relative output paths are resolved against.
    #[arg(long, env = "RP2PN_OUTPUT_ROOT", global = true)]
    pub output_root: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes and split manifests under `data.root`.
    Synth,
    /// Train on the train split, validating on the val split if present.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Separate one scene and write predicted and derived images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene directory holding the twelve canonical PNGs.
        #[arg(long)]
        scene: PathBuf,
        /// Output directory (default: `<output_dir>/infer/<scene>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint, or the ground-truth oracle, on one split.
    Eval {
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value = "test")]
        split: rp2pn::data::Split,
        /// Output directory (default: `<output_dir>/eval_<split>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every configured ablation variant.
    Ablate {
        /// Split to score on (default: `ablation.eval_split`).
        #[arg(long)]
        split: Option<rp2pn::data::Split>,
    },
}

/// Process exit code for an error category.
fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 3,
        "validation" => 4,
        "io" => 5,
        "incompatible" => 6,
        "numerical" => 7,
        "degenerate" => 8,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth => commands::synth(&cli.global),
        Command::Train { resume } => commands::train(&cli.global, resume.as_deref()),
        Command::Infer { checkpoint, scene, out } => commands::infer(&cli.global, &checkpoint, &scene, out.as_deref()),
        Command::Eval {
            checkpoint,
            oracle,
            split,
            out,
        } => commands::eval(&cli.global, checkpoint.as_deref(), oracle, split, out.as_deref()),
        Command::Ablate { split } => commands::ablate(&cli.global, split),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.downcast_ref::<rp2pn::Error>().map_or("internal", |e| e.category());
            eprintln!("error [{category}]: {e:#}");
            ExitCode::from(exit_code(category))
        }
    }
}
