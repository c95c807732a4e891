use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vidseg::cli;
use vidseg::config::{ExperimentConfig, Preset, Split};
use vidseg::{Error, Result};

#[derive(Parser)]
#[command(name = "vidseg", version, about = "Bilateral video scene parsing")]
struct Args {
    /// TOML file layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Base recipe: toy or paper.
    #[arg(long, global = true, default_value = "toy")]
    preset: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as a VSPW-layout tree.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1 and, when enabled, stage 2.
    Train {
        /// Continue from a stage checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a split and write the report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Write predicted masks for every frame of a clip directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlay: bool,
    },
    /// Train and score the four loss/variant combinations.
    Ablate,
    /// Render loss and validation mIoU curves from history files.
    Plot {
        #[arg(long = "history", required = true)]
        histories: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &Args) -> Result<ExperimentConfig> {
    let preset: Preset = args.preset.parse()?;
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path, preset)?,
        None => ExperimentConfig::preset(preset),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.apply_env();
    Ok(cfg)
}

fn run(args: Args) -> Result<()> {
    let cfg = load_config(&args)?;
    match args.command {
        Command::GenData { out } => {
            let s = cli::cmd_gen_data(&cfg, &out)?;
            println!("wrote {} clips, {} frames to {}", s.clips, s.frames, out.display());
        }
        Command::Train { resume } => {
            let outcome = cli::cmd_train(&cfg, resume.as_deref())?;
            for p in &outcome.checkpoints {
                println!("{}", p.display());
            }
        }
        Command::Eval { checkpoint, split } => {
            let split: Split = split.parse()?;
            let report = cli::cmd_eval(&cfg, &checkpoint, split)?;
            print!("{}", cli::format_report(&report, &format!("{split:?}").to_lowercase()));
        }
        Command::Predict {
            checkpoint,
            clip,
            out,
            overlay,
        } => {
            let written = cli::cmd_predict(&cfg, &checkpoint, &clip, &out, overlay)?;
            println!("wrote {} masks to {}", written.len(), out.display());
        }
        Command::Ablate => {
            let ablation = cli::cmd_ablate(&cfg)?;
            print!("{}", cli::format_ablation_table(&ablation.rows));
        }
        Command::Plot { histories, out } => {
            for p in cli::cmd_plot(&histories, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
