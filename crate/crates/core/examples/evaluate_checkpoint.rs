//! Score a checkpoint on the synthetic validation split and print the
//! per-class report; trains a short stage first when no path is given.
//!
//! ```text
//! cargo run --example evaluate_checkpoint -- [checkpoint.safetensors]
//! ```

use std::path::PathBuf;

use vidseg::cli::{cmd_eval, format_report};
use vidseg::config::{ExperimentConfig, Split};
use vidseg::trainer::{train_stage, StageInit};

fn main() -> vidseg::Result<()> {
    let mut cfg = ExperimentConfig::toy();
    cfg.output_dir = "runs/evaluate".into();
    let ckpt = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let mut plan = cfg.stage1.clone();
            plan.steps = 40;
            let data = cfg.load_split(Split::Train)?;
            let init = StageInit::Fresh {
                config: cfg.model.clone(),
                seed: cfg.seed,
            };
            let (ck, _) = train_stage(&plan, &data, None, init, cfg.seed)?;
            let path = cfg.output_dir.join("short.safetensors");
            ck.save(&path)?;
            path
        }
    };
    let report = cmd_eval(&cfg, &ckpt, Split::Val)?;
    print!("{}", format_report(&report, "val"));
    println!("written to {}", cfg.output_dir.join("eval_val.txt").display());
    Ok(())
}
