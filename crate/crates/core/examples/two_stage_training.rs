//! Train the temporal model with the two-stage recipe (cross entropy, then
//! OHEM fine-tuning with split learning rates) on a shortened schedule, and
//! write checkpoints, histories and loss plots.
//!
//! ```text
//! cargo run --example two_stage_training -- [stage1_steps] [stage2_steps]
//! ```

use vidseg::cli::{cmd_plot, cmd_train};
use vidseg::config::ExperimentConfig;
use vidseg::plot::read_history;

fn main() -> vidseg::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let mut cfg = ExperimentConfig::toy();
    cfg.stage1.steps = args.next().flatten().unwrap_or(60);
    cfg.stage2.steps = args.next().flatten().unwrap_or(20);
    cfg.stage1.val_every = 20;
    cfg.output_dir = "runs/two_stage".into();

    let outcome = cmd_train(&cfg, None)?;
    for (ckpt, hist) in outcome.checkpoints.iter().zip(&outcome.histories) {
        let records = read_history(hist)?;
        let last = records.last().expect("non-empty stage");
        println!(
            "{}: {} steps, final loss {:.4}, lr context/other {}/{}, val mIoU {:?}",
            ckpt.display(),
            records.len(),
            last.loss,
            last.lr_context,
            last.lr_other,
            last.val_miou
        );
    }
    for p in cmd_plot(&outcome.histories, &cfg.output_dir.join("plots"))? {
        println!("plot: {}", p.display());
    }
    Ok(())
}
