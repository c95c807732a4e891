//! Train single-frame and temporal models with and without OHEM
//! fine-tuning and print the comparison table.
//!
//! ```text
//! cargo run --example ablation_table -- [stage1_steps] [stage2_steps]
//! ```
//!
//! The full schedule (2000 + 500 steps per variant) takes tens of minutes on
//! one core; the defaults here are a quick look.

use vidseg::cli::{cmd_ablate, format_ablation_table};
use vidseg::config::ExperimentConfig;

fn main() -> vidseg::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let mut cfg = ExperimentConfig::toy();
    cfg.stage1.steps = args.next().flatten().unwrap_or(100);
    cfg.stage2.steps = args.next().flatten().unwrap_or(30);
    cfg.output_dir = "runs/ablation".into();
    let ablation = cmd_ablate(&cfg)?;
    print!("{}", format_ablation_table(&ablation.rows));
    for (row, secs) in ablation.rows.iter().zip(&ablation.train_seconds) {
        println!("{:<36} trained in {secs:.0} s", row.method);
    }
    Ok(())
}
