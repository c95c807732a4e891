//! Overfit the toy model on a small synthetic dataset and report training mIoU.
//!
//! ```text
//! cargo run --release --example train_overfit -- [single_frame|temporal] [steps]
//! ```

use std::time::Instant;

use vidseg::datagen::{generate_dataset, DatasetSpec};
use vidseg::model::{ModelConfig, Variant};
use vidseg::trainer::{evaluate, StageInit, StagePlan, Trainer};

fn main() -> vidseg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let variant = match args.get(1).map(String::as_str) {
        Some("temporal") => Variant::Temporal,
        _ => Variant::SingleFrame,
    };
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);

    let spec = DatasetSpec::default();
    let clips = generate_dataset(&spec)?;
    let mut plan = StagePlan::stage1();
    plan.steps = steps;
    let init = StageInit::Fresh {
        config: ModelConfig::toy(spec.num_classes, variant),
        seed: 0,
    };
    let mut trainer = Trainer::new(plan, init, 0)?;
    let start = Instant::now();
    trainer.run(&clips, None, |r| {
        if r.step % 25 == 0 || r.step == 1 {
            println!(
                "step {:>5}  loss {:.4}  {:.3}s/step",
                r.step,
                r.loss,
                start.elapsed().as_secs_f64() / r.step as f64
            );
        }
    })?;
    let t = Instant::now();
    let report = evaluate(&trainer.model, &clips)?.miou()?;
    println!("training-set mIoU {:.4} (eval {:.1}s)", report.miou, t.elapsed().as_secs_f64());
    Ok(())
}
