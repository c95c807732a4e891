//! Interrupt a training stage, save it, resume from the file and confirm the
//! result is bit-identical to an uninterrupted run.

use vidseg::checkpoint::Checkpoint;
use vidseg::datagen::{generate_dataset, DatasetSpec};
use vidseg::model::{ModelConfig, Variant};
use vidseg::trainer::{StageInit, StagePlan, Trainer};

fn main() -> vidseg::Result<()> {
    let spec = DatasetSpec {
        num_clips: 2,
        frames_per_clip: 10,
        height: 32,
        width: 32,
        ..DatasetSpec::default()
    };
    let data = generate_dataset(&spec)?;
    let mut plan = StagePlan::stage1();
    plan.steps = 8;
    plan.batch_size = 2;
    plan.crop = [32, 32];
    let fresh = || {
        Trainer::new(
            plan.clone(),
            StageInit::Fresh {
                config: ModelConfig::toy(spec.num_classes, Variant::Temporal),
                seed: 0,
            },
            0,
        )
    };

    let mut straight = fresh()?;
    let full = straight.run(&data, None, |_| {})?;

    let mut first = fresh()?;
    let mut history: Vec<_> = (0..4).map(|_| first.train_step(&data)).collect::<Result<_, _>>()?;
    let dir = std::env::temp_dir().join("vidseg_resume_demo");
    let path = dir.join("stage1_step4.safetensors");
    first.checkpoint()?.save(&path)?;
    println!("saved step {} to {}", first.step, path.display());

    let mut resumed = Trainer::resume(&Checkpoint::load(&path)?)?;
    history.extend(resumed.run(&data, None, |_| {})?);
    for (a, b) in full.iter().zip(&history) {
        println!("step {}: {:.12} | {:.12}", a.step, a.loss, b.loss);
    }
    let same = straight.checkpoint()?.to_bytes()? == resumed.checkpoint()?.to_bytes()?;
    println!("histories equal: {}, weights identical: {same}", full == history);
    Ok(())
}
