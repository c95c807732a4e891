//! Walk a clip with the temporal model: which earlier frames each frame
//! reads, how the feature cache keeps the backbone to one pass per frame,
//! and how stable the predictions are under pixel noise.

use vidseg::datagen::{add_frame_noise, generate_clip, DatasetSpec};
use vidseg::metrics::flip_rate;
use vidseg::model::{ModelConfig, SegmentationModel, Variant};
use vidseg::temporal::{forward_video, select_reference_indices, FeatureCache};
use vidseg::trainer::predict_clip;

fn main() -> vidseg::Result<()> {
    let spec = DatasetSpec::default();
    let clip = generate_clip(&spec, 0)?;
    let model = SegmentationModel::new(&ModelConfig::toy(spec.num_classes, Variant::Temporal), 0)?;
    let tcfg = &model.config.temporal;
    for t in [0, 2, 5, 9, 11] {
        println!("frame {t:>2} reads {:?}", select_reference_indices(t, tcfg));
    }

    let mut cache = FeatureCache::for_config(tcfg);
    model.reset_forward_count();
    let logits = forward_video(&clip, &model, Some(&mut cache))?;
    println!(
        "{} frames, {} backbone passes with the cache ({} hits)",
        logits.len(),
        model.forward_count(),
        cache.hits()
    );
    model.reset_forward_count();
    forward_video(&clip, &model, None)?;
    println!("{} backbone passes without it", model.forward_count());

    let noisy = add_frame_noise(&clip, 0.1, 1);
    println!("untrained flip rate on a noisy clip: {:.4}", flip_rate(&predict_clip(&model, &noisy)?)?);
    Ok(())
}
