//! Predict per-frame masks and colour overlays for one clip directory.
//!
//! ```text
//! cargo run --example predict_masks -- <checkpoint> <clip_dir> [out_dir]
//! ```
//!
//! Without arguments a synthetic clip is exported and an untrained model is
//! used, which is enough to see the output layout.

use std::path::PathBuf;

use vidseg::checkpoint::Checkpoint;
use vidseg::cli::{cmd_gen_data, cmd_predict};
use vidseg::config::ExperimentConfig;
use vidseg::model::SegmentationModel;

fn main() -> vidseg::Result<()> {
    let cfg = ExperimentConfig::toy();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (ckpt, clip_dir) = if args.len() >= 2 {
        (PathBuf::from(&args[0]), PathBuf::from(&args[1]))
    } else {
        let root = PathBuf::from("runs/predict");
        let data = root.join("data");
        cmd_gen_data(&cfg, &data)?;
        let list_path = data.join("val.txt");
        let list = std::fs::read_to_string(&list_path).map_err(|e| vidseg::Error::io(&list_path, e))?;
        let clip = list.lines().next().unwrap_or_default().to_string();
        let model = SegmentationModel::new(&cfg.model, cfg.seed)?;
        let path = root.join("untrained.safetensors");
        Checkpoint::capture(&model, None, 0, None, &Default::default())?.save(&path)?;
        (path, data.join(clip))
    };
    let out = args
        .get(2)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs/predict/masks"));
    let written = cmd_predict(&cfg, &ckpt, &clip_dir, &out, true)?;
    println!("{} masks written to {}", written.len(), out.display());
    Ok(())
}
