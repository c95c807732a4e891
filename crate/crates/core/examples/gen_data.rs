//! Render the toy synthetic dataset to disk in the VSPW directory layout.
//!
//! ```text
//! cargo run --example gen_data -- [out_dir]
//! ```

use std::path::PathBuf;

use vidseg::cli::cmd_gen_data;
use vidseg::config::ExperimentConfig;
use vidseg::datagen::load_vspw_dir;

fn main() -> vidseg::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs/synthetic"));
    let cfg = ExperimentConfig::toy();
    let summary = cmd_gen_data(&cfg, &out)?;
    println!("{} clips, {} frames under {}", summary.clips, summary.frames, out.display());
    for split in ["train", "val"] {
        let clips = load_vspw_dir(&out, split)?;
        let frames: usize = clips.iter().map(|c| c.len()).sum();
        println!("  {split}: {} clips, {frames} frames", clips.len());
    }
    Ok(())
}
