//! Cross entropy against OHEM on one batch of logits: OHEM averages only the
//! hardest pixels, so it is never below plain cross entropy.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use vidseg::losses::{cross_entropy, ohem_cross_entropy_detailed, scalar, OhemConfig};
use vidseg::nn::device;

fn main() -> vidseg::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (k, h, w) = (4, 16, 16);
    let logits: Vec<f64> = (0..k * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
    let logits = Tensor::from_vec(logits, (1, k, h, w), &device())?;
    let labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..k as u8)).collect();

    println!("cross entropy: {:.4}", scalar(&cross_entropy(&logits, &labels)?)?);
    for (threshold, min_kept) in [(0.7, 16), (0.3, 16), (0.3, 200)] {
        let cfg = OhemConfig {
            prob_threshold: threshold,
            min_kept,
        };
        let out = ohem_cross_entropy_detailed(&logits, &labels, &cfg)?;
        println!(
            "OHEM threshold {threshold}, min_kept {min_kept}: {:.4} over {} of {} pixels",
            scalar(&out.loss)?,
            out.kept,
            h * w
        );
    }
    Ok(())
}
