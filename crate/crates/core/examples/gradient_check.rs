//! Finite-difference check of the attention refinement and feature fusion
//! modules against autograd.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use vidseg::bilateral::{Arm, Ffm};
use vidseg::gradcheck::{check_gradients, store_vars};
use vidseg::nn::{device, Ctx, ParamStore};
use vidseg::FeatureMap;

fn random(shape: &[usize], seed: u64) -> vidseg::Result<Tensor> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(Tensor::from_vec(v, shape, &device())?)
}

fn main() -> vidseg::Result<()> {
    let mut store = ParamStore::new(0);
    let arm = Arm::new(&mut store, "arm", 8)?;
    let ffm = Ffm::new(&mut store, "ffm", 16, 8)?;
    let sp = FeatureMap::new(random(&[2, 8, 4, 4], 1)?, 8);
    let cx = FeatureMap::new(random(&[2, 8, 4, 4], 2)?, 8);
    let weights = random(&[2, 8, 4, 4], 3)?;

    let report = check_gradients(
        &store_vars(&store),
        || {
            let ctx = Ctx::train();
            let refined = arm.forward(&cx, &ctx)?;
            let fused = ffm.forward(&sp, &refined, &ctx)?;
            Ok((fused.data * &weights)?.sum_all()?)
        },
        4,
        1e-5,
        0,
    )?;
    for s in &report.samples {
        println!("{:<24} [{:>3}] {:+.6e} {:+.6e}", s.name, s.index, s.analytic, s.numeric);
    }
    println!("{} samples, max relative error {:.2e}", report.samples.len(), report.max_rel_err());
    Ok(())
}
