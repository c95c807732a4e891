#![allow(dead_code)]

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidseg::backbone::WindowAttention;
use vidseg::bilateral::{Arm, Ffm};
use vidseg::gradcheck::{check_gradients, store_vars, GradReport};
use vidseg::losses::{ohem_cross_entropy, OhemConfig};
use vidseg::nn::{device, Conv2d, Ctx, ParamStore};
use vidseg::{FeatureMap, Result};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &device()).unwrap()
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
pub fn probe(y: &Tensor, seed: u64) -> Result<Tensor> {
    Ok((y * randn(y.dims(), seed))?.sum_all()?)
}

pub fn attention_check() -> GradReport {
    let mut store = ParamStore::new(11);
    let attn = WindowAttention::new(&mut store, "attn", 8, 2, 2).unwrap();
    // The bias table starts at zero; give it values so it is exercised.
    store
        .assign("attn.relative_position_bias_table", &randn(&[9, 2], 5))
        .unwrap();
    let tokens = randn(&[1, 4, 8], 1);
    check_gradients(
        &store_vars(&store),
        || probe(&attn.forward(&tokens, None)?, 2),
        8,
        FD_STEP,
        0,
    )
    .unwrap()
}

pub fn arm_check() -> GradReport {
    let mut store = ParamStore::new(12);
    let arm = Arm::new(&mut store, "arm", 6).unwrap();
    let x = FeatureMap::new(randn(&[3, 6, 4, 4], 3), 16);
    check_gradients(
        &store_vars(&store),
        || probe(&arm.forward(&x, &Ctx::train())?.data, 4),
        24,
        FD_STEP,
        1,
    )
    .unwrap()
}

pub fn ffm_check() -> GradReport {
    let mut store = ParamStore::new(13);
    let ffm = Ffm::new(&mut store, "ffm", 10, 8).unwrap();
    let sp = FeatureMap::new(randn(&[2, 4, 3, 3], 5), 8);
    let cx = FeatureMap::new(randn(&[2, 6, 3, 3], 6), 8);
    check_gradients(
        &store_vars(&store),
        || probe(&ffm.forward(&sp, &cx, &Ctx::train())?.data, 7),
        6,
        FD_STEP,
        2,
    )
    .unwrap()
}

pub fn ohem_check() -> GradReport {
    let logits = Var::from_tensor(&(randn(&[1, 4, 6, 6], 8) * 2.0).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let labels: Vec<u8> = (0..36)
        .map(|i| if i % 11 == 0 { 255 } else { rng.random_range(0..4) })
        .collect();
    let cfg = OhemConfig {
        prob_threshold: 0.3,
        min_kept: 5,
    };
    check_gradients(
        &[("logits".into(), logits.clone())],
        || ohem_cross_entropy(logits.as_tensor(), &labels, &cfg),
        30,
        FD_STEP,
        3,
    )
    .unwrap()
}

pub fn conv_check() -> GradReport {
    let mut store = ParamStore::new(14);
    let conv = Conv2d::new(&mut store, "c", 3, 4, 3, 2, 1, true).unwrap();
    let x = randn(&[2, 3, 7, 6], 10);
    check_gradients(
        &store_vars(&store),
        || probe(&conv.forward(&x)?, 11),
        20,
        FD_STEP,
        4,
    )
    .unwrap()
}

pub fn describe(report: &GradReport) -> String {
    match report.worst() {
        Some(w) => format!(
            "{} samples, max rel err {:.2e} ({}[{}]: analytic {:.6e} numeric {:.6e})",
            report.samples.len(),
            report.max_rel_err(),
            w.name,
            w.index,
            w.analytic,
            w.numeric
        ),
        None => "no samples".into(),
    }
}

/// Every side in 32..=64 (all residues mod the output stride) plus larger
/// sizes up to the full 479 crop.
pub fn sweep_sides() -> Vec<usize> {
    (32..=64)
        .chain([65, 96, 100, 127, 128, 161, 200, 255, 256, 320, 479])
        .collect()
}

/// Check the shape contract for an `h x w` input: spatial and context
/// features agree at stride 8 by ceil division and logits match the input.
pub fn check_shapes(
    model: &vidseg::model::SegmentationModel,
    h: usize,
    w: usize,
) -> std::result::Result<(), String> {
    use vidseg::bilateral::stride8_side;
    let ctx = Ctx::eval();
    let x = randn(&[1, 3, h, w], (h * 1000 + w) as u64);
    let sp = model.spatial.forward(&x, &ctx).map_err(|e| e.to_string())?;
    let cx = model.context.forward(&x, &ctx).map_err(|e| e.to_string())?;
    let want = (stride8_side(h), stride8_side(w));
    if sp.spatial() != want || cx.spatial() != want {
        return Err(format!(
            "{h}x{w}: spatial {:?}, context {:?}, expected {want:?}",
            sp.spatial(),
            cx.spatial()
        ));
    }
    let logits = model.forward_single(&x, &ctx).map_err(|e| e.to_string())?;
    if logits.dims() != [1, model.num_classes(), h, w] {
        return Err(format!("{h}x{w}: logits {:?}", logits.dims()));
    }
    Ok(())
}

/// Whole single-frame model at 64x64, batch 2, running-statistics batch norm,
/// cross entropy on random labels; five scalars from each of the spatial path, an
/// ARM, the FFM and the classifier.
pub fn model_check() -> GradReport {
    use vidseg::losses::cross_entropy;
    use vidseg::model::{ModelConfig, SegmentationModel, Variant};
    let model = SegmentationModel::new(&ModelConfig::toy(4, Variant::SingleFrame), 21).unwrap();
    let x = ((randn(&[2, 3, 64, 64], 22) + 1.0).unwrap() * 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let labels: Vec<u8> = (0..2 * 64 * 64).map(|_| rng.random_range(0..4)).collect();
    let vars: Vec<_> = [
        "spatial.layer0.conv.weight",
        "context.arm16.conv.weight",
        "ffm.fuse.conv.weight",
        "head.cls.weight",
    ]
    .iter()
    .map(|n| (n.to_string(), model.store.get(n).unwrap().clone()))
    .collect();
    check_gradients(
        &vars,
        || cross_entropy(&model.forward_single(&x, &Ctx::eval())?, &labels),
        5,
        FD_STEP,
        5,
    )
    .unwrap()
}

/// Toy experiment small enough for tests: two 10-frame 32x32 training clips,
/// one validation clip, a handful of steps per stage.
pub fn tiny_config(out: &std::path::Path) -> vidseg::config::ExperimentConfig {
    let mut cfg = vidseg::config::ExperimentConfig::toy();
    cfg.output_dir = out.to_path_buf();
    cfg.dataset.synthetic.num_clips = 2;
    cfg.dataset.synthetic.frames_per_clip = 10;
    cfg.dataset.synthetic.height = 32;
    cfg.dataset.synthetic.width = 32;
    cfg.dataset.val_clips = 1;
    for (plan, steps) in [(&mut cfg.stage1, 4), (&mut cfg.stage2, 3)] {
        plan.steps = steps;
        plan.batch_size = 2;
        plan.crop = [32, 32];
        plan.val_every = 2;
    }
    cfg
}
