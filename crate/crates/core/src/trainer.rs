//! Two-stage SGD training: plain cross-entropy with one learning rate, then
//! OHEM cross-entropy with a smaller rate for the context path.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilateral::argmax_classes;
use crate::checkpoint::Checkpoint;
use crate::datagen::{frames_to_tensor, CropParams, FrameClip};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, ohem_cross_entropy, scalar, LossKind, OhemConfig};
use crate::metrics::ConfusionMatrix;
use crate::model::{ModelConfig, SegmentationModel, Variant};
use crate::nn::{derive_seed, Ctx};
use crate::temporal::{forward_video, select_reference_indices, FeatureCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrPolicy {
    Constant,
    Poly,
}

pub const POLY_POWER: f64 = 0.9;

impl std::str::FromStr for LrPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "poly" => Ok(Self::Poly),
            other => Err(Error::config(format!(
                "unknown lr policy `{other}` (expected `constant` or `poly`)"
            ))),
        }
    }
}

pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, policy: LrPolicy) -> Result<f64> {
    if step > total_steps {
        return Err(Error::contract(format!(
            "lr requested for step {step} beyond total {total_steps}"
        )));
    }
    Ok(match policy {
        LrPolicy::Constant => base_lr,
        LrPolicy::Poly if total_steps == 0 => base_lr,
        LrPolicy::Poly => base_lr * (1.0 - step as f64 / total_steps as f64).powf(POLY_POWER),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: u8,
    pub loss: LossKind,
    pub lr_context: f64,
    pub lr_other: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub crop: [usize; 2],
    pub lr_policy: LrPolicy,
    #[serde(default)]
    pub ohem: OhemConfig,
    /// Validation interval in steps; 0 disables periodic validation.
    #[serde(default)]
    pub val_every: usize,
}

impl StagePlan {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            loss: LossKind::Ce,
            lr_context: 0.002,
            lr_other: 0.002,
            momentum: 0.9,
            weight_decay: 0.0,
            steps: 2000,
            batch_size: 4,
            crop: [64, 64],
            lr_policy: LrPolicy::Constant,
            ohem: OhemConfig::toy(),
            val_every: 0,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            loss: LossKind::OhemCe,
            lr_context: 0.0002,
            lr_other: 0.0005,
            steps: 1000,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.stage, self.loss) {
            (1, LossKind::Ce) if self.lr_context == self.lr_other => {}
            (1, LossKind::Ce) => {
                return Err(Error::config("stage 1 uses a single learning rate for all groups"))
            }
            (1, _) => return Err(Error::config("stage 1 trains with plain cross-entropy")),
            (2, LossKind::OhemCe) => {}
            (2, _) => return Err(Error::config("stage 2 trains with OHEM cross-entropy")),
            (s, _) => return Err(Error::config(format!("stage must be 1 or 2, got {s}"))),
        }
        let rates = [self.lr_context, self.lr_other, self.momentum, self.weight_decay];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::config("learning rates, momentum and weight decay must be finite and >= 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2 for batch statistics"));
        }
        if self.crop.contains(&0) {
            return Err(Error::config("crop must be non-empty"));
        }
        if self.loss == LossKind::OhemCe {
            self.ohem.validate()?;
        }
        Ok(())
    }
}

/// Which learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Context,
    Other,
}

pub fn classify_param(name: &str) -> Result<Group> {
    let root = name.split('.').next().unwrap_or("");
    match root {
        "backbone" | "context" => Ok(Group::Context),
        "spatial" | "ffm" | "head" | "temporal_head" => Ok(Group::Other),
        _ => Err(Error::config(format!(
            "parameter `{name}` belongs to no learning-rate group"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub group: Group,
    pub names: Vec<String>,
    pub lr: f64,
}

pub fn build_param_groups(model: &SegmentationModel, plan: &StagePlan) -> Result<Vec<ParamGroup>> {
    let mut context = Vec::new();
    let mut other = Vec::new();
    for name in model.store.params().keys() {
        match classify_param(name)? {
            Group::Context => context.push(name.clone()),
            Group::Other => other.push(name.clone()),
        }
    }
    Ok(vec![
        ParamGroup {
            group: Group::Context,
            names: context,
            lr: plan.lr_context,
        },
        ParamGroup {
            group: Group::Other,
            names: other,
            lr: plan.lr_other,
        },
    ])
}

/// One momentum-SGD update: `buf = m * buf + (g + wd * p)`, `p -= lr * buf`.
/// Returns the new parameter and buffer.
pub fn sgd_update(
    param: &Tensor,
    grad: &Tensor,
    buf: Option<&Tensor>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(Tensor, Tensor)> {
    let d = if weight_decay != 0.0 {
        (grad + (param * weight_decay)?)?
    } else {
        grad.clone()
    };
    let buf = match buf {
        Some(b) => ((b * momentum)? + d)?,
        None => d,
    };
    let p = (param - (&buf * lr)?)?;
    Ok((p, buf))
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    /// Update every parameter of `groups` in place. Parameters without a
    /// gradient are treated as having a zero gradient. All gradients are
    /// checked before anything is written.
    pub fn step(
        &mut self,
        model: &SegmentationModel,
        grads: &GradStore,
        groups: &[(ParamGroup, f64)],
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let mut staged = Vec::new();
        for (group, lr) in groups {
            for name in &group.names {
                let var = &model.store.params()[name];
                let grad = match grads.get(var) {
                    Some(g) => {
                        let s = scalar(&g.abs()?.sum_all()?)?;
                        if !s.is_finite() {
                            return Err(Error::numerical(format!(
                                "non-finite gradient for `{name}`"
                            )));
                        }
                        g.clone()
                    }
                    None => var.zeros_like()?,
                };
                staged.push((name, var, grad, *lr));
            }
        }
        for (name, var, grad, lr) in staged {
            let (p, b) = sgd_update(
                var.as_tensor(),
                &grad,
                self.buffers.get(name),
                lr,
                momentum,
                weight_decay,
            )?;
            var.set(&p)?;
            self.buffers.insert(name.clone(), b);
        }
        Ok(())
    }
}

/// One augmented minibatch. `references[k]` holds the frames at offset `k`
/// for every sample, cropped identically to the current frame.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub references: Vec<Tensor>,
    pub labels: Vec<u8>,
}

pub fn sample_batch(
    data: &[FrameClip],
    plan: &StagePlan,
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if data.iter().all(|c| c.is_empty()) {
        return Err(Error::config("training dataset is empty"));
    }
    let temporal = config.variant == Variant::Temporal;
    let n_refs = if temporal { config.temporal.offsets.len() } else { 0 };
    let mut images = Vec::with_capacity(plan.batch_size);
    let mut refs: Vec<Vec<_>> = vec![Vec::with_capacity(plan.batch_size); n_refs];
    let mut labels = Vec::with_capacity(plan.batch_size * plan.crop[0] * plan.crop[1]);
    for _ in 0..plan.batch_size {
        let clip = loop {
            let c = &data[rng.random_range(0..data.len())];
            if !c.is_empty() {
                break c;
            }
        };
        let t = rng.random_range(0..clip.len());
        let crop = CropParams::sample(clip.height(), clip.width(), plan.crop[0], plan.crop[1], rng);
        images.push(crop.apply_frame(&clip.frames[t]));
        labels.extend(crop.apply_label(&clip.labels[t]).iter().copied());
        if temporal {
            for (k, i) in select_reference_indices(t, &config.temporal).into_iter().enumerate() {
                refs[k].push(crop.apply_frame(&clip.frames[i]));
            }
        }
    }
    let images = frames_to_tensor(&images.iter().collect::<Vec<_>>())?;
    let references = refs
        .iter()
        .map(|r| frames_to_tensor(&r.iter().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        images,
        references,
        labels,
    })
}

/// Training-mode forward and loss for one batch. The returned context holds
/// the pending batch-norm statistics.
pub fn batch_loss(
    model: &SegmentationModel,
    batch: &Batch,
    plan: &StagePlan,
) -> Result<(Tensor, Ctx)> {
    let ctx = Ctx::train();
    let logits = match model.variant() {
        Variant::SingleFrame => model.forward_single(&batch.images, &ctx)?,
        Variant::Temporal => model.forward_temporal(&batch.images, &batch.references, &ctx)?,
    };
    let loss = match plan.loss {
        LossKind::Ce => cross_entropy(&logits, &batch.labels)?,
        LossKind::OhemCe => ohem_cross_entropy(&logits, &batch.labels, &plan.ohem)?,
    };
    Ok((loss, ctx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub stage: u8,
    pub step: usize,
    pub loss: f64,
    pub lr_context: f64,
    pub lr_other: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

/// Eval-mode confusion matrix over whole clips at their native size.
pub fn evaluate(model: &SegmentationModel, clips: &[FrameClip]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for clip in clips {
        let mut cache = FeatureCache::for_config(&model.config.temporal);
        let logits = forward_video(clip, model, Some(&mut cache))?;
        for (l, label) in logits.iter().zip(&clip.labels) {
            let pred = argmax_classes(l)?;
            cm.update(&pred[0], label.as_slice().expect("standard layout"))?;
        }
    }
    Ok(cm)
}

/// Per-frame predicted class maps of a clip, flattened row-major.
pub fn predict_clip(model: &SegmentationModel, clip: &FrameClip) -> Result<Vec<Vec<u8>>> {
    let mut cache = FeatureCache::for_config(&model.config.temporal);
    forward_video(clip, model, Some(&mut cache))?
        .iter()
        .map(|l| Ok(argmax_classes(l)?.remove(0)))
        .collect()
}

/// How a stage obtains its starting weights.
pub enum StageInit<'a> {
    Fresh { config: ModelConfig, seed: u64 },
    From(&'a Checkpoint),
}

/// Mutable training state for one stage.
pub struct Trainer {
    pub model: SegmentationModel,
    pub plan: StagePlan,
    pub sgd: Sgd,
    pub rng: ChaCha8Rng,
    pub step: usize,
    groups: Vec<ParamGroup>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("plan", &self.plan)
            .field("step", &self.step)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    /// Start a stage. Stage 2 must start from a stage-1 checkpoint; the
    /// momentum buffers start empty either way.
    pub fn new(plan: StagePlan, init: StageInit<'_>, seed: u64) -> Result<Self> {
        plan.validate()?;
        let model = match init {
            StageInit::Fresh { config, seed } => {
                if plan.stage == 2 {
                    return Err(Error::config("stage 2 requires a stage-1 checkpoint"));
                }
                SegmentationModel::new(&config, seed)?
            }
            StageInit::From(ckpt) => {
                if plan.stage == 2 && ckpt.stage() != Some(1) {
                    return Err(Error::config("stage 2 requires a stage-1 checkpoint"));
                }
                ckpt.build_model(None)?
            }
        };
        let groups = build_param_groups(&model, &plan)?;
        Ok(Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + plan.stage as u64)),
            plan,
            sgd: Sgd::default(),
            step: 0,
            groups,
        })
    }

    /// Continue an interrupted stage exactly where its checkpoint left off.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let plan = ckpt
            .stage_plan
            .clone()
            .ok_or_else(|| Error::data("checkpoint carries no stage plan to resume"))?;
        let rng = ckpt
            .rng
            .clone()
            .ok_or_else(|| Error::data("checkpoint carries no RNG state to resume"))?;
        plan.validate()?;
        let model = ckpt.build_model(None)?;
        let groups = build_param_groups(&model, &plan)?;
        Ok(Self {
            model,
            plan,
            sgd: Sgd {
                buffers: ckpt.momentum.clone(),
            },
            rng,
            step: ckpt.step,
            groups,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.plan.steps
    }

    pub fn current_lrs(&self) -> Result<(f64, f64)> {
        let p = &self.plan;
        Ok((
            lr_schedule(self.step, p.steps, p.lr_context, p.lr_policy)?,
            lr_schedule(self.step, p.steps, p.lr_other, p.lr_policy)?,
        ))
    }

    /// One optimizer step. On any error the weights, buffers and step count
    /// are left as they were before the call.
    pub fn train_step(&mut self, data: &[FrameClip]) -> Result<HistoryRecord> {
        let (lr_c, lr_o) = self.current_lrs()?;
        let mut rng = self.rng.clone();
        let batch = sample_batch(data, &self.plan, &self.model.config, &mut rng)?;
        let (loss, ctx) = batch_loss(&self.model, &batch, &self.plan)?;
        let loss_v = scalar(&loss)?;
        if !loss_v.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite loss {loss_v} at stage {} step {}",
                self.plan.stage, self.step
            )));
        }
        let grads = loss.backward()?;
        let groups: Vec<(ParamGroup, f64)> = self
            .groups
            .iter()
            .map(|g| {
                let lr = if g.group == Group::Context { lr_c } else { lr_o };
                (g.clone(), lr)
            })
            .collect();
        self.sgd.step(
            &self.model,
            &grads,
            &groups,
            self.plan.momentum,
            self.plan.weight_decay,
        )?;
        ctx.apply_bn_updates()?;
        self.rng = rng;
        self.step += 1;
        Ok(HistoryRecord {
            stage: self.plan.stage,
            step: self.step,
            loss: loss_v,
            lr_context: lr_c,
            lr_other: lr_o,
            val_miou: None,
        })
    }

    /// Run the remaining steps, validating every `val_every` steps and at the
    /// end when a validation set is given.
    pub fn run(
        &mut self,
        data: &[FrameClip],
        val: Option<&[FrameClip]>,
        mut on_record: impl FnMut(&HistoryRecord),
    ) -> Result<Vec<HistoryRecord>> {
        let mut history = Vec::new();
        while !self.is_done() {
            let mut rec = self.train_step(data)?;
            if let Some(val) = val {
                let every = self.plan.val_every;
                if (every > 0 && self.step % every == 0) || self.is_done() {
                    rec.val_miou = Some(evaluate(&self.model, val)?.miou()?.miou);
                }
            }
            on_record(&rec);
            history.push(rec);
        }
        Ok(history)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(
            &self.model,
            Some(&self.plan),
            self.step,
            Some(&self.rng),
            &self.sgd.buffers,
        )
    }
}

/// Train one stage from `init` to completion.
pub fn train_stage(
    plan: &StagePlan,
    data: &[FrameClip],
    val: Option<&[FrameClip]>,
    init: StageInit<'_>,
    seed: u64,
) -> Result<(Checkpoint, Vec<HistoryRecord>)> {
    let mut trainer = Trainer::new(plan.clone(), init, seed)?;
    let history = trainer.run(data, val, |r| {
        log::debug!("stage {} step {} loss {:.5}", r.stage, r.step, r.loss)
    })?;
    Ok((trainer.checkpoint()?, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DatasetSpec};
    use crate::nn::{device, to_vec_f64};

    fn tiny_data(n: usize) -> Vec<FrameClip> {
        generate_dataset(&DatasetSpec {
            num_clips: n,
            frames_per_clip: 10,
            height: 32,
            width: 32,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    fn tiny_plan(stage: u8) -> StagePlan {
        let mut p = if stage == 1 {
            StagePlan::stage1()
        } else {
            StagePlan::stage2()
        };
        p.crop = [32, 32];
        p.batch_size = 2;
        p.steps = 2;
        p
    }

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &device()).unwrap()
    }

    #[test]
    fn poly_and_constant_schedules() {
        assert_eq!(lr_schedule(7, 10, 0.002, LrPolicy::Constant).unwrap(), 0.002);
        assert_eq!(lr_schedule(0, 10, 0.002, LrPolicy::Poly).unwrap(), 0.002);
        let half = lr_schedule(500, 1000, 0.002, LrPolicy::Poly).unwrap();
        assert!((half - 0.001071773).abs() < 1e-6, "{half}");
        assert_eq!(lr_schedule(10, 10, 0.002, LrPolicy::Poly).unwrap(), 0.0);
        assert!(matches!("cosine".parse::<LrPolicy>(), Err(Error::Config(_))));
        assert!(lr_schedule(11, 10, 0.1, LrPolicy::Constant).is_err());
    }

    #[test]
    fn sgd_plain_step() {
        let (p, _) = sgd_update(&t(&[1.0, 2.0]), &t(&[0.5, -1.0]), None, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(to_vec_f64(&p).unwrap(), vec![0.95, 2.1]);
        let (p, _) = sgd_update(&t(&[1.0, 2.0]), &t(&[0.0, 0.0]), None, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(to_vec_f64(&p).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn sgd_momentum_unrolled() {
        let (g, lr) = (0.3, 0.1);
        let p0 = t(&[1.0]);
        let (p1, b1) = sgd_update(&p0, &t(&[g]), None, lr, 0.9, 0.0).unwrap();
        let (p2, _) = sgd_update(&p1, &t(&[g]), Some(&b1), lr, 0.9, 0.0).unwrap();
        let moved = 1.0 - to_vec_f64(&p2).unwrap()[0];
        assert!((moved - lr * g * (1.0 + 1.9)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_buffer() {
        let (p, b) = sgd_update(&t(&[2.0]), &t(&[0.0]), None, 0.5, 0.9, 0.1).unwrap();
        assert_eq!(to_vec_f64(&b).unwrap(), vec![0.2]);
        assert_eq!(to_vec_f64(&p).unwrap(), vec![1.9]);
    }

    #[test]
    fn plan_invariants() {
        assert!(StagePlan::stage1().validate().is_ok());
        assert!(StagePlan::stage2().validate().is_ok());
        let mut p = StagePlan::stage1();
        p.lr_other = 0.001;
        assert!(p.validate().is_err());
        let mut p = StagePlan::stage1();
        p.loss = LossKind::OhemCe;
        assert!(p.validate().is_err());
        let mut p = StagePlan::stage2();
        p.loss = LossKind::Ce;
        assert!(p.validate().is_err());
        let mut p = StagePlan::stage2();
        p.stage = 3;
        assert!(p.validate().is_err());
    }

    #[test]
    fn param_groups_partition() {
        let model = SegmentationModel::new(&ModelConfig::toy(4, Variant::Temporal), 0).unwrap();
        let groups = build_param_groups(&model, &StagePlan::stage2()).unwrap();
        let n: usize = groups.iter().map(|g| g.names.len()).sum();
        assert_eq!(n, model.store.params().len());
        let ctx = &groups[0];
        assert_eq!(ctx.lr, 0.0002);
        assert!(ctx.names.iter().all(|n| n.starts_with("backbone.") || n.starts_with("context.")));
        assert!(ctx.names.iter().any(|n| n.starts_with("backbone.")));
        assert_eq!(groups[1].lr, 0.0005);
        assert!(groups[1].names.iter().any(|n| n.starts_with("temporal_head.")));
        let s1 = build_param_groups(&model, &StagePlan::stage1()).unwrap();
        assert!(s1.iter().all(|g| g.lr == 0.002));
        assert!(matches!(classify_param("mystery.weight"), Err(Error::Config(_))));
    }

    #[test]
    fn stage2_needs_stage1_checkpoint() {
        let fresh = StageInit::Fresh {
            config: ModelConfig::toy(4, Variant::SingleFrame),
            seed: 0,
        };
        assert!(matches!(
            Trainer::new(tiny_plan(2), fresh, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let init = StageInit::Fresh {
            config: ModelConfig::toy(4, Variant::SingleFrame),
            seed: 0,
        };
        let mut tr = Trainer::new(tiny_plan(1), init, 0).unwrap();
        assert!(matches!(tr.train_step(&[]), Err(Error::Config(_))));
        assert_eq!(tr.step, 0);
    }

    #[test]
    fn zero_steps_leave_weights_untouched() {
        let cfg = ModelConfig::toy(4, Variant::SingleFrame);
        let mut plan = tiny_plan(1);
        plan.steps = 0;
        let init = StageInit::Fresh {
            config: cfg.clone(),
            seed: 5,
        };
        let (ckpt, hist) = train_stage(&plan, &tiny_data(1), None, init, 1).unwrap();
        assert!(hist.is_empty());
        let fresh = SegmentationModel::new(&cfg, 5).unwrap();
        let restored = ckpt.build_model(Some(&cfg)).unwrap();
        for (name, var) in fresh.store.params() {
            let a = to_vec_f64(var.as_tensor()).unwrap();
            let b = to_vec_f64(restored.store.params()[name].as_tensor()).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn every_group_receives_gradient() {
        let data = tiny_data(2);
        let plan = tiny_plan(1);
        for variant in [Variant::SingleFrame, Variant::Temporal] {
            let cfg = ModelConfig::toy(4, variant);
            let model = SegmentationModel::new(&cfg, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let batch = sample_batch(&data, &plan, &cfg, &mut rng).unwrap();
            let (loss, _) = batch_loss(&model, &batch, &plan).unwrap();
            let grads = loss.backward().unwrap();
            let mut nonzero: BTreeMap<&str, bool> = BTreeMap::new();
            for (name, var) in model.store.params() {
                let root = name.split('.').next().unwrap();
                let nz = grads
                    .get(var)
                    .map(|g| scalar(&g.abs().unwrap().sum_all().unwrap()).unwrap() > 0.0)
                    .unwrap_or(false);
                *nonzero.entry(root).or_default() |= nz;
            }
            let expected_head = if variant == Variant::Temporal { "temporal_head" } else { "head" };
            for root in ["backbone", "context", "spatial", "ffm", expected_head] {
                assert_eq!(nonzero.get(root), Some(&true), "{variant}: {root}");
            }
            assert!(!nonzero.contains_key(if variant == Variant::Temporal { "head" } else { "temporal_head" }));
        }
    }

    #[test]
    fn group_isolation() {
        let data = tiny_data(1);
        let cfg = ModelConfig::toy(4, Variant::SingleFrame);
        let stage1 = {
            let init = StageInit::Fresh { config: cfg.clone(), seed: 3 };
            let mut p = tiny_plan(1);
            p.steps = 1;
            train_stage(&p, &data, None, init, 0).unwrap().0
        };
        let probe = "backbone.patch_embed.proj.weight";
        let mut moved = Vec::new();
        for lr_other in [0.0005, 0.05] {
            let mut plan = tiny_plan(2);
            plan.steps = 1;
            plan.lr_other = lr_other;
            let mut tr = Trainer::new(plan, StageInit::From(&stage1), 9).unwrap();
            let before = to_vec_f64(tr.model.store.params()[probe].as_tensor()).unwrap();
            tr.train_step(&data).unwrap();
            let after = to_vec_f64(tr.model.store.params()[probe].as_tensor()).unwrap();
            moved.push(before.iter().zip(&after).map(|(a, b)| a - b).collect::<Vec<_>>());
        }
        assert_eq!(moved[0], moved[1]);
        assert!(moved[0].iter().any(|d| *d != 0.0));
    }

    #[test]
    fn temporal_batch_shares_crop() {
        let data = tiny_data(1);
        let mut plan = tiny_plan(1);
        plan.crop = [16, 16];
        let cfg = ModelConfig::toy(4, Variant::Temporal);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = sample_batch(&data, &plan, &cfg, &mut rng).unwrap();
        assert_eq!(batch.references.len(), 3);
        for r in &batch.references {
            assert_eq!(r.dims(), batch.images.dims());
        }
        assert_eq!(batch.labels.len(), 2 * 16 * 16);
    }
}
