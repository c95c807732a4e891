//! Command implementations behind the `vidseg` binary. Each command is a
//! plain function of an [`ExperimentConfig`] and explicit paths, so it can be
//! driven from tests and examples as well as from the command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, ExperimentConfig, Split};
use crate::datagen::{class_color, export_vspw, write_mask, ClipDescriptor, FrameClip, LabelMap};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics::MiouReport;
use crate::model::Variant;
use crate::plot::{plot_histories, write_history};
use crate::trainer::{evaluate, predict_clip, HistoryRecord, StageInit, StagePlan, Trainer};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenSummary {
    pub clips: usize,
    pub frames: usize,
}

/// Render the synthetic train and validation splits as a VSPW-layout tree.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<GenSummary> {
    if cfg.dataset.source != DataSource::Synthetic {
        return Err(Error::config("gen-data needs dataset.source = \"synthetic\""));
    }
    cfg.dataset.synthetic.validate()?;
    let (train, val) = cfg.synthetic_clips()?;
    export_vspw(&train, out_dir, &cfg.dataset.train_split)?;
    export_vspw(&val, out_dir, &cfg.dataset.val_split)?;
    Ok(GenSummary {
        clips: train.len() + val.len(),
        frames: train.iter().chain(&val).map(FrameClip::len).sum(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub histories: Vec<PathBuf>,
    pub final_checkpoint: Checkpoint,
}

/// Run one stage to completion, streaming its history to `history_path`.
/// On failure the last good state is saved next to the regular checkpoint.
fn run_stage(
    mut trainer: Trainer,
    train: &[FrameClip],
    val: Option<&[FrameClip]>,
    ckpt_path: &Path,
    history_path: &Path,
    mut history: Vec<HistoryRecord>,
) -> Result<Checkpoint> {
    let total = trainer.plan.steps;
    let result = trainer.run(train, val, |r| {
        log::info!(
            "stage {} step {}/{total} loss {:.5}{}",
            r.stage,
            r.step,
            r.loss,
            r.val_miou.map(|m| format!(" val mIoU {m:.4}")).unwrap_or_default()
        );
        history.push(r.clone());
    });
    write_history(history_path, &history)?;
    if let Err(e) = result {
        let last_good = ckpt_path.with_extension("last_good.safetensors");
        trainer.checkpoint()?.save(&last_good)?;
        log::error!("training aborted; last good state saved to {}", last_good.display());
        return Err(e);
    }
    let ckpt = trainer.checkpoint()?;
    ckpt.save(ckpt_path)?;
    Ok(ckpt)
}

fn stage_paths(out: &Path, stage: u8) -> (PathBuf, PathBuf) {
    (
        out.join(format!("stage{stage}.safetensors")),
        out.join(format!("history_stage{stage}.jsonl")),
    )
}

/// Train stage 1, then stage 2 when enabled. With `resume`, continue the
/// interrupted stage stored in that checkpoint and carry on from there.
pub fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    ensure_dir(out)?;
    let snapshot = out.join("config.toml");
    std::fs::write(&snapshot, cfg.to_toml_string()?).map_err(|e| Error::io(&snapshot, e))?;
    let train = cfg.load_split(Split::Train)?;
    let val = cfg.load_split(Split::Val)?;
    let val = (!val.is_empty()).then_some(val.as_slice());

    let mut checkpoints = Vec::new();
    let mut histories = Vec::new();
    let resumed = resume.map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resumed {
        if ck.model_config != cfg.model {
            return Err(Error::config("resume checkpoint was trained with a different model config"));
        }
    }
    let resume_stage = resumed.as_ref().and_then(Checkpoint::stage);

    let mut last = match (&resumed, resume_stage) {
        (Some(ck), Some(2)) => ck.clone(),
        _ => {
            let (ck_path, hist_path) = stage_paths(out, 1);
            let (trainer, prior) = match &resumed {
                Some(ck) => (Trainer::resume(ck)?, prior_history(&hist_path, ck.step)?),
                None => (
                    Trainer::new(
                        cfg.stage1.clone(),
                        StageInit::Fresh {
                            config: cfg.model.clone(),
                            seed: cfg.seed,
                        },
                        cfg.seed,
                    )?,
                    Vec::new(),
                ),
            };
            let ck = run_stage(trainer, &train, val, &ck_path, &hist_path, prior)?;
            checkpoints.push(ck_path);
            histories.push(hist_path);
            ck
        }
    };
    if cfg.two_stage {
        let (ck_path, hist_path) = stage_paths(out, 2);
        let (trainer, prior) = match (&resumed, resume_stage) {
            (Some(ck), Some(2)) => (Trainer::resume(ck)?, prior_history(&hist_path, ck.step)?),
            _ => (
                Trainer::new(cfg.stage2.clone(), StageInit::From(&last), cfg.seed)?,
                Vec::new(),
            ),
        };
        last = run_stage(trainer, &train, val, &ck_path, &hist_path, prior)?;
        checkpoints.push(ck_path);
        histories.push(hist_path);
    }
    Ok(TrainOutcome {
        checkpoints,
        histories,
        final_checkpoint: last,
    })
}

/// History records up to `step` from an earlier, interrupted run.
fn prior_history(path: &Path, step: usize) -> Result<Vec<HistoryRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(crate::plot::read_history(path)?
        .into_iter()
        .filter(|r| r.step <= step)
        .collect())
}

/// Human-readable evaluation report; classes absent from both predictions
/// and labels are marked as excluded from the mean.
pub fn format_report(report: &MiouReport, split: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "split: {split}");
    let _ = writeln!(s, "{:<8} {:>8}", "class", "IoU");
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => {
                let _ = writeln!(s, "{c:<8} {v:>8.4}");
            }
            None => {
                let _ = writeln!(s, "{c:<8} {:>8}", "excluded");
            }
        }
    }
    let _ = writeln!(s, "mIoU: {:.4}", report.miou);
    s
}

/// The same report as `key=value` lines: `miou`, `iou.<class>` for every
/// scored class and a comma-separated `excluded` list.
pub fn format_report_kv(report: &MiouReport, split: &str) -> String {
    let mut s = format!("split={split}\nmiou={:.17}\n", report.miou);
    for (c, iou) in report.per_class.iter().enumerate() {
        if let Some(v) = iou {
            let _ = writeln!(s, "iou.{c}={v:.17}");
        }
    }
    let ex: Vec<String> = report.excluded.iter().map(usize::to_string).collect();
    let _ = writeln!(s, "excluded={}", ex.join(","));
    s
}

fn eval_clips(cfg: &ExperimentConfig, ckpt: &Checkpoint, clips: &[FrameClip]) -> Result<MiouReport> {
    let model = ckpt.build_model(Some(&cfg.model))?;
    evaluate(&model, clips)?.miou()
}

/// Evaluate a checkpoint on one split and write `eval_<split>.txt` and
/// `eval_<split>.kv`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, split: Split) -> Result<MiouReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let clips = cfg.load_split(split)?;
    if clips.is_empty() {
        return Err(Error::data("evaluation split has no clips"));
    }
    let report = eval_clips(cfg, &ckpt, &clips)?;
    let name = match split {
        Split::Train => "train",
        Split::Val => "val",
    };
    ensure_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("eval_{name}.txt"));
    std::fs::write(&path, format_report(&report, name)).map_err(|e| Error::io(&path, e))?;
    let kv = path.with_extension("kv");
    std::fs::write(&kv, format_report_kv(&report, name)).map_err(|e| Error::io(&kv, e))?;
    Ok(report)
}

/// Predict every frame of `clip_dir`, writing one mask PNG per frame (named
/// after the frame) and, with `overlay`, a colour-coded blend beside it.
pub fn cmd_predict(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    clip_dir: &Path,
    out_dir: &Path,
    overlay: bool,
) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.build_model(Some(&cfg.model))?;
    let desc = ClipDescriptor::from_dir(clip_dir)?;
    let clip = desc.load(cfg.model.num_classes)?;
    let preds = predict_clip(&model, &clip)?;
    ensure_dir(out_dir)?;
    let (h, w) = (clip.height(), clip.width());
    let k = cfg.model.num_classes;
    let mut written = Vec::with_capacity(preds.len());
    for ((pred, frame_path), frame) in preds.iter().zip(&desc.frame_paths).zip(&clip.frames) {
        let stem = frame_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mask = LabelMap::from_shape_vec((h, w), pred.clone())
            .map_err(|e| Error::contract(e.to_string()))?;
        let path = out_dir.join(format!("{stem}.png"));
        write_mask(&path, &mask)?;
        written.push(path);
        if overlay {
            let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                let col = class_color(mask[[y, x]] as usize, k);
                let px = |c: usize| {
                    ((0.5 * frame[[c, y, x]] + 0.5 * col[c]) * 255.0).round().clamp(0.0, 255.0) as u8
                };
                image::Rgb([px(0), px(1), px(2)])
            });
            let p = out_dir.join(format!("{stem}_overlay.png"));
            img.save(&p)
                .map_err(|e| Error::data(format!("cannot write {}: {e}", p.display())))?;
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub variant: Variant,
    pub loss: LossKind,
    pub miou: f64,
    /// mIoU in hundredths of a percent, the precision the table prints.
    pub miou_centi: i64,
    /// Difference to the previous row in hundredths of a percent.
    pub boost_centi: Option<i64>,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    /// One per row, in row order.
    pub checkpoints: Vec<Checkpoint>,
    /// Training history of each row's stage.
    pub histories: Vec<Vec<HistoryRecord>>,
    /// Wall-clock training time of each row's stage.
    pub train_seconds: Vec<f64>,
}

pub fn to_centi(miou: f64) -> i64 {
    (miou * 10_000.0).round() as i64
}

pub fn format_centi(v: i64) -> String {
    format!("{}.{:02}%", v / 100, v % 100)
}

pub fn format_boost(v: Option<i64>) -> String {
    match v {
        None => "-".into(),
        Some(v) => {
            let sign = if v < 0 { '-' } else { '+' };
            format!("{sign}{}", format_centi(v.abs()))
        }
    }
}

pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(7).max(7);
    let mut s = String::new();
    let _ = writeln!(s, "| {:<width$} | {:>8} | {:>8} |", "Methods", "mIoU", "Boost");
    let _ = writeln!(s, "|{}|{}|{}|", "-".repeat(width + 2), "-".repeat(10), "-".repeat(10));
    for r in rows {
        let _ = writeln!(
            s,
            "| {:<width$} | {:>8} | {:>8} |",
            r.method,
            format_centi(r.miou_centi),
            format_boost(r.boost_centi)
        );
    }
    s
}

fn method_name(variant: Variant, loss: LossKind) -> String {
    let net = match variant {
        Variant::SingleFrame => "Bilateral Network",
        Variant::Temporal => "Temporal Bilateral Network",
    };
    match loss {
        LossKind::Ce => net.to_string(),
        LossKind::OhemCe => format!("{net} + OHEM"),
    }
}

fn train_stage_quiet(
    plan: &StagePlan,
    init: StageInit<'_>,
    seed: u64,
    data: &[FrameClip],
) -> Result<(Checkpoint, Vec<HistoryRecord>)> {
    let mut trainer = Trainer::new(plan.clone(), init, seed)?;
    let history = trainer.run(data, None, |r| {
        if r.step % 100 == 0 {
            log::info!("stage {} step {} loss {:.5}", r.stage, r.step, r.loss)
        }
    })?;
    Ok((trainer.checkpoint()?, history))
}

/// Train the four ablation variants (single-frame and temporal, each with
/// CE and then OHEM fine-tuning) and score them on the validation split.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Ablation> {
    cfg.validate()?;
    let train = cfg.load_split(Split::Train)?;
    let val = cfg.load_split(Split::Val)?;
    if val.is_empty() {
        return Err(Error::config("ablation needs a non-empty validation split"));
    }
    let mut rows: Vec<AblationRow> = Vec::new();
    let mut checkpoints = Vec::new();
    let mut histories = Vec::new();
    let mut train_seconds = Vec::new();
    for variant in [Variant::SingleFrame, Variant::Temporal] {
        let mut model = cfg.model.clone();
        model.variant = variant;
        let mut vcfg = cfg.clone();
        vcfg.model = model.clone();
        log::info!("ablation: {variant} stage 1");
        let clock = std::time::Instant::now();
        let (s1, h1) = train_stage_quiet(
            &cfg.stage1,
            StageInit::Fresh {
                config: model,
                seed: cfg.seed,
            },
            cfg.seed,
            &train,
        )?;
        log::info!("ablation: {variant} stage 2");
        let t1 = clock.elapsed().as_secs_f64();
        let clock = std::time::Instant::now();
        let (s2, h2) = train_stage_quiet(&cfg.stage2, StageInit::From(&s1), cfg.seed, &train)?;
        train_seconds.extend([t1, clock.elapsed().as_secs_f64()]);
        for (ck, hist, loss) in [(s1, h1, LossKind::Ce), (s2, h2, LossKind::OhemCe)] {
            let miou = eval_clips(&vcfg, &ck, &val)?.miou;
            let centi = to_centi(miou);
            rows.push(AblationRow {
                method: method_name(variant, loss),
                variant,
                loss,
                miou,
                miou_centi: centi,
                boost_centi: rows.last().map(|p| centi - p.miou_centi),
            });
            checkpoints.push(ck);
            histories.push(hist);
        }
    }
    Ok(Ablation {
        rows,
        checkpoints,
        histories,
        train_seconds,
    })
}

/// Run the ablation and write `ablation.md`, `ablation.json` and the four
/// checkpoints under the output directory.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Ablation> {
    let ablation = run_ablation(cfg)?;
    let dir = cfg.output_dir.join("ablation");
    ensure_dir(&dir)?;
    for ((row, ck), hist) in ablation.rows.iter().zip(&ablation.checkpoints).zip(&ablation.histories) {
        let tag = match row.loss {
            LossKind::Ce => "ce",
            LossKind::OhemCe => "ohem",
        };
        ck.save(&dir.join(format!("{}_{tag}.safetensors", row.variant)))?;
        write_history(&dir.join(format!("{}_{tag}.jsonl", row.variant)), hist)?;
    }
    let table = cfg.output_dir.join("ablation.md");
    std::fs::write(&table, format_ablation_table(&ablation.rows)).map_err(|e| Error::io(&table, e))?;
    let json = cfg.output_dir.join("ablation.json");
    let text = serde_json::to_string_pretty(&ablation.rows).expect("rows serialize");
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(ablation)
}

pub fn cmd_plot(histories: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if histories.is_empty() {
        return Err(Error::config("plot needs at least one history file"));
    }
    plot_histories(histories, out_dir)
}
