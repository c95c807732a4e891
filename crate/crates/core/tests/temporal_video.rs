mod common;

use candle_core::Tensor;
use vidseg::datagen::{frames_to_tensor, generate_clip, DatasetSpec, FrameClip};
use vidseg::metrics::ConfusionMatrix;
use vidseg::model::{ModelConfig, SegmentationModel, Variant};
use vidseg::nn::{to_vec_f64, Ctx};
use vidseg::temporal::{forward_video, select_reference_indices, temporal_average, FeatureCache};
use vidseg::trainer::evaluate;
use vidseg::Error;

fn spec() -> DatasetSpec {
    DatasetSpec {
        num_clips: 8,
        height: 32,
        width: 32,
        ..DatasetSpec::default()
    }
}

fn model(variant: Variant) -> SegmentationModel {
    SegmentationModel::new(&ModelConfig::toy(4, variant), 3).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    let (a, b) = (to_vec_f64(a).unwrap(), to_vec_f64(b).unwrap());
    assert_eq!(a.len(), b.len());
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn cache_does_not_change_logits() {
    let m = model(Variant::Temporal);
    let clip = generate_clip(&spec(), 0).unwrap();
    let mut cache = FeatureCache::for_config(&m.config.temporal);
    let cached = forward_video(&clip, &m, Some(&mut cache)).unwrap();
    let plain = forward_video(&clip, &m, None).unwrap();
    for (a, b) in cached.iter().zip(&plain) {
        assert_eq!(max_abs_diff(a, b), 0.0);
    }
}

#[test]
fn warm_cache_runs_each_frame_once() {
    let m = model(Variant::Temporal);
    let clip = generate_clip(&spec(), 1).unwrap();
    assert_eq!(clip.len(), 12);
    let mut cache = FeatureCache::for_config(&m.config.temporal);
    m.reset_forward_count();
    forward_video(&clip, &m, Some(&mut cache)).unwrap();
    assert_eq!(m.forward_count(), 12);
    m.reset_forward_count();
    forward_video(&clip, &m, None).unwrap();
    assert_eq!(m.forward_count(), 48);
}

#[test]
fn temporal_logits_use_the_reference_average() {
    let m = model(Variant::Temporal);
    let clip = generate_clip(&spec(), 2).unwrap();
    let logits = forward_video(&clip, &m, None).unwrap();
    let ctx = Ctx::eval();
    let fused = |t: usize| m.fused(&frames_to_tensor(&[&clip.frames[t]]).unwrap(), &ctx).unwrap();
    for t in [0, 4, 11] {
        let refs: Vec<_> = select_reference_indices(t, &m.config.temporal)
            .into_iter()
            .map(fused)
            .collect();
        let avg = temporal_average(&refs).unwrap();
        let want = m.temporal_classify(&fused(t), &avg, 32, 32, &ctx).unwrap();
        assert!(max_abs_diff(&logits[t], &want) < 1e-12);
    }
}

#[test]
fn single_frame_clip_and_repeated_frames() {
    let m = model(Variant::Temporal);
    let clip = generate_clip(&spec(), 0).unwrap();
    let one = FrameClip {
        clip_id: "one".into(),
        frames: clip.frames[..1].to_vec(),
        labels: clip.labels[..1].to_vec(),
        fps: clip.fps,
    };
    assert_eq!(forward_video(&one, &m, None).unwrap().len(), 1);
    let same = FrameClip {
        clip_id: "same".into(),
        frames: vec![clip.frames[3].clone(); 10],
        labels: vec![clip.labels[3].clone(); 10],
        fps: clip.fps,
    };
    let logits = forward_video(&same, &m, None).unwrap();
    for l in &logits[1..] {
        assert_eq!(max_abs_diff(l, &logits[0]), 0.0);
    }
    let empty = FrameClip {
        clip_id: "empty".into(),
        frames: vec![],
        labels: vec![],
        fps: 1.0,
    };
    assert!(matches!(forward_video(&empty, &m, None), Err(Error::Data(_))));
}

#[test]
fn averaging_damps_a_scene_cut() {
    let m = model(Variant::Temporal);
    let (a, b) = (generate_clip(&spec(), 3).unwrap(), generate_clip(&spec(), 4).unwrap());
    let cut = 6;
    let frames: Vec<_> = a.frames[..cut].iter().chain(&b.frames[cut..]).cloned().collect();
    let ctx = Ctx::eval();
    let fused: Vec<Tensor> = frames
        .iter()
        .map(|f| m.fused(&frames_to_tensor(&[f]).unwrap(), &ctx).unwrap().data)
        .collect();
    let temporal = |t: usize| {
        let refs: Vec<_> = select_reference_indices(t, &m.config.temporal)
            .into_iter()
            .map(|i| vidseg::FeatureMap::new(fused[i].clone(), 8))
            .collect();
        temporal_average(&refs).unwrap().data
    };
    let l2 = |x: &Tensor, y: &Tensor| {
        let (x, y) = (to_vec_f64(x).unwrap(), to_vec_f64(y).unwrap());
        x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
    };
    let jump_fused = l2(&fused[cut - 1], &fused[cut]);
    let jump_temporal = l2(&temporal(cut - 1), &temporal(cut));
    assert!(jump_temporal < jump_fused, "{jump_temporal} vs {jump_fused}");
}

/// With the temporal half of the head's input weights zeroed, the temporal
/// model is the single-frame model with the remaining head weights.
#[test]
fn zeroed_temporal_branch_matches_single_frame() {
    let t = model(Variant::Temporal);
    let s = model(Variant::SingleFrame);
    let fc = t.config.fusion_channels;
    let w_name = "temporal_head.conv.conv.weight";
    let w = t.store.get(w_name).unwrap().as_tensor().clone();
    let kept = w.narrow(1, 0, fc).unwrap();
    let zeros = kept.zeros_like().unwrap();
    t.store
        .assign(w_name, &Tensor::cat(&[&kept, &zeros], 1).unwrap())
        .unwrap();
    for (name, var) in s.store.params().iter().chain(s.store.buffers()) {
        let src = match name.strip_prefix("head.") {
            Some(rest) => format!("temporal_head.{rest}"),
            None => name.clone(),
        };
        let mut v = t.store.get(&src).unwrap().as_tensor().clone();
        if v.dims() != var.dims() {
            v = v.narrow(1, 0, var.dims()[1]).unwrap();
        }
        s.store.assign(name, &v).unwrap();
    }
    let clip = generate_clip(&spec(), 5).unwrap();
    let lt = forward_video(&clip, &t, None).unwrap();
    let ls = forward_video(&clip, &s, None).unwrap();
    for (a, b) in lt.iter().zip(&ls) {
        assert!(max_abs_diff(a, b) < 1e-12);
    }
}

#[test]
fn sharded_evaluation_matches_unsharded() {
    let m = model(Variant::Temporal);
    let clips = vidseg::datagen::generate_dataset(&spec()).unwrap();
    let whole = evaluate(&m, &clips).unwrap();
    let mut merged = ConfusionMatrix::new(4);
    for shard in clips.chunks(3) {
        merged.merge(&evaluate(&m, shard).unwrap()).unwrap();
    }
    assert_eq!(merged, whole);
}
