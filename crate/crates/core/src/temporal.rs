//! Temporal context: fused features of the frames 3, 6 and 9 steps back are
//! averaged and concatenated with the current frame's features before
//! classification.

use std::num::NonZeroUsize;

use candle_core::Tensor;
use lru::LruCache;
use serde::{Deserialize, Serialize};

use crate::datagen::{frames_to_tensor, FrameClip};
use crate::error::{Error, Result};
use crate::model::{SegmentationModel, Variant};
use crate::nn::Ctx;
use crate::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPolicy {
    /// Indices before the first frame clamp to frame 0; duplicates stay.
    #[default]
    ClampToFirst,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalConfig {
    pub offsets: Vec<usize>,
    #[serde(default)]
    pub boundary_policy: BoundaryPolicy,
    pub stop_gradient_references: bool,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            offsets: vec![3, 6, 9],
            boundary_policy: BoundaryPolicy::ClampToFirst,
            stop_gradient_references: true,
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.offsets.is_empty() {
            return Err(Error::config("temporal offsets must not be empty"));
        }
        if self.offsets[0] < 1 || self.offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "temporal offsets must be strictly increasing and >= 1, got {:?}",
                self.offsets
            )));
        }
        Ok(())
    }

    pub fn max_offset(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0)
    }
}

/// Reference frame indices for frame `t`, one per offset.
pub fn select_reference_indices(t: usize, cfg: &TemporalConfig) -> Vec<usize> {
    match cfg.boundary_policy {
        BoundaryPolicy::ClampToFirst => cfg.offsets.iter().map(|&o| t.saturating_sub(o)).collect(),
    }
}

/// Elementwise mean. Each element's values are sorted before summing, so the
/// result does not depend on the argument order, bit for bit.
pub fn temporal_average(features: &[FeatureMap]) -> Result<FeatureMap> {
    let first = features
        .first()
        .ok_or_else(|| Error::contract("temporal average of zero feature maps"))?;
    for f in &features[1..] {
        if f.dims() != first.dims() {
            return Err(Error::contract(format!(
                "temporal average shape mismatch: {:?} vs {:?}",
                first.dims(),
                f.dims()
            )));
        }
    }
    let mut xs: Vec<Tensor> = features.iter().map(|f| f.data.clone()).collect();
    let n = xs.len();
    // odd-even transposition sort, elementwise
    for round in 0..n {
        for i in (round % 2..n.saturating_sub(1)).step_by(2) {
            let lo = xs[i].minimum(&xs[i + 1])?;
            let hi = xs[i].maximum(&xs[i + 1])?;
            xs[i] = lo;
            xs[i + 1] = hi;
        }
    }
    let mut sum = xs[0].clone();
    for x in &xs[1..] {
        sum = (sum + x)?;
    }
    Ok(FeatureMap::new((sum / n as f64)?, first.stride))
}

/// LRU cache of eval-mode fused features keyed by `(clip_id, frame)`.
///
/// Entries are only valid for fixed weights; clear it after any update.
pub struct FeatureCache {
    inner: LruCache<(String, usize), FeatureMap>,
    hits: usize,
    misses: usize,
}

impl std::fmt::Debug for FeatureCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureCache")
            .field("len", &self.inner.len())
            .field("capacity", &self.inner.cap())
            .field("hits", &self.hits)
            .field("misses", &self.misses)
            .finish()
    }
}

impl FeatureCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: LruCache::new(NonZeroUsize::new(capacity.max(1)).unwrap()),
            hits: 0,
            misses: 0,
        }
    }

    /// Capacity that lets a sequential pass compute every frame once: frames
    /// touched between two uses of one frame lie within `max_offset` of it.
    pub fn for_config(cfg: &TemporalConfig) -> Self {
        Self::new(2 * cfg.max_offset() + 1)
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn misses(&self) -> usize {
        self.misses
    }

    pub fn clear(&mut self) {
        self.inner.clear();
    }

    pub fn get_or_compute(
        &mut self,
        clip_id: &str,
        frame: usize,
        compute: impl FnOnce() -> Result<FeatureMap>,
    ) -> Result<FeatureMap> {
        let key = (clip_id.to_string(), frame);
        if let Some(f) = self.inner.get(&key) {
            self.hits += 1;
            return Ok(f.clone());
        }
        self.misses += 1;
        let f = compute()?;
        self.inner.put(key, f.clone());
        Ok(f)
    }
}

/// Eval-mode logits `[1, K, H, W]` for every frame of a clip.
///
/// For the temporal variant each frame's logits come from its own fused
/// features and the average of its references' fused features, all produced
/// by the same weights. With a cache, each frame runs through the network
/// once. The single-frame variant classifies frames independently.
pub fn forward_video(
    clip: &FrameClip,
    model: &SegmentationModel,
    mut cache: Option<&mut FeatureCache>,
) -> Result<Vec<Tensor>> {
    if clip.is_empty() {
        return Err(Error::data(format!("clip `{}` has no frames", clip.clip_id)));
    }
    let ctx = Ctx::eval();
    let (h, w) = (clip.height(), clip.width());
    let fused_of = |t: usize, cache: &mut Option<&mut FeatureCache>| -> Result<FeatureMap> {
        let compute = || model.fused(&frames_to_tensor(&[&clip.frames[t]])?, &ctx);
        match cache {
            Some(c) => c.get_or_compute(&clip.clip_id, t, compute),
            None => compute(),
        }
    };
    let tcfg = &model.config.temporal;
    let mut out = Vec::with_capacity(clip.len());
    for t in 0..clip.len() {
        let current = fused_of(t, &mut cache)?;
        let logits = match model.variant() {
            Variant::SingleFrame => model.classify_single(&current, h, w, &ctx)?,
            Variant::Temporal => {
                let refs = select_reference_indices(t, tcfg)
                    .into_iter()
                    .map(|i| fused_of(i, &mut cache))
                    .collect::<Result<Vec<_>>>()?;
                let temporal = temporal_average(&refs)?;
                model.temporal_classify(&current, &temporal, h, w, &ctx)?
            }
        };
        out.push(logits);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{device, to_vec_f64};

    fn fm(v: Vec<f64>) -> FeatureMap {
        let n = v.len();
        FeatureMap::new(Tensor::from_vec(v, (1, n, 1, 1), &device()).unwrap(), 8)
    }

    #[test]
    fn reference_indices() {
        let cfg = TemporalConfig::default();
        assert_eq!(select_reference_indices(9, &cfg), vec![6, 3, 0]);
        assert_eq!(select_reference_indices(20, &cfg), vec![17, 14, 11]);
        assert_eq!(select_reference_indices(2, &cfg), vec![0, 0, 0]);
        assert_eq!(select_reference_indices(0, &cfg), vec![0, 0, 0]);
    }

    #[test]
    fn offsets_schedule_exhaustive() {
        let cfg = TemporalConfig::default();
        for t in 9..=1000 {
            assert_eq!(select_reference_indices(t, &cfg), vec![t - 3, t - 6, t - 9]);
        }
    }

    #[test]
    fn offsets_must_be_increasing() {
        let mut cfg = TemporalConfig::default();
        cfg.offsets = vec![3, 3, 9];
        assert!(cfg.validate().is_err());
        cfg.offsets = vec![0, 3];
        assert!(cfg.validate().is_err());
        cfg.offsets = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn average_of_identical_and_sparse_maps() {
        let f = fm(vec![1.5, -2.0, 0.25]);
        let avg = temporal_average(&[f.clone(), f.clone(), f.clone()]).unwrap();
        assert_eq!(to_vec_f64(&avg.data).unwrap(), vec![1.5, -2.0, 0.25]);
        let z = fm(vec![0.0; 3]);
        let x = fm(vec![3.0, 6.0, -9.0]);
        let avg = temporal_average(&[z.clone(), z, x]).unwrap();
        assert_eq!(to_vec_f64(&avg.data).unwrap(), vec![1.0, 2.0, -3.0]);
    }

    #[test]
    fn average_shape_mismatch() {
        let a = fm(vec![0.0; 3]);
        let b = fm(vec![0.0; 4]);
        assert!(matches!(
            temporal_average(&[a.clone(), b, a]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(temporal_average(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn cache_counts_hits_and_evicts() {
        let mut cache = FeatureCache::new(2);
        for i in [0, 1, 0, 2, 1] {
            cache
                .get_or_compute("c", i, || Ok(fm(vec![i as f64])))
                .unwrap();
        }
        // 0 miss, 1 miss, 0 hit, 2 miss (evicts 1), 1 miss
        assert_eq!((cache.hits(), cache.misses()), (1, 4));
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn average_matches_elementwise_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let k = rng.random_range(1..5);
            let maps: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..n).map(|_| rng.random_range(-5.0..5.0)).collect())
                .collect();
            let got = temporal_average(&maps.iter().cloned().map(fm).collect::<Vec<_>>()).unwrap();
            let got = to_vec_f64(&got.data).unwrap();
            for i in 0..n {
                let want = maps.iter().map(|m| m[i]).sum::<f64>() / k as f64;
                assert!((got[i] - want).abs() < 1e-12);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn sequential_pass_misses_each_frame_once(
            offsets in proptest::collection::btree_set(1usize..20, 1..5),
            len in 1usize..60,
        ) {
            let cfg = TemporalConfig {
                offsets: offsets.into_iter().collect(),
                ..TemporalConfig::default()
            };
            let mut cache = FeatureCache::for_config(&cfg);
            for t in 0..len {
                for i in std::iter::once(t).chain(select_reference_indices(t, &cfg)) {
                    cache.get_or_compute("c", i, || Ok(fm(vec![i as f64]))).unwrap();
                }
            }
            proptest::prop_assert_eq!(cache.misses(), len);
        }
    }

    #[test]
    fn average_ignores_argument_order_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let maps: Vec<FeatureMap> = (0..3)
                .map(|_| fm((0..16).map(|_| rng.random_range(-1e3..1e3)).collect()))
                .collect();
            let a = temporal_average(&maps).unwrap();
            let b = temporal_average(&[maps[2].clone(), maps[0].clone(), maps[1].clone()]).unwrap();
            let c = temporal_average(&[maps[1].clone(), maps[2].clone(), maps[0].clone()]).unwrap();
            let bits = |f: &FeatureMap| -> Vec<u64> {
                to_vec_f64(&f.data).unwrap().iter().map(|v| v.to_bits()).collect()
            };
            assert_eq!(bits(&a), bits(&b));
            assert_eq!(bits(&a), bits(&c));
        }
    }

    #[test]
    fn average_gradient_is_one_over_n_even_with_ties() {
        use candle_core::Var;
        let a = Var::from_tensor(&Tensor::new(&[[[[1.0f64]], [[2.0]]]], &device()).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::new(&[[[[1.0f64]], [[-3.0]]]], &device()).unwrap()).unwrap();
        let fa = FeatureMap::new(a.as_tensor().clone(), 8);
        let fb = FeatureMap::new(b.as_tensor().clone(), 8);
        let avg = temporal_average(&[fa.clone(), fb, fa]).unwrap();
        let grads = avg.data.sum_all().unwrap().backward().unwrap();
        let ga = to_vec_f64(grads.get(a.as_tensor()).unwrap()).unwrap();
        let gb = to_vec_f64(grads.get(b.as_tensor()).unwrap()).unwrap();
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - 2.0 / 3.0).abs() < 1e-12 && (y - 1.0 / 3.0).abs() < 1e-12, "{ga:?} {gb:?}");
        }
    }
}
