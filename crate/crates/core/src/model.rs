//! The assembled network: spatial path + context path + fusion, with either a
//! single-frame head or a temporal head fed by `[current, temporal average]`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::bilateral::{ContextPath, Ffm, Head, SpatialPath, SpatialPathConfig};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::temporal::TemporalConfig;
use crate::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SingleFrame,
    Temporal,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::SingleFrame => f.write_str("single_frame"),
            Variant::Temporal => f.write_str("temporal"),
        }
    }
}

/// All architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub variant: Variant,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub spatial: SpatialPathConfig,
    #[serde(default = "default_fusion_channels")]
    pub fusion_channels: usize,
    #[serde(default = "default_true")]
    pub use_global_context: bool,
    #[serde(default)]
    pub temporal: TemporalConfig,
}

fn default_fusion_channels() -> usize {
    128
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn toy(num_classes: usize, variant: Variant) -> Self {
        Self {
            num_classes,
            variant,
            backbone: BackboneConfig::toy(),
            spatial: SpatialPathConfig::default(),
            fusion_channels: 128,
            use_global_context: true,
            temporal: TemporalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if self.fusion_channels == 0 {
            return Err(Error::config("fusion_channels must be positive"));
        }
        self.backbone.validate()?;
        self.spatial.validate()?;
        self.temporal.validate()?;
        Ok(())
    }
}

/// The full network. Parameter names follow `spatial.*`, `backbone.*`,
/// `context.*`, `ffm.*`, `head.*` and `temporal_head.*`.
#[derive(Debug)]
pub struct SegmentationModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub spatial: SpatialPath,
    pub context: ContextPath,
    pub ffm: Ffm,
    pub head: Option<Head>,
    pub temporal_head: Option<Head>,
}

impl SegmentationModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let spatial = SpatialPath::new(&mut store, "spatial", &config.spatial)?;
        let context = ContextPath::new(
            &mut store,
            &config.backbone,
            config.fusion_channels,
            config.use_global_context,
        )?;
        let fc = config.fusion_channels;
        let ffm = Ffm::new(&mut store, "ffm", config.spatial.out_channels() + fc, fc)?;
        let (head, temporal_head) = match config.variant {
            Variant::SingleFrame => (
                Some(Head::new(&mut store, "head", fc, fc, config.num_classes)?),
                None,
            ),
            Variant::Temporal => (
                None,
                Some(Head::new(&mut store, "temporal_head", 2 * fc, fc, config.num_classes)?),
            ),
        };
        Ok(Self {
            config: config.clone(),
            store,
            spatial,
            context,
            ffm,
            head,
            temporal_head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Backbone forward passes since construction or the last reset.
    pub fn forward_count(&self) -> usize {
        self.context.backbone.forward_count()
    }

    pub fn reset_forward_count(&self) {
        self.context.backbone.reset_forward_count()
    }

    /// Fused stride-8 features for `[B, 3, H, W]` images in `[0, 1]`.
    pub fn fused(&self, image: &Tensor, ctx: &Ctx) -> Result<FeatureMap> {
        let sp = self.spatial.forward(image, ctx)?;
        let cx = self.context.forward(image, ctx)?;
        self.ffm.forward(&sp, &cx, ctx)
    }

    pub fn classify_single(
        &self,
        fused: &FeatureMap,
        out_h: usize,
        out_w: usize,
        ctx: &Ctx,
    ) -> Result<Tensor> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::config("model was built without a single-frame head"))?;
        head.forward(&fused.data, out_h, out_w, ctx)
    }

    /// Classify `concat(current, temporal)` along channels.
    pub fn temporal_classify(
        &self,
        current: &FeatureMap,
        temporal: &FeatureMap,
        out_h: usize,
        out_w: usize,
        ctx: &Ctx,
    ) -> Result<Tensor> {
        let head = self
            .temporal_head
            .as_ref()
            .ok_or_else(|| Error::config("model was built without a temporal head"))?;
        temporal_head_forward(head, current, temporal, out_h, out_w, ctx)
    }

    /// Single-frame logits `[B, K, H, W]`.
    pub fn forward_single(&self, image: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (_, _, h, w) = image.dims4()?;
        let fused = self.fused(image, ctx)?;
        self.classify_single(&fused, h, w, ctx)
    }

    /// Temporal logits for a batch of current frames and one batch per
    /// reference offset (each `[B, 3, H, W]`, aligned with `current`).
    ///
    /// References run with running batch-norm statistics; their gradients are
    /// cut when `stop_gradient_references` is set.
    pub fn forward_temporal(
        &self,
        current: &Tensor,
        references: &[Tensor],
        ctx: &Ctx,
    ) -> Result<Tensor> {
        if references.is_empty() {
            return Err(Error::contract("temporal forward needs reference frames"));
        }
        let (b, _, h, w) = current.dims4()?;
        let fused = self.fused(current, ctx)?;
        let refs = Tensor::cat(references, 0)?;
        let ref_ctx = Ctx::eval();
        let mut ref_fused = self.fused(&refs, &ref_ctx)?.data;
        if self.config.temporal.stop_gradient_references {
            ref_fused = ref_fused.detach();
        }
        let parts = (0..references.len())
            .map(|k| Ok(FeatureMap::new(ref_fused.narrow(0, k * b, b)?, fused.stride)))
            .collect::<Result<Vec<_>>>()?;
        let temporal = crate::temporal::temporal_average(&parts)?;
        self.temporal_classify(&fused, &temporal, h, w, ctx)
    }
}

pub(crate) fn temporal_head_forward(
    head: &Head,
    current: &FeatureMap,
    temporal: &FeatureMap,
    out_h: usize,
    out_w: usize,
    ctx: &Ctx,
) -> Result<Tensor> {
    if current.dims() != temporal.dims() {
        return Err(Error::contract(format!(
            "current {:?} and temporal {:?} features differ in shape",
            current.dims(),
            temporal.dims()
        )));
    }
    let x = Tensor::cat(&[&current.data, &temporal.data], 1)?;
    head.forward(&x, out_h, out_w, ctx)
}
