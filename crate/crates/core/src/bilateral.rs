//! Single-frame bilateral network pieces: the stride-8 convolutional spatial
//! path, the transformer context path with attention refinement, the feature
//! fusion module and the per-pixel classifier head.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, join, resize_bilinear, sigmoid, BatchNorm2d, Conv2d, ConvBn, Ctx, ParamStore};
use crate::FeatureMap;

/// Spatial path layout: three 3x3 stride-2 conv/BN/ReLU layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialPathConfig {
    pub channels: Vec<usize>,
}

impl Default for SpatialPathConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 64, 128],
        }
    }
}

impl SpatialPathConfig {
    pub const KERNEL: usize = 3;
    pub const STRIDE: usize = 2;

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 3 {
            return Err(Error::config(format!(
                "spatial path needs exactly 3 layers, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::config("spatial path channels must be positive"));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.channels[2]
    }
}

/// Output side after the three stride-2 convolutions (kernel 3, padding 1).
pub fn stride8_side(side: usize) -> usize {
    side.div_ceil(2).div_ceil(2).div_ceil(2)
}

#[derive(Debug, Clone)]
pub struct SpatialPath {
    pub layers: Vec<ConvBn>,
}

impl SpatialPath {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &SpatialPathConfig) -> Result<Self> {
        cfg.validate()?;
        let mut in_c = 3;
        let mut layers = Vec::with_capacity(3);
        for (i, &c) in cfg.channels.iter().enumerate() {
            layers.push(ConvBn::new(
                store,
                &join(prefix, &format!("layer{i}")),
                in_c,
                c,
                SpatialPathConfig::KERNEL,
                SpatialPathConfig::STRIDE,
                true,
            )?);
            in_c = c;
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, image: &Tensor, ctx: &Ctx) -> Result<FeatureMap> {
        let mut x = image.clone();
        for layer in &self.layers {
            x = layer.forward(&x, ctx)?;
        }
        Ok(FeatureMap::new(x, 8))
    }
}

/// Attention refinement: `x * sigmoid(BN(conv1x1(gap(x))))`.
#[derive(Debug, Clone)]
pub struct Arm {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Arm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &join(prefix, "conv"), channels, channels, 1, 1, 0, false)?,
            bn: BatchNorm2d::new(store, &join(prefix, "bn"), channels)?,
        })
    }

    /// Channel attention vector `[B, C, 1, 1]`, entries in (0, 1).
    pub fn attention(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let pooled = global_avg_pool(x)?;
        sigmoid(&self.bn.forward(&self.conv.forward(&pooled)?, ctx)?)
    }

    pub fn forward(&self, x: &FeatureMap, ctx: &Ctx) -> Result<FeatureMap> {
        let a = self.attention(&x.data, ctx)?;
        Ok(FeatureMap::new(x.data.broadcast_mul(&a)?, x.stride))
    }
}

/// Context path: backbone taps refined by ARMs, merged top-down and brought to
/// stride 8.
#[derive(Debug)]
pub struct ContextPath {
    pub backbone: Backbone,
    pub arm16: Arm,
    pub arm32: Arm,
    pub global: Option<ConvBn>,
    pub proj32: ConvBn,
    pub proj16: ConvBn,
}

impl ContextPath {
    pub fn new(
        store: &mut ParamStore,
        backbone_cfg: &BackboneConfig,
        out_channels: usize,
        use_global_context: bool,
    ) -> Result<Self> {
        let backbone = Backbone::new(store, "backbone", backbone_cfg)?;
        let c16 = backbone_cfg.penult_channels();
        let c32 = backbone_cfg.last_channels();
        let global = if use_global_context {
            Some(ConvBn::new(store, "context.global", c32, c32, 1, 1, true)?)
        } else {
            None
        };
        Ok(Self {
            backbone,
            arm16: Arm::new(store, "context.arm16", c16)?,
            arm32: Arm::new(store, "context.arm32", c32)?,
            global,
            proj32: ConvBn::new(store, "context.proj32", c32, c16, 1, 1, true)?,
            proj16: ConvBn::new(store, "context.proj16", c16, out_channels, 1, 1, true)?,
        })
    }

    pub fn forward(&self, image: &Tensor, ctx: &Ctx) -> Result<FeatureMap> {
        let (_, _, h, w) = image.dims4()?;
        let feats = self.backbone.forward_stages(image)?;
        let mut tail = self.arm32.forward(&feats.f_last, ctx)?.data;
        if let Some(global) = &self.global {
            let g = global.forward(&global_avg_pool(&feats.f_last.data)?, ctx)?;
            tail = tail.broadcast_add(&g)?;
        }
        let (h16, w16) = feats.f_penult.spatial();
        let tail = self.proj32.forward(&resize_bilinear(&tail, h16, w16)?, ctx)?;
        let merged = (self.arm16.forward(&feats.f_penult, ctx)?.data + tail)?;
        let up = resize_bilinear(&merged, stride8_side(h), stride8_side(w))?;
        Ok(FeatureMap::new(self.proj16.forward(&up, ctx)?, 8))
    }
}

/// Feature fusion: `h = ReLU(BN(conv1x1([sp, cx])))`, channel attention
/// `a = sigmoid(conv(ReLU(conv(gap(h)))))`, output `h + h * a`.
#[derive(Debug, Clone)]
pub struct Ffm {
    pub fuse: ConvBn,
    pub att_reduce: Conv2d,
    pub att_expand: Conv2d,
}

impl Ffm {
    pub fn new(store: &mut ParamStore, prefix: &str, in_c: usize, out_c: usize) -> Result<Self> {
        let mid = (out_c / 4).max(1);
        Ok(Self {
            fuse: ConvBn::new(store, &join(prefix, "fuse"), in_c, out_c, 1, 1, true)?,
            att_reduce: Conv2d::new(store, &join(prefix, "att_reduce"), out_c, mid, 1, 1, 0, true)?,
            att_expand: Conv2d::new(store, &join(prefix, "att_expand"), mid, out_c, 1, 1, 0, true)?,
        })
    }

    pub fn attention(&self, h: &Tensor) -> Result<Tensor> {
        let a = self.att_reduce.forward(&global_avg_pool(h)?)?.relu()?;
        sigmoid(&self.att_expand.forward(&a)?)
    }

    pub fn forward(&self, sp: &FeatureMap, cx: &FeatureMap, ctx: &Ctx) -> Result<FeatureMap> {
        let (b1, _, h1, w1) = sp.data.dims4()?;
        let (b2, _, h2, w2) = cx.data.dims4()?;
        if (b1, h1, w1) != (b2, h2, w2) {
            return Err(Error::contract(format!(
                "fusion inputs disagree: spatial {:?} vs context {:?}",
                sp.dims(),
                cx.dims()
            )));
        }
        let h = self
            .fuse
            .forward(&Tensor::cat(&[&sp.data, &cx.data], 1)?, ctx)?;
        let a = self.attention(&h)?;
        let out = (&h + h.broadcast_mul(&a)?)?;
        Ok(FeatureMap::new(out, sp.stride))
    }
}

/// 3x3 conv/BN/ReLU, 1x1 classifier, bilinear upsampling to the label size.
#[derive(Debug, Clone)]
pub struct Head {
    pub conv: ConvBn,
    pub cls: Conv2d,
}

impl Head {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_c: usize,
        mid_c: usize,
        num_classes: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: ConvBn::new(store, &join(prefix, "conv"), in_c, mid_c, 3, 1, true)?,
            cls: Conv2d::new(store, &join(prefix, "cls"), mid_c, num_classes, 1, 1, 0, true)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv.conv.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor, out_h: usize, out_w: usize, ctx: &Ctx) -> Result<Tensor> {
        let y = self.cls.forward(&self.conv.forward(x, ctx)?)?;
        resize_bilinear(&y, out_h, out_w)
    }
}

/// Per-pixel argmax of `[B, K, H, W]` logits, as `B` row-major maps.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<Vec<u8>>> {
    let (b, k, h, w) = logits.dims4()?;
    let v = crate::nn::to_vec_f64(logits)?;
    let plane = h * w;
    Ok((0..b)
        .map(|bi| {
            (0..plane)
                .map(|p| {
                    let mut best = 0usize;
                    let mut best_v = f64::NEG_INFINITY;
                    for c in 0..k {
                        let x = v[(bi * k + c) * plane + p];
                        if x > best_v {
                            best_v = x;
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}
