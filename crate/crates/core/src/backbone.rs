//! Hierarchical shifted-window transformer used as the context-path encoder.
//!
//! The encoder has no classification head; it exposes the outputs of its last
//! two stages (strides 16 and 32 for a four-stage, patch-4 configuration).
//! Internally tokens are kept channels-last (`[B, H, W, C]`). Any size that is
//! not divisible by the patch, the window or the merge factor is zero-padded
//! on the bottom/right; padded tokens are masked out as attention keys and
//! cropped again after each block.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, softmax_last_dim, Conv2d, Init, LayerNorm, Linear, ParamStore};
use crate::FeatureMap;

/// Additive value for masked attention pairs.
pub const MASK_VALUE: f64 = -1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 24,
            depths: vec![2, 2, 2, 2],
            num_heads: vec![1, 2, 4, 8],
            window_size: 4,
            mlp_ratio: 4.0,
        }
    }

    /// The large configuration of the original encoder family (192 wide,
    /// depths 2/2/18/2, window 12).
    pub fn large() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 192,
            depths: vec![2, 2, 18, 2],
            num_heads: vec![6, 12, 24, 48],
            window_size: 12,
            mlp_ratio: 4.0,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn penult_channels(&self) -> usize {
        self.stage_channels(self.num_stages() - 2)
    }

    pub fn last_channels(&self) -> usize {
        self.stage_channels(self.num_stages() - 1)
    }

    /// Stride of the last stage relative to the input.
    pub fn output_stride(&self) -> usize {
        self.patch_size << (self.num_stages() - 1)
    }

    /// Smallest accepted input side: the last stage must hold at least one
    /// token computed from real pixels.
    pub fn min_input_side(&self) -> usize {
        self.output_stride()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.len() != self.num_heads.len() {
            return Err(Error::config(format!(
                "depths ({}) and num_heads ({}) differ in length",
                self.depths.len(),
                self.num_heads.len()
            )));
        }
        if self.num_stages() < 2 {
            return Err(Error::config("backbone needs at least two stages"));
        }
        if self.patch_size == 0 || self.window_size == 0 || self.embed_dim == 0 {
            return Err(Error::config("patch size, window size and embed dim must be positive"));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        for (s, &heads) in self.num_heads.iter().enumerate() {
            let c = self.stage_channels(s);
            if heads == 0 || c % heads != 0 {
                return Err(Error::config(format!(
                    "stage {s}: {c} channels not divisible by {heads} heads"
                )));
            }
        }
        Ok(())
    }
}

/// Outputs of the last two stages, channels-first.
#[derive(Debug, Clone)]
pub struct StageFeatures {
    pub f_penult: FeatureMap,
    pub f_last: FeatureMap,
}

/// `[B, H, W, C] -> [B * H/w * W/w, w, w, C]`.
pub fn window_partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::contract(format!(
            "window_partition: {h}x{w} not divisible by window {window}"
        )));
    }
    let (nh, nw) = (h / window, w / window);
    let y = x
        .reshape((b, nh, window, nw, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * nh * nw, window, window, c))?;
    Ok(y)
}

/// Inverse of [`window_partition`].
pub fn window_reverse(windows: &Tensor, window: usize, h: usize, w: usize) -> Result<Tensor> {
    let (n, wh, ww, c) = windows.dims4()?;
    if wh != window || ww != window || h % window != 0 || w % window != 0 {
        return Err(Error::contract(format!(
            "window_reverse: windows {wh}x{ww} incompatible with {h}x{w} / {window}"
        )));
    }
    let (nh, nw) = (h / window, w / window);
    if n % (nh * nw) != 0 {
        return Err(Error::contract("window_reverse: window count mismatch"));
    }
    let b = n / (nh * nw);
    let y = windows
        .reshape((b, nh, nw, window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, w, c))?;
    Ok(y)
}

fn region(coord: usize, size: usize, window: usize, shift: usize) -> usize {
    if coord < size - window {
        0
    } else if coord < size - shift {
        1
    } else {
        2
    }
}

/// Region-id mask values for a cyclically shifted `h x w` grid, laid out as
/// `[num_windows, w*w, w*w]` (row-major window order).
fn shifted_window_mask_values(h: usize, w: usize, window: usize, shift: usize) -> Vec<f64> {
    let ids: Vec<usize> = (0..h * w)
        .map(|p| {
            let (i, j) = (p / w, p % w);
            if shift == 0 {
                0
            } else {
                region(i, h, window, shift) * 3 + region(j, w, window, shift)
            }
        })
        .collect();
    mask_from_ids(&ids, h, w, window, |a, b| a == b)
}

fn mask_from_ids<T: Copy>(
    ids: &[T],
    h: usize,
    w: usize,
    window: usize,
    same: impl Fn(T, T) -> bool,
) -> Vec<f64> {
    let n = window * window;
    let (nh, nw) = (h / window, w / window);
    let mut out = Vec::with_capacity(nh * nw * n * n);
    for wi in 0..nh {
        for wj in 0..nw {
            let token = |t: usize| {
                let (ti, tj) = (t / window, t % window);
                ids[(wi * window + ti) * w + wj * window + tj]
            };
            for a in 0..n {
                for b in 0..n {
                    out.push(if same(token(a), token(b)) { 0.0 } else { MASK_VALUE });
                }
            }
        }
    }
    out
}

/// Additive attention mask for shifted windows: `[num_windows, w*w, w*w]`,
/// 0 for pairs originating from the same contiguous region under the cyclic
/// shift and [`MASK_VALUE`] otherwise.
pub fn shifted_window_mask(h: usize, w: usize, window: usize, shift: usize) -> Result<Tensor> {
    if shift >= window {
        return Err(Error::config(format!(
            "shift {shift} must be smaller than window {window}"
        )));
    }
    if h % window != 0 || w % window != 0 || h < window || w < window {
        return Err(Error::contract(format!(
            "mask grid {h}x{w} not divisible by window {window}"
        )));
    }
    let nwin = (h / window) * (w / window);
    let n = window * window;
    let vals = shifted_window_mask_values(h, w, window, shift);
    Ok(Tensor::from_vec(vals, (nwin, n, n), &crate::nn::device())?)
}

/// Combined mask for a padded grid: region mask plus masking of keys that fall
/// in the zero padding (`valid_h x valid_w` is the unpadded extent).
fn block_mask(
    hp: usize,
    wp: usize,
    valid_h: usize,
    valid_w: usize,
    window: usize,
    shift: usize,
) -> Result<Option<Tensor>> {
    if shift == 0 && hp == valid_h && wp == valid_w {
        return Ok(None);
    }
    let region = shifted_window_mask_values(hp, wp, window, shift);
    // Position (i, j) of the rolled grid holds padded token (i+shift, j+shift).
    let valid: Vec<bool> = (0..hp * wp)
        .map(|p| {
            let (i, j) = (p / wp, p % wp);
            (i + shift) % hp < valid_h && (j + shift) % wp < valid_w
        })
        .collect();
    let n = window * window;
    let (nh, nw) = (hp / window, wp / window);
    let mut vals = region;
    for wi in 0..nh {
        for wj in 0..nw {
            let base = (wi * nw + wj) * n * n;
            for b in 0..n {
                let (ti, tj) = (b / window, b % window);
                if !valid[(wi * window + ti) * wp + wj * window + tj] {
                    for a in 0..n {
                        vals[base + a * n + b] = MASK_VALUE;
                    }
                }
            }
        }
    }
    Ok(Some(Tensor::from_vec(
        vals,
        (nh * nw, n, n),
        &crate::nn::device(),
    )?))
}

/// Multi-head self-attention inside windows with a learned relative position
/// bias.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub relative_position_bias_table: candle_core::Var,
    relative_index: Tensor,
    pub heads: usize,
    pub window: usize,
    dim: usize,
}

impl WindowAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "{dim} channels not divisible by {heads} heads"
            )));
        }
        let qkv = Linear::new(store, &join(prefix, "qkv"), dim, 3 * dim, true)?;
        let proj = Linear::new(store, &join(prefix, "proj"), dim, dim, true)?;
        let span = 2 * window - 1;
        let table = store.param(
            &join(prefix, "relative_position_bias_table"),
            &[span * span, heads],
            Init::Zeros,
        )?;
        let n = window * window;
        let mut idx = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                let di = (a / window) + window - 1 - (b / window);
                let dj = (a % window) + window - 1 - (b % window);
                idx.push((di * span + dj) as u32);
            }
        }
        let relative_index = Tensor::from_vec(idx, n * n, &crate::nn::device())?;
        Ok(Self {
            qkv,
            proj,
            relative_position_bias_table: table,
            relative_index,
            heads,
            window,
            dim,
        })
    }

    /// `[heads, N, N]` bias gathered from the table.
    fn position_bias(&self) -> Result<Tensor> {
        let n = self.window * self.window;
        Ok(self
            .relative_position_bias_table
            .as_tensor()
            .index_select(&self.relative_index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .contiguous()?)
    }

    /// Attention over `tokens: [Bw, N, C]`; `mask` is `[nW, N, N]` with
    /// `Bw` a multiple of `nW`. Returns the output and the attention weights
    /// `[Bw, heads, N, N]`.
    pub fn forward_with_weights(
        &self,
        tokens: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (bw, n, c) = tokens.dims3()?;
        if c != self.dim {
            return Err(Error::contract(format!(
                "attention expects {} channels, got {c}",
                self.dim
            )));
        }
        if c % self.heads != 0 {
            return Err(Error::config(format!(
                "{c} channels not divisible by {} heads",
                self.heads
            )));
        }
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(tokens)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * (hd as f64).powf(-0.5))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut attn = q.matmul(&k.t()?)?;
        if n == self.window * self.window {
            attn = attn.broadcast_add(&self.position_bias()?.unsqueeze(0)?)?;
        }
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            if bw % nw != 0 {
                return Err(Error::contract(format!(
                    "{bw} windows not a multiple of {nw} mask windows"
                )));
            }
            attn = attn
                .reshape((bw / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bw, self.heads, n, n))?;
        }
        let weights = softmax_last_dim(&attn)?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((bw, n, c))?;
        Ok((self.proj.forward(&out)?, weights))
    }

    pub fn forward(&self, tokens: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(tokens, mask)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Pre-norm transformer block over (optionally shifted) windows.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub window: usize,
    pub shift: usize,
}

impl SwinBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: f64,
    ) -> Result<Self> {
        let hidden = ((dim as f64) * mlp_ratio).round() as usize;
        Ok(Self {
            norm1: LayerNorm::new(store, &join(prefix, "norm1"), dim)?,
            attn: WindowAttention::new(store, &join(prefix, "attn"), dim, heads, window)?,
            norm2: LayerNorm::new(store, &join(prefix, "norm2"), dim)?,
            mlp: Mlp {
                fc1: Linear::new(store, &join(prefix, "mlp.fc1"), dim, hidden, true)?,
                fc2: Linear::new(store, &join(prefix, "mlp.fc2"), hidden, dim, true)?,
            },
            window,
            shift,
        })
    }

    /// `x: [B, H, W, C] -> [B, H, W, C]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let win = self.window;
        // A single window already covers the map: shifting is pointless.
        let shift = if h <= win && w <= win { 0 } else { self.shift };
        let hp = h.div_ceil(win) * win;
        let wp = w.div_ceil(win) * win;

        let y = self.norm1.forward(x)?;
        let mut y = y.pad_with_zeros(1, 0, hp - h)?.pad_with_zeros(2, 0, wp - w)?;
        if shift > 0 {
            y = y.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?;
        }
        let mask = block_mask(hp, wp, h, w, win, shift)?;
        let n = win * win;
        let windows = window_partition(&y, win)?.reshape(((), n, c))?;
        let attended = self.attn.forward(&windows, mask.as_ref())?;
        let mut y = window_reverse(&attended.reshape(((), win, win, c))?, win, hp, wp)?;
        if shift > 0 {
            y = y.roll(shift as i32, 1)?.roll(shift as i32, 2)?;
        }
        let y = y.narrow(1, 0, h)?.narrow(2, 0, w)?;
        debug_assert_eq!(y.dims(), &[b, h, w, c]);
        let x = (x + y)?;
        let z = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + z)?)
    }
}

/// 2x2 neighbourhood concatenation followed by a `4C -> 2C` projection.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &join(prefix, "norm"), 4 * dim)?,
            reduction: Linear::new(store, &join(prefix, "reduction"), 4 * dim, 2 * dim, false)?,
        })
    }

    /// `[B, H, W, C] -> [B, ceil(H/2), ceil(W/2), 2C]`.
    pub fn forward_nhwc(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let x = x.pad_with_zeros(1, 0, h % 2)?.pad_with_zeros(2, 0, w % 2)?;
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        // channel order: (0,0), (1,0), (0,1), (1,1) as (row, col) offsets
        let y = x
            .reshape((b, h2, 2, w2, 2, c))?
            .permute((0, 1, 3, 4, 2, 5))?
            .contiguous()?
            .reshape((b, h2, w2, 4 * c))?;
        self.reduction.forward(&self.norm.forward(&y)?)
    }

    /// Channels-first wrapper: `[B, C, H, W] -> [B, 2C, H/2, W/2]`.
    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let y = self.forward_nhwc(&x.data.permute((0, 2, 3, 1))?)?;
        Ok(FeatureMap {
            data: y.permute((0, 3, 1, 2))?.contiguous()?,
            stride: x.stride * 2,
        })
    }
}

/// Non-overlapping patch projection.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub patch_size: usize,
}

/// Patch embedding output plus the zero padding applied to the input.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub features: FeatureMap,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, prefix: &str, patch: usize, dim: usize) -> Result<Self> {
        let weight = store.param(
            &join(prefix, "proj.weight"),
            &[dim, 3, patch, patch],
            Init::TruncNormal(0.02),
        )?;
        let bias = store.param(&join(prefix, "proj.bias"), &[dim], Init::Zeros)?;
        Ok(Self {
            proj: Conv2d {
                weight,
                bias: Some(bias),
                stride: patch,
                padding: 0,
            },
            patch_size: patch,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<Embedded> {
        let (_, _, h, w) = image.dims4()?;
        let p = self.patch_size;
        let pad_h = h.div_ceil(p) * p - h;
        let pad_w = w.div_ceil(p) * p - w;
        let x = image.pad_with_zeros(2, 0, pad_h)?.pad_with_zeros(3, 0, pad_w)?;
        Ok(Embedded {
            features: FeatureMap {
                data: self.proj.forward(&x)?,
                stride: p,
            },
            pad_h,
            pad_w,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<SwinBlock>,
    pub downsample: Option<PatchMerging>,
}

/// The encoder. Holds a counter of full forward passes for instrumentation.
#[derive(Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_embed: PatchEmbed,
    pub stages: Vec<Stage>,
    pub norm_penult: LayerNorm,
    pub norm_last: LayerNorm,
    calls: AtomicUsize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let patch_embed = PatchEmbed::new(
            store,
            &join(prefix, "patch_embed"),
            config.patch_size,
            config.embed_dim,
        )?;
        let s_count = config.num_stages();
        let mut stages = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let dim = config.stage_channels(s);
            let sp = join(prefix, &format!("stage{s}"));
            let blocks = (0..config.depths[s])
                .map(|bi| {
                    let shift = if bi % 2 == 1 { config.window_size / 2 } else { 0 };
                    SwinBlock::new(
                        store,
                        &join(&sp, &format!("block{bi}")),
                        dim,
                        config.num_heads[s],
                        config.window_size,
                        shift,
                        config.mlp_ratio,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let downsample = if s + 1 < s_count {
                Some(PatchMerging::new(store, &join(&sp, "downsample"), dim)?)
            } else {
                None
            };
            stages.push(Stage { blocks, downsample });
        }
        let norm_penult = LayerNorm::new(
            store,
            &join(prefix, &format!("norm{}", s_count - 2)),
            config.penult_channels(),
        )?;
        let norm_last = LayerNorm::new(
            store,
            &join(prefix, &format!("norm{}", s_count - 1)),
            config.last_channels(),
        )?;
        Ok(Self {
            config: config.clone(),
            patch_embed,
            stages,
            norm_penult,
            norm_last,
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of completed [`Backbone::forward_stages`] calls.
    pub fn forward_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let min = self.config.min_input_side();
        if h < min || w < min {
            return Err(Error::config(format!(
                "input {h}x{w} below the backbone minimum of {min} pixels per side"
            )));
        }
        Ok(())
    }

    pub fn forward_stages(&self, image: &Tensor) -> Result<StageFeatures> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::contract(format!("expected 3 input channels, got {c}")));
        }
        self.check_input(h, w)?;
        let embedded = self.patch_embed.forward(image)?;
        let mut stride = embedded.features.stride;
        let mut x = embedded.features.data.permute((0, 2, 3, 1))?.contiguous()?;
        let s_count = self.stages.len();
        let mut penult = None;
        let mut last = None;
        for (s, stage) in self.stages.iter().enumerate() {
            for block in &stage.blocks {
                x = block.forward(&x)?;
            }
            if s == s_count - 2 {
                penult = Some(to_nchw(&self.norm_penult.forward(&x)?, stride)?);
            }
            if s == s_count - 1 {
                last = Some(to_nchw(&self.norm_last.forward(&x)?, stride)?);
            }
            if let Some(ds) = &stage.downsample {
                x = ds.forward_nhwc(&x)?;
                stride *= 2;
            }
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(StageFeatures {
            f_penult: penult.expect("at least two stages"),
            f_last: last.expect("at least two stages"),
        })
    }
}

fn to_nchw(x: &Tensor, stride: usize) -> Result<FeatureMap> {
    Ok(FeatureMap {
        data: x.permute((0, 3, 1, 2))?.contiguous()?,
        stride,
    })
}

/// Max absolute deviation of attention rows from summing to one.
pub fn max_row_sum_error(weights: &Tensor) -> Result<f64> {
    let sums = weights.sum(D::Minus1)?;
    let v = crate::nn::to_vec_f64(&sums)?;
    Ok(v.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max))
}
