//! Layer primitives shared by the backbone, the bilateral network and the heads.
//!
//! Every layer owns [`Var`] handles registered in a [`ParamStore`] under a
//! dotted name. The store is the single source of truth for checkpointing and
//! optimizer parameter groups. All computation runs in `f64` on the CPU.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;
pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

pub fn device() -> Device {
    Device::Cpu
}

/// Parameter initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    /// He normal, `std = sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
}

impl Init {
    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect(),
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * std
                    })
                    .collect()
            }
        }
    }
}

/// Named trainable parameters plus non-trainable buffers (batch-norm running
/// statistics). Iteration order is the lexicographic name order.
#[derive(Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let n = shape.iter().product();
        let data = init.sample(n, &mut self.rng);
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?;
        self.params.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::config(format!("duplicate buffer name `{name}`")));
        }
        let n = shape.iter().product();
        let data = init.sample(n, &mut self.rng);
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    /// Total number of scalar trainable parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter or buffer in place, checking the shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::data(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::data(format!(
                "shape mismatch for `{name}`: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(DTYPE)?)?;
        Ok(())
    }
}

pub fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BnUpdate {
    running_mean: Var,
    running_var: Var,
    batch_mean: Tensor,
    batch_var_unbiased: Tensor,
}

/// Per-forward context: the mode, plus batch-norm statistics collected in
/// training mode and applied afterwards under exclusive access.
#[derive(Debug)]
pub struct Ctx {
    mode: Mode,
    updates: RefCell<Vec<BnUpdate>>,
}

impl Ctx {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn pending_updates(&self) -> usize {
        self.updates.borrow().len()
    }

    /// Fold the collected batch statistics into the running statistics,
    /// in collection order, with momentum [`BN_MOMENTUM`].
    pub fn apply_bn_updates(self) -> Result<()> {
        for u in self.updates.into_inner() {
            let mean = ((u.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (u.batch_mean * BN_MOMENTUM)?)?;
            let var = ((u.running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (u.batch_var_unbiased * BN_MOMENTUM)?)?;
            u.running_mean.set(&mean)?;
            u.running_var.set(&var)?;
        }
        Ok(())
    }
}

/// 2-D convolution, weight `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = store.param(
            &join(prefix, "weight"),
            &[out_c, in_c, kernel, kernel],
            Init::Kaiming { fan_in },
        )?;
        let bias = if bias {
            Some(store.param(&join(prefix, "bias"), &[out_c], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    /// im2col convolution: gather the receptive fields with one index
    /// select and contract them with a single matrix product.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (out_c, in_c, k, _) = self.weight.dims4()?;
        let (s, p) = (self.stride, self.padding);
        if c != in_c {
            return Err(Error::contract(format!(
                "conv expects {in_c} input channels, got {c}"
            )));
        }
        if h + 2 * p < k || w + 2 * p < k {
            return Err(Error::contract(format!(
                "input {h}x{w} too small for kernel {k} with padding {p}"
            )));
        }
        let (oh, ow) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
        let l = oh * ow;
        let cols = if k == 1 && s == 1 && p == 0 {
            x.permute((1, 0, 2, 3))?.contiguous()?.reshape((c, b * l))?
        } else {
            let idx = im2col_indices(h, w, k, s, p);
            let idx = Tensor::from_vec(idx, k * k * l, x.device())?;
            let flat = x.reshape((b, c, h * w))?;
            let flat = Tensor::cat(&[&flat, &Tensor::zeros((b, c, 1), x.dtype(), x.device())?], 2)?;
            flat.index_select(&idx, 2)?
                .reshape((b, c * k * k, l))?
                .permute((1, 0, 2))?
                .contiguous()?
                .reshape((c * k * k, b * l))?
        };
        let wmat = self.weight.as_tensor().reshape((out_c, in_c * k * k))?;
        let y = wmat
            .matmul(&cols)?
            .reshape((out_c, b, oh, ow))?
            .permute((1, 0, 2, 3))?
            .contiguous()?;
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Flat source index of every `(ky, kx, out_pixel)` tap; out-of-image taps
/// point at the zero column `h * w`.
fn im2col_indices(h: usize, w: usize, k: usize, s: usize, p: usize) -> Vec<u32> {
    let (oh, ow) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
    let mut idx = Vec::with_capacity(k * k * oh * ow);
    for ky in 0..k {
        for kx in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (sy, sx) = ((oy * s + ky) as isize - p as isize, (ox * s + kx) as isize - p as isize);
                    let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                    idx.push(if inside { (sy as usize * w + sx as usize) as u32 } else { (h * w) as u32 });
                }
            }
        }
    }
    idx
}

/// Batch normalisation over `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Var,
    pub running_var: Var,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(&join(prefix, "weight"), &[channels], Init::Ones)?,
            bias: store.param(&join(prefix, "bias"), &[channels], Init::Zeros)?,
            running_mean: store.buffer(&join(prefix, "running_mean"), &[channels], Init::Zeros)?,
            running_var: store.buffer(&join(prefix, "running_var"), &[channels], Init::Ones)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = match ctx.mode {
            Mode::Train => {
                let n = b * h * w;
                if n < 2 {
                    return Err(Error::config(
                        "batch norm in training mode needs more than one value per channel",
                    ));
                }
                let mean = x.mean_keepdim((0, 2, 3))?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
                let unbiased = (var.detach() * (n as f64 / (n - 1) as f64))?;
                ctx.updates.borrow_mut().push(BnUpdate {
                    running_mean: self.running_mean.clone(),
                    running_var: self.running_var.clone(),
                    batch_mean: mean.detach().reshape(c)?,
                    batch_var_unbiased: unbiased.reshape(c)?,
                });
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            ),
        };
        let inv_std = (var + NORM_EPS)?.sqrt()?.recip()?;
        let gamma = self.weight.as_tensor().reshape((1, c, 1, 1))?;
        let beta = self.bias.as_tensor().reshape((1, c, 1, 1))?;
        let scale = (gamma * inv_std)?;
        let shift = (beta - (&mean * &scale)?)?;
        Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

/// Convolution followed by batch norm and an optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    ) -> Result<Self> {
        let conv = Conv2d::new(
            store,
            &join(prefix, "conv"),
            in_c,
            out_c,
            kernel,
            stride,
            kernel / 2,
            false,
        )?;
        let bn = BatchNorm2d::new(store, &join(prefix, "bn"), out_c)?;
        Ok(Self { conv, bn, relu })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x)?, ctx)?;
        if self.relu {
            Ok(y.relu()?)
        } else {
            Ok(y)
        }
    }
}

/// Fully connected layer acting on the last dimension; weight `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_f: usize,
        out_f: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.param(&join(prefix, "weight"), &[out_f, in_f], Init::TruncNormal(0.02))?;
        let bias = if bias {
            Some(store.param(&join(prefix, "bias"), &[out_f], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_f = *dims.last().ok_or_else(|| Error::contract("linear on a scalar"))?;
        let rows = x.elem_count() / in_f.max(1);
        let y = x.reshape((rows, in_f))?.matmul(&self.weight.as_tensor().t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dims()[0];
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalisation over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(&join(prefix, "weight"), &[dim], Init::Ones)?,
            bias: store.param(&join(prefix, "bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Log-softmax over the last dimension.
pub fn log_softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Global average pooling `[B, C, H, W] -> [B, C, 1, 1]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim((2, 3))?)
}

/// Row-interpolation matrix `[out, in]` for bilinear resizing with pixel
/// centres at half-integers (`align_corners = false`).
pub fn interp_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let lambda = src - i0 as f64;
        m[o * input + i0] += 1.0 - lambda;
        m[o * input + i1] += lambda;
    }
    m
}

/// Bilinear resize of `[B, C, H, W]` to `[B, C, out_h, out_w]`, expressed as
/// two matrix products so it stays differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let aw = Tensor::from_vec(interp_matrix(w, out_w), (out_w, w), dev)?;
    let ah = Tensor::from_vec(interp_matrix(h, out_h), (out_h, h), dev)?;
    // [B*C*H, W] x [W, out_w]
    let y = x.reshape((b * c * h, w))?.matmul(&aw.t()?)?;
    // [B*C*out_w, H] x [H, out_h]; a stride-0 batched lhs is avoided on
    // purpose, the CPU matmul mishandles it.
    let y = y
        .reshape((b * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * out_w, h))?
        .matmul(&ah.t()?)?;
    let y = y
        .reshape((b * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}

/// Random seed helper: derive a reproducible sub-stream seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.random()
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DTYPE)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interp_matrix_rows_sum_to_one() {
        for (i, o) in [(2, 4), (4, 2), (8, 64), (60, 479), (3, 3)] {
            let m = interp_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interp_matrix_same_size_is_identity() {
        let m = interp_matrix(5, 5);
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(m[r * 5 + c], if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn bilinear_upsample_matches_half_pixel_convention() {
        // 2 -> 4 upsampling of [0, 1]: sources at -0.25, 0.25, 0.75, 1.25.
        let x = Tensor::from_vec(vec![0.0f64, 1.0], (1, 1, 1, 2), &device()).unwrap();
        let y = resize_bilinear(&x, 1, 4).unwrap();
        assert_eq!(to_vec_f64(&y).unwrap(), vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn bilinear_resize_is_per_channel() {
        let v: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| (i / 4) as f64).collect();
        let x = Tensor::from_vec(v, (2, 3, 2, 2), &device()).unwrap();
        let y = to_vec_f64(&resize_bilinear(&x, 4, 5).unwrap()).unwrap();
        for (plane, chunk) in y.chunks(20).enumerate() {
            assert!(chunk.iter().all(|&p| (p - plane as f64).abs() < 1e-12));
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (c, o, k, st, pd, h, w) in [
            (2, 3, 3, 2, 1, 7, 8),
            (3, 2, 3, 1, 1, 5, 5),
            (3, 4, 4, 4, 0, 9, 12),
            (4, 2, 1, 1, 0, 3, 6),
            (2, 2, 3, 2, 1, 1, 2),
        ] {
            let mut store = ParamStore::new(c as u64);
            let conv = Conv2d::new(&mut store, "c", c, o, k, st, pd, true).unwrap();
            store
                .assign("c.bias", &Tensor::new((0..o).map(|i| i as f64 * 0.5).collect::<Vec<_>>(), &device()).unwrap())
                .unwrap();
            let b = 2;
            let xv: Vec<f64> = (0..b * c * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
            let x = Tensor::from_vec(xv.clone(), (b, c, h, w), &device()).unwrap();
            let y = conv.forward(&x).unwrap();
            let wv = to_vec_f64(conv.weight.as_tensor()).unwrap();
            let (oh, ow) = ((h + 2 * pd - k) / st + 1, (w + 2 * pd - k) / st + 1);
            assert_eq!(y.dims(), &[b, o, oh, ow]);
            let yv = to_vec_f64(&y).unwrap();
            for n in 0..b {
                for oc in 0..o {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = oc as f64 * 0.5;
                            for ic in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * st + ky) as isize - pd as isize;
                                        let ix = (ox * st + kx) as isize - pd as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        acc += wv[((oc * c + ic) * k + ky) * k + kx]
                                            * xv[((n * c + ic) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                            let got = yv[((n * o + oc) * oh + oy) * ow + ox];
                            assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_with_mixed_parity_backpropagates() {
        let mut store = ParamStore::new(0);
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 2, 1, true).unwrap();
        let x = Var::from_tensor(&Tensor::ones((1, 2, 7, 8), DTYPE, &device()).unwrap()).unwrap();
        let y = conv.forward(x.as_tensor()).unwrap();
        assert_eq!(y.dims(), &[1, 3, 4, 4]);
        let grads = y.sum_all().unwrap().backward().unwrap();
        assert_eq!(grads.get(x.as_tensor()).unwrap().dims(), &[1, 2, 7, 8]);
        assert_eq!(grads.get(conv.weight.as_tensor()).unwrap().dims(), &[3, 2, 3, 3]);
    }

    #[test]
    fn batchnorm_train_normalises_and_records_stats() {
        let mut store = ParamStore::new(0);
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = Tensor::from_vec(data, (2, 2, 2, 2), &device()).unwrap();
        let ctx = Ctx::train();
        let y = bn.forward(&x, &ctx).unwrap();
        let m = to_vec_f64(&y.mean_keepdim((0, 2, 3)).unwrap()).unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(ctx.pending_updates(), 1);
        ctx.apply_bn_updates().unwrap();
        let rm = to_vec_f64(bn.running_mean.as_tensor()).unwrap();
        // channel 0 holds {0,1,2,3,8,9,10,11}: mean 5.5
        assert!((rm[0] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new(0);
        store.param("a", &[1], Init::Zeros).unwrap();
        assert!(store.param("a", &[1], Init::Zeros).is_err());
    }
}
