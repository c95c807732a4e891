//! Pixelwise cross-entropy and online-hard-example-mining cross-entropy.
//!
//! Labels are flat `[B, H, W]` class ids; [`IGNORE_INDEX`] pixels never
//! contribute. Both losses are means over the contributing pixels.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::datagen::IGNORE_INDEX;
use crate::error::{Error, Result};
use crate::nn::{log_softmax_last_dim, to_vec_f64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OhemConfig {
    pub prob_threshold: f64,
    pub min_kept: usize,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl OhemConfig {
    /// Threshold 0.7, keeping at least one sixteenth of the batch pixels.
    pub fn for_batch(batch_size: usize, crop: [usize; 2]) -> Self {
        Self {
            prob_threshold: 0.7,
            min_kept: (batch_size * crop[0] * crop[1] / 16).max(1),
        }
    }

    /// Batch 4 of 64x64 crops.
    pub fn toy() -> Self {
        Self::for_batch(4, [64, 64])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::config(format!(
                "OHEM threshold must lie in (0, 1), got {}",
                self.prob_threshold
            )));
        }
        if self.min_kept < 1 {
            return Err(Error::config("OHEM min_kept must be at least 1"));
        }
        Ok(())
    }
}

/// Log-probabilities `[N, K]` (pixel-major) and the checked label list.
fn pixel_log_probs(logits: &Tensor, labels: &[u8]) -> Result<(Tensor, usize)> {
    let (b, k, h, w) = logits.dims4()?;
    if labels.len() != b * h * w {
        return Err(Error::contract(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            logits.dims()
        )));
    }
    if let Some(&bad) = labels
        .iter()
        .find(|&&l| l != IGNORE_INDEX && l as usize >= k)
    {
        return Err(Error::data(format!("label {bad} outside 0..{k}")));
    }
    let flat = logits
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .reshape((b * h * w, k))?;
    Ok((log_softmax_last_dim(&flat)?, k))
}

/// `-sum_p weight_p * log p(label_p)` with weights given per pixel.
fn weighted_nll(log_probs: &Tensor, labels: &[u8], weights: &[f64], k: usize) -> Result<Tensor> {
    let mut pick = vec![0.0f64; labels.len() * k];
    for (p, (&l, &wgt)) in labels.iter().zip(weights).enumerate() {
        if wgt != 0.0 {
            pick[p * k + l as usize] = wgt;
        }
    }
    let pick = Tensor::from_vec(pick, log_probs.dims(), log_probs.device())?;
    Ok((log_probs * pick)?.sum_all()?.neg()?)
}

/// Mean cross-entropy over non-ignored pixels.
pub fn cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let (log_probs, k) = pixel_log_probs(logits, labels)?;
    let valid = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
    if valid == 0 {
        return Err(Error::data("cross-entropy over zero labeled pixels"));
    }
    let w = 1.0 / valid as f64;
    let weights: Vec<f64> = labels
        .iter()
        .map(|&l| if l == IGNORE_INDEX { 0.0 } else { w })
        .collect();
    weighted_nll(&log_probs, labels, &weights, k)
}

/// Indices of the pixels OHEM keeps, in ascending index order.
///
/// `true_probs[p]` is the predicted probability of pixel `p`'s label, `None`
/// for ignored pixels. The hard set is every valid pixel below the
/// threshold; if it is smaller than `min_kept`, the `min(min_kept, #valid)`
/// valid pixels with the lowest probability are kept instead, ties broken by
/// pixel index.
pub fn ohem_select(true_probs: &[Option<f64>], cfg: &OhemConfig) -> Vec<usize> {
    let valid: Vec<(f64, usize)> = true_probs
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (p, i)))
        .collect();
    let hard: Vec<usize> = valid
        .iter()
        .filter(|(p, _)| *p < cfg.prob_threshold)
        .map(|&(_, i)| i)
        .collect();
    if hard.len() >= cfg.min_kept {
        return hard;
    }
    let keep = cfg.min_kept.min(valid.len());
    let mut order = valid;
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = order[..keep].iter().map(|&(_, i)| i).collect();
    kept.sort_unstable();
    kept
}

/// Result of an OHEM evaluation: the loss and how many pixels it averaged.
#[derive(Debug, Clone)]
pub struct OhemLoss {
    pub loss: Tensor,
    pub kept: usize,
}

/// Cross-entropy averaged over the OHEM-selected pixels. The selection is a
/// hard, gradient-free mask computed from the current logits.
pub fn ohem_cross_entropy_detailed(
    logits: &Tensor,
    labels: &[u8],
    cfg: &OhemConfig,
) -> Result<OhemLoss> {
    cfg.validate()?;
    let (log_probs, k) = pixel_log_probs(logits, labels)?;
    let lp = to_vec_f64(&log_probs)?;
    let true_probs: Vec<Option<f64>> = labels
        .iter()
        .enumerate()
        .map(|(p, &l)| (l != IGNORE_INDEX).then(|| lp[p * k + l as usize].exp()))
        .collect();
    if true_probs.iter().all(Option::is_none) {
        return Err(Error::data("OHEM cross-entropy over zero labeled pixels"));
    }
    let kept = ohem_select(&true_probs, cfg);
    let w = 1.0 / kept.len() as f64;
    let mut weights = vec![0.0; labels.len()];
    for &i in &kept {
        weights[i] = w;
    }
    Ok(OhemLoss {
        loss: weighted_nll(&log_probs, labels, &weights, k)?,
        kept: kept.len(),
    })
}

pub fn ohem_cross_entropy(logits: &Tensor, labels: &[u8], cfg: &OhemConfig) -> Result<Tensor> {
    Ok(ohem_cross_entropy_detailed(logits, labels, cfg)?.loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    OhemCe,
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(crate::nn::DTYPE)?.to_scalar::<f64>()?)
}
