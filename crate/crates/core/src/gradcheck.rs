//! Central finite-difference gradient checks against autograd.

use candle_core::{Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::scalar;
use crate::nn::{to_vec_f64, ParamStore};

/// Scale below which a gradient is compared absolutely. Rounding noise of a
/// central difference at step 1e-5 is about `1e-11 * |L|`.
pub const ZERO_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - n| / max(|a|, |n|, ZERO_FLOOR)`.
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(ZERO_FLOOR);
        (self.analytic - self.numeric).abs() / scale
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub samples: Vec<GradSample>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.samples.iter().map(GradSample::rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_err().total_cmp(&b.rel_err()))
    }
}

fn set_scalar(var: &Var, base: &[f64], index: usize, value: f64) -> Result<()> {
    let mut v = base.to_vec();
    v[index] = value;
    var.set(&Tensor::from_vec(v, var.dims(), var.device())?)?;
    Ok(())
}

/// Compare autograd against `(L(x + h) - L(x - h)) / 2h` on `per_var`
/// randomly chosen scalars of every variable (fewer if a variable is
/// smaller). Variables are restored before returning.
pub fn check_gradients(
    vars: &[(String, Var)],
    loss: impl Fn() -> Result<Tensor>,
    per_var: usize,
    step: f64,
    seed: u64,
) -> Result<GradReport> {
    let l = loss()?;
    if l.elem_count() != 1 {
        return Err(Error::contract("gradient check needs a scalar loss"));
    }
    let grads = l.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for (name, var) in vars {
        let n = var.elem_count();
        let base = to_vec_f64(var.as_tensor())?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_vec_f64(g)?,
            None => vec![0.0; n],
        };
        let mut picks = sample(&mut rng, n, per_var.min(n)).into_vec();
        picks.sort_unstable();
        for index in picks {
            set_scalar(var, &base, index, base[index] + step)?;
            let plus = scalar(&loss()?)?;
            set_scalar(var, &base, index, base[index] - step)?;
            let minus = scalar(&loss()?)?;
            samples.push(GradSample {
                name: name.clone(),
                index,
                analytic: analytic[index],
                numeric: (plus - minus) / (2.0 * step),
            });
        }
        var.set(&Tensor::from_vec(base, var.dims(), var.device())?)?;
    }
    Ok(GradReport { samples })
}

/// Every trainable parameter of `store`, in name order.
pub fn store_vars(store: &ParamStore) -> Vec<(String, Var)> {
    store
        .params()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0, 0.5], &device()).unwrap()).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        let report = check_gradients(
            &vars,
            || Ok(x.as_tensor().sqr()?.sum_all()?),
            3,
            1e-5,
            0,
        )
        .unwrap();
        assert_eq!(report.samples.len(), 3);
        assert!(report.max_rel_err() < 1e-9, "{:?}", report.worst());
        assert_eq!(to_vec_f64(x.as_tensor()).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn wrong_gradient_is_noticed() {
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, 2.0], &device()).unwrap()).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        // Detaching hides the dependence from autograd.
        let report = check_gradients(
            &vars,
            || Ok((x.as_tensor().detach().sqr()?.sum_all()? + x.as_tensor().sum_all()?)?),
            2,
            1e-5,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err() > 0.5);
    }
}
