//! Central finite-difference checking of autodiff gradients.

use super::{Element, Tensor};
use crate::error::Result;

/// Relative-error floor so near-zero gradients do not blow up the ratio.
const DENOM_FLOOR: f64 = 1e-8;

/// Compare the autodiff gradient of a scalar-valued function against
/// central differences, elementwise. Returns the maximum relative error
/// with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` must be deterministic; the check is invalid otherwise.
pub fn finite_diff_check<E, F>(f: F, x: &Tensor<E>, eps: f64) -> Result<f64>
where
    E: Element,
    F: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    let probe = Tensor::param(&x.shape(), x.data_vec())?;
    let loss = f(&probe)?;
    loss.backward()?;
    let analytic = probe
        .grad()
        .unwrap_or_else(|| vec![E::zero(); probe.numel()]);

    let base = x.data_vec();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += E::from_f64(eps);
        let lp = f(&Tensor::from_vec(&x.shape(), plus)?)?.item().as_f64();
        let mut minus = base.clone();
        minus[i] -= E::from_f64(eps);
        let lm = f(&Tensor::from_vec(&x.shape(), minus)?)?.item().as_f64();
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic[i].as_f64();
        let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// One named gradient check with its pass threshold.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}
