//! Relative Frobenius error between an estimate and the truth.

use crate::error::{Result, TmeError};
use crate::spd::CovTriple;
use crate::tensor::{tucker_apply, Mat, Mode, Tensor3};
use crate::tme::{normalize_identifiability, Normalization};

/// `||est - truth||_F / ||truth||_F` over flat entries.
pub fn metric_d(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(TmeError::DimensionMismatch(format!(
            "estimate has {} entries, truth has {}",
            est.len(),
            truth.len()
        )));
    }
    let denom = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(TmeError::ZeroNormTruth);
    }
    let num = est.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(num / denom)
}

pub fn metric_d_mat(est: &Mat, truth: &Mat) -> Result<f64> {
    if est.shape() != truth.shape() {
        return Err(TmeError::DimensionMismatch(format!(
            "estimate is {:?}, truth is {:?}",
            est.shape(),
            truth.shape()
        )));
    }
    metric_d(est.as_slice(), truth.as_slice())
}

pub fn metric_d_tensor(est: &Tensor3, truth: &Tensor3) -> Result<f64> {
    if est.dims() != truth.dims() {
        return Err(TmeError::DimensionMismatch(format!(
            "estimate is {:?}, truth is {:?}",
            est.dims(),
            truth.dims()
        )));
    }
    metric_d(est.data(), truth.data())
}

/// Per-mode D after putting both triples in the same gauge.
pub fn metric_d_triple(est: &CovTriple, truth: &CovTriple, normalization: Normalization) -> Result<[f64; 3]> {
    let e = normalize_identifiability(est, normalization);
    let t = normalize_identifiability(truth, normalization);
    let mut out = [0.0; 3];
    for m in Mode::ALL {
        out[m.axis()] = metric_d_mat(e.factor(m).values(), t.factor(m).values())?;
    }
    Ok(out)
}

/// D for a fixed core whose basis is only determined up to rotation: the
/// estimated mean `[[F_hat; A_hat]]` is expressed in the true basis through
/// `x_k A_k'` and compared with the true core.
pub fn metric_d_fixed(f_hat: &Tensor3, a_hat: [&Mat; 3], f: &Tensor3, a: [&Mat; 3]) -> Result<f64> {
    let full = tucker_apply(f_hat, a_hat)?;
    let at = a.map(|m| m.transpose());
    let projected = tucker_apply(&full, [&at[0], &at[1], &at[2]])?;
    metric_d_tensor(&projected, f)
}
