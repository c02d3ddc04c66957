//! Comparison estimators: tensor fixed effects (TFE) and a Tucker
//! decomposition of the mean response (TD), plus prediction and MSE.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Result, TmeError};
use crate::spd::CovTriple;
use crate::tensor::{tucker_apply, Mat, Tensor3};
use crate::tme::fit::{resolve_design, run_loop1, ConvergenceTrace, PredictionMode, TmeFit};
use crate::tme::{existence_check, DesignSpec, TmeConfig, TmeDesign};
use crate::tucker::{hooi, HOOI_DEFAULT_MAX_ITER, HOOI_DEFAULT_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKind {
    Tfe,
    Td,
}

#[derive(Clone, Debug)]
pub struct BenchFit {
    pub kind: BenchKind,
    /// Fixed-effect core.
    pub f_hat: Tensor3,
    /// Factor matrices the core is expanded with.
    pub factors: [Mat; 3],
    /// Noise covariances (TFE only).
    pub residual: Option<CovTriple>,
    /// Flip-flop trace (TFE only).
    pub trace: Option<ConvergenceTrace>,
    pub seconds: f64,
}

impl BenchFit {
    /// `[[F; factors]]`, the prediction for every sample.
    pub fn mean_prediction(&self) -> Result<Tensor3> {
        tucker_apply(&self.f_hat, [&self.factors[0], &self.factors[1], &self.factors[2]])
    }
}

/// Tensor fixed effects: `Y_i = [[F; A]] + E_i`, fitted by alternating GLS
/// and one flip-flop sweep of the noise covariances.
pub fn fit_tfe(samples: &[Tensor3], design: &DesignSpec, config: &TmeConfig) -> Result<BenchFit> {
    let start = Instant::now();
    config.validate()?;
    let first = samples.first().ok_or_else(|| TmeError::Argument("no samples".into()))?;
    let report = existence_check(first.dims(), samples.len(), &config.residual_structure[0]);
    if report.is_violated() {
        return Err(TmeError::ExistenceViolated {
            n: samples.len(),
            bound: report.necessary_bound,
        });
    }
    let (design, f0) = resolve_design(samples, design)?;
    let loop1 = run_loop1(samples, &design, f0, config)?;
    Ok(BenchFit {
        kind: BenchKind::Tfe,
        f_hat: loop1.f_hat,
        factors: design.a_owned().clone(),
        residual: Some(loop1.total),
        trace: Some(loop1.trace),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Rank-`ranks` HOOI of the mean response.
pub fn fit_td(samples: &[Tensor3], ranks: [usize; 3]) -> Result<BenchFit> {
    let start = Instant::now();
    let mean = Tensor3::mean_of(samples)?;
    let dec = hooi(&mean, ranks, HOOI_DEFAULT_MAX_ITER, HOOI_DEFAULT_TOL)?;
    Ok(BenchFit {
        kind: BenchKind::Td,
        f_hat: dec.core,
        factors: dec.factors,
        residual: None,
        trace: None,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Anything that yields a fitted value for training sample `i`.
pub trait Predictor {
    fn fitted_value(&self, i: usize, y: &Tensor3) -> Result<Tensor3>;
}

impl Predictor for BenchFit {
    fn fitted_value(&self, _i: usize, _y: &Tensor3) -> Result<Tensor3> {
        self.mean_prediction()
    }
}

/// A TME fit paired with the prediction rule used for scoring.
pub struct TmePredictor<'a> {
    pub fit: &'a TmeFit,
    pub mode: PredictionMode,
}

impl Predictor for TmePredictor<'_> {
    fn fitted_value(&self, i: usize, _y: &Tensor3) -> Result<Tensor3> {
        self.fit.fitted(i, self.mode)
    }
}

/// Fitted value `[[F; A]] + [[R; B]]` for explicit parts; with `r_hat = None`
/// the mean prediction.
pub fn predict(f_hat: &Tensor3, design: &TmeDesign, r_hat: Option<&Tensor3>) -> Result<Tensor3> {
    let fixed = tucker_apply(f_hat, design.a())?;
    match r_hat {
        Some(r) => fixed.add(&tucker_apply(r, design.b())?),
        None => Ok(fixed),
    }
}

/// `||y - y_hat||_F^2 / (J K L)`.
pub fn mse(y: &Tensor3, y_hat: &Tensor3) -> Result<f64> {
    let d = y.sub(y_hat)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / y.len() as f64)
}

/// Per-sample MSE of a predictor over the training samples.
pub fn sample_mses<P: Predictor + Sync>(predictor: &P, samples: &[Tensor3]) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, y)| mse(y, &predictor.fitted_value(i, y)?))
        .collect()
}
