//! The double flip-flop: loop 1 fits the fixed effects and total
//! covariances, loop 2 the random effects and residual covariances.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Result, TmeError};
use crate::spd::CovTriple;
use crate::tensor::{tucker_apply, Tensor3};
use crate::tensor_normal::TensorNormal3;
use crate::tme::config::{DesignSpec, RandomEffectsMethod, ResidualStructure, TmeConfig};
use crate::tme::design::TmeDesign;
use crate::tme::estimators::{
    apply_gains, convergence_index, estimate_fixed, loglik, random_effect_gains, recover_random_cov,
    update_residual_cov, update_total_cov,
};
use crate::tme::em::{em_step, initial_random, marginal_loglik, RandomPosterior};
use crate::tme::existence::existence_check;
use crate::tucker::{hooi, HOOI_DEFAULT_MAX_ITER, HOOI_DEFAULT_TOL};

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    /// Entrywise `||new - old||_1 / (d d)` for Sigma, Psi, Omega.
    pub index: [f64; 3],
    pub loglik: f64,
    /// Wall time of this iteration.
    pub seconds: f64,
    /// Some covariance update needed the eigenvalue floor.
    pub floored: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvergenceTrace {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
}

impl ConvergenceTrace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn logliks(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loglik).collect()
    }

    pub fn total_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.seconds).sum()
    }

    pub fn mean_seconds(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.total_seconds() / self.records.len() as f64
        }
    }
}

/// How fitted values are formed from a TME fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PredictionMode {
    /// `[[F; A]] + [[R_i; B]]` with the predicted random effects.
    #[default]
    WithRandomEffects,
    /// `[[F; A]]` only.
    MeanOnly,
}

#[derive(Clone, Debug)]
pub struct TmeFit {
    pub design: TmeDesign,
    pub f_hat: Tensor3,
    pub total: CovTriple,
    pub residual: CovTriple,
    pub random: CovTriple,
    pub r_hat: Vec<Tensor3>,
    pub trace1: ConvergenceTrace,
    pub trace2: ConvergenceTrace,
    /// Final loop-1 log-likelihood of the data under the total covariances.
    pub loglik: f64,
    pub method: RandomEffectsMethod,
}

impl TmeFit {
    pub fn converged(&self) -> bool {
        self.trace1.converged && self.trace2.converged
    }

    /// `[[F; A1, A2, A3]]`.
    pub fn fixed_full(&self) -> Result<Tensor3> {
        tucker_apply(&self.f_hat, self.design.a())
    }

    /// Fitted value for training sample `i`.
    pub fn fitted(&self, i: usize, mode: PredictionMode) -> Result<Tensor3> {
        let fixed = self.fixed_full()?;
        match mode {
            PredictionMode::MeanOnly => Ok(fixed),
            PredictionMode::WithRandomEffects => {
                let r = self.r_hat.get(i).ok_or_else(|| {
                    TmeError::Argument(format!("sample {i} out of range for {} fitted samples", self.r_hat.len()))
                })?;
                fixed.add(&tucker_apply(r, self.design.b())?)
            }
        }
    }

    /// Prediction for a response `y`, predicting its random effect from
    /// `y` itself with the fitted covariances.
    pub fn predict(&self, y: &Tensor3, mode: PredictionMode) -> Result<Tensor3> {
        let fixed = self.fixed_full()?;
        if y.dims() != fixed.dims() {
            return Err(TmeError::DimensionMismatch(format!(
                "response {:?} vs fit {:?}",
                y.dims(),
                fixed.dims()
            )));
        }
        match mode {
            PredictionMode::MeanOnly => Ok(fixed),
            PredictionMode::WithRandomEffects => {
                let r = self.predict_random_effect(y)?;
                fixed.add(&tucker_apply(&r, self.design.b())?)
            }
        }
    }

    /// Predicted random-effect core for a response `y`.
    pub fn predict_random_effect(&self, y: &Tensor3) -> Result<Tensor3> {
        let fixed = self.fixed_full()?;
        match self.method {
            RandomEffectsMethod::Em => RandomPosterior::new(&self.design, &self.random, &self.residual)?.mean(&y.sub(&fixed)?),
            RandomEffectsMethod::Projection => {
                let gains = random_effect_gains(&self.design, &self.random, &self.total)?;
                apply_gains(y, &fixed, &gains)
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.design)
    }
}

/// Unknowns of the model with diagonal noise covariances:
/// `P1 Q1 R1 + (P2 + P2^2 + Q2 + Q2^2 + R2 + R2^2) / 2 + J + K + L`.
pub fn parameter_count(design: &TmeDesign) -> usize {
    let core: usize = design.fixed_ranks().iter().product();
    let sym: usize = design.random_ranks().iter().map(|&d| d * (d + 1) / 2).sum();
    core + sym + design.dims().iter().sum::<usize>()
}

pub(crate) struct Loop1Result {
    pub f_hat: Tensor3,
    pub total: CovTriple,
    pub trace: ConvergenceTrace,
    pub loglik: f64,
}

/// Alternates total-covariance sweeps and GLS fixed-effect updates.
pub(crate) fn run_loop1(samples: &[Tensor3], design: &TmeDesign, f_init: Tensor3, config: &TmeConfig) -> Result<Loop1Result> {
    let a = design.a();
    let mut f_hat = f_init;
    let mut total = CovTriple::identity(design.dims());
    let mut trace = ConvergenceTrace::default();
    let mut ll = f64::NEG_INFINITY;
    for iter in 1..=config.loop1_max {
        let start = Instant::now();
        let center = tucker_apply(&f_hat, a)?;
        let sweep = update_total_cov(samples, &center, &total, config.normalization, config.eigen_floor_ratio)?;
        let index = convergence_index(&sweep.triple, &total);
        total = sweep.triple;
        f_hat = estimate_fixed(samples, &[a], &[&total])?;
        ll = loglik(samples, &tucker_apply(&f_hat, a)?, &total)?;
        if !ll.is_finite() {
            return Err(TmeError::NonFiniteLikelihood {
                loop_index: 1,
                iteration: iter,
            });
        }
        trace.records.push(IterationRecord {
            iter,
            index,
            loglik: ll,
            seconds: start.elapsed().as_secs_f64(),
            floored: sweep.floored,
        });
        if index.iter().all(|&v| v < config.loop1_tol) {
            trace.converged = true;
            break;
        }
    }
    Ok(Loop1Result {
        f_hat,
        total,
        trace,
        loglik: ll,
    })
}

fn check_samples(samples: &[Tensor3]) -> Result<[usize; 3]> {
    let first = samples.first().ok_or_else(|| TmeError::Argument("no samples".into()))?;
    let dims = first.dims();
    if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.dims() != dims) {
        return Err(TmeError::DimensionMismatch(format!(
            "sample {i} has dims {:?}, expected {:?}",
            s.dims(),
            dims
        )));
    }
    Ok(dims)
}

/// Resolves the design and the starting fixed core.
pub(crate) fn resolve_design(samples: &[Tensor3], spec: &DesignSpec) -> Result<(TmeDesign, Tensor3)> {
    let dims = check_samples(samples)?;
    match spec {
        DesignSpec::Given(design) => {
            if design.dims() != dims {
                return Err(TmeError::DimensionMismatch(format!(
                    "design dims {:?} vs samples {:?}",
                    design.dims(),
                    dims
                )));
            }
            let id = CovTriple::identity(dims);
            let f0 = estimate_fixed(samples, &[design.a()], &[&id])?;
            Ok((design.clone(), f0))
        }
        DesignSpec::Auto {
            fixed_ranks,
            random_ranks,
            subsets,
        } => {
            for axis in 0..3 {
                if random_ranks[axis] > fixed_ranks[axis] {
                    return Err(TmeError::RankExceedsDimension {
                        mode: axis + 1,
                        rank: random_ranks[axis],
                        dim: fixed_ranks[axis],
                    });
                }
            }
            let mean = Tensor3::mean_of(samples)?;
            let dec = hooi(&mean, *fixed_ranks, HOOI_DEFAULT_MAX_ITER, HOOI_DEFAULT_TOL)?;
            let design = match subsets {
                Some(s) => {
                    for (axis, cols) in s.iter().enumerate() {
                        if cols.len() != random_ranks[axis] {
                            return Err(TmeError::Argument(format!(
                                "B{} subset has {} columns but random rank is {}",
                                axis + 1,
                                cols.len(),
                                random_ranks[axis]
                            )));
                        }
                    }
                    TmeDesign::from_column_subsets(dec.factors, s)?
                }
                None => TmeDesign::from_leading_columns(dec.factors, *random_ranks)?,
            };
            Ok((design, dec.core))
        }
    }
}

/// Fits the TME model by the double flip-flop algorithm.
pub fn fit_tme(samples: &[Tensor3], design: &DesignSpec, config: &TmeConfig) -> Result<TmeFit> {
    config.validate()?;
    let dims = check_samples(samples)?;
    for (axis, s) in config.residual_structure.iter().enumerate() {
        if let ResidualStructure::GivenDiagonal(p) = s {
            if p.len() != dims[axis] {
                return Err(TmeError::DimensionMismatch(format!(
                    "noise profile for mode {} has {} entries, expected {}",
                    axis + 1,
                    p.len(),
                    dims[axis]
                )));
            }
        }
    }
    let report = existence_check(dims, samples.len(), &config.residual_structure[0]);
    if report.is_violated() {
        return Err(TmeError::ExistenceViolated {
            n: samples.len(),
            bound: report.necessary_bound,
        });
    }
    let (design, f0) = resolve_design(samples, design)?;

    let loop1 = run_loop1(samples, &design, f0, config)?;
    let fixed_full = tucker_apply(&loop1.f_hat, design.a())?;
    let loop2 = match config.random_effects {
        RandomEffectsMethod::Em => loop2_em(samples, &fixed_full, &design, &loop1.total, config)?,
        RandomEffectsMethod::Projection => loop2_projection(samples, &fixed_full, &design, &loop1.total, config)?,
    };

    Ok(TmeFit {
        design,
        f_hat: loop1.f_hat,
        total: loop1.total,
        residual: loop2.residual,
        random: loop2.random,
        r_hat: loop2.r_hat,
        trace1: loop1.trace,
        trace2: loop2.trace,
        loglik: loop1.loglik,
        method: config.random_effects,
    })
}

struct Loop2Result {
    residual: CovTriple,
    random: CovTriple,
    r_hat: Vec<Tensor3>,
    trace: ConvergenceTrace,
}

fn finite_or(ll: f64, iteration: usize) -> Result<f64> {
    if ll.is_finite() {
        Ok(ll)
    } else {
        Err(TmeError::NonFiniteLikelihood { loop_index: 2, iteration })
    }
}

fn loop2_em(
    samples: &[Tensor3],
    fixed_full: &Tensor3,
    design: &TmeDesign,
    total: &CovTriple,
    config: &TmeConfig,
) -> Result<Loop2Result> {
    let mut residual = total.clone();
    let mut random = initial_random(design, total, config.normalization, config.eigen_floor_ratio)?;
    let mut trace = ConvergenceTrace::default();
    for iter in 1..=config.loop2_max {
        let start = Instant::now();
        let step = em_step(
            samples,
            fixed_full,
            design,
            &random,
            &residual,
            &config.residual_structure,
            config.normalization,
            config.eigen_floor_ratio,
        )?;
        let index = convergence_index(&step.residual, &residual);
        residual = step.residual;
        random = step.random;
        let ll = finite_or(marginal_loglik(samples, fixed_full, design, &random, &residual)?, iter)?;
        trace.records.push(IterationRecord {
            iter,
            index,
            loglik: ll,
            seconds: start.elapsed().as_secs_f64(),
            floored: step.floored,
        });
        if index.iter().all(|&v| v < config.loop2_tol) {
            trace.converged = true;
            break;
        }
    }
    let post = RandomPosterior::new(design, &random, &residual)?;
    let r_hat = samples
        .par_iter()
        .map(|y| post.mean(&y.sub(fixed_full)?))
        .collect::<Result<_>>()?;
    Ok(Loop2Result {
        residual,
        random,
        r_hat,
        trace,
    })
}

fn loop2_projection(
    samples: &[Tensor3],
    fixed_full: &Tensor3,
    design: &TmeDesign,
    total: &CovTriple,
    config: &TmeConfig,
) -> Result<Loop2Result> {
    let dims = design.dims();
    let b = design.b();
    let predict_all = |random: &CovTriple| -> Result<(Vec<Tensor3>, Vec<Tensor3>)> {
        let gains = random_effect_gains(design, random, total)?;
        let r_hat: Vec<Tensor3> = samples
            .par_iter()
            .map(|y| apply_gains(y, fixed_full, &gains))
            .collect::<Result<_>>()?;
        let full: Vec<Tensor3> = r_hat.par_iter().map(|r| tucker_apply(r, b)).collect::<Result<_>>()?;
        Ok((r_hat, full))
    };

    let mut residual = CovTriple::identity(dims);
    let mut random = recover_random_cov(total, &residual, design, config.eigen_floor_ratio)?;
    let (mut r_hat, mut r_full) = predict_all(&random)?;
    let mut trace = ConvergenceTrace::default();
    for iter in 1..=config.loop2_max {
        let start = Instant::now();
        let sweep = update_residual_cov(
            samples,
            fixed_full,
            &r_full,
            &residual,
            &config.residual_structure,
            config.normalization,
            config.eigen_floor_ratio,
        )?;
        let index = convergence_index(&sweep.triple, &residual);
        residual = sweep.triple;
        random = recover_random_cov(total, &residual, design, config.eigen_floor_ratio)?;
        (r_hat, r_full) = predict_all(&random)?;
        let dist = TensorNormal3::new(Tensor3::zeros(dims)?, residual.clone())?;
        let ll: f64 = samples
            .par_iter()
            .zip(r_full.par_iter())
            .map(|(y, r)| dist.log_density(&y.sub(fixed_full)?.sub(r)?))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .sum();
        let ll = finite_or(ll, iter)?;
        trace.records.push(IterationRecord {
            iter,
            index,
            loglik: ll,
            seconds: start.elapsed().as_secs_f64(),
            floored: sweep.floored,
        });
        if index.iter().all(|&v| v < config.loop2_tol) {
            trace.converged = true;
            break;
        }
    }
    Ok(Loop2Result {
        residual,
        random,
        r_hat,
        trace,
    })
}

/// Stacks the B-expanded random effects of a fit, mainly for diagnostics.
pub fn expand_random_effects(fit: &TmeFit) -> Result<Vec<Tensor3>> {
    fit.r_hat.iter().map(|r| tucker_apply(r, fit.design.b())).collect()
}
