//! Expectation-maximization for the random-effect and residual covariances
//! with the fixed part held at its loop-1 estimate.
//!
//! Given `R ~ N(0; X1, X2, X3)` and `E ~ N(0; S1, S2, S3)`, the posterior
//! of `vec R` given `Y` has precision `kron(X)^{-1} + kron(B' S^{-1} B)`,
//! a dense matrix of side `P2 Q2 R2`. Its covariance enters both M-steps
//! as a handful of eigen-tensors, so every update stays a flip-flop sweep.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Result, TmeError};
use crate::spd::{spd_project, CovTriple, SpdMatrix};
use crate::tensor::{kron, tucker_apply, Mat, Mode, Tensor3};
use crate::tensor_normal::whiten;
use crate::tme::config::{Normalization, ResidualStructure};
use crate::tme::design::TmeDesign;
use crate::tme::estimators::{normalize_identifiability, sweep_with_spread};

/// Posterior of the random-effect cores under given covariances.
#[derive(Clone, Debug)]
pub struct RandomPosterior {
    ranks: [usize; 3],
    /// `B_k' S_k^{-1}`.
    projectors: [Mat; 3],
    cov: Mat,
    precision_logdet: f64,
}

impl RandomPosterior {
    pub fn new(design: &TmeDesign, random: &CovTriple, residual: &CovTriple) -> Result<Self> {
        let ranks = design.random_ranks();
        if random.dims() != ranks || residual.dims() != design.dims() {
            return Err(TmeError::DimensionMismatch(format!(
                "random {:?} / residual {:?} vs design ranks {:?} / dims {:?}",
                random.dims(),
                residual.dims(),
                ranks,
                design.dims()
            )));
        }
        let b = design.b();
        let projectors = Mode::ALL.map(|m| residual.factor(m).solve(b[m.axis()]).transpose());
        let grams = Mode::ALL.map(|m| &projectors[m.axis()] * b[m.axis()]);
        let prior_inv = Mode::ALL.map(|m| random.factor(m).inverse());
        let precision = kron(&kron(&prior_inv[2], &prior_inv[1]), &prior_inv[0])
            + kron(&kron(&grams[2], &grams[1]), &grams[0]);
        let precision = (&precision + precision.transpose()) * 0.5;
        let chol = precision
            .cholesky()
            .ok_or_else(|| TmeError::NotPositiveDefinite("random-effect posterior precision".into()))?;
        let precision_logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let cov = chol.inverse();
        Ok(RandomPosterior {
            ranks,
            projectors,
            cov: (&cov + cov.transpose()) * 0.5,
            precision_logdet,
        })
    }

    /// `kron(B' S^{-1}) vec(centered)` as a core-shaped tensor.
    fn project(&self, centered: &Tensor3) -> Result<Tensor3> {
        centered
            .mode_product(Mode::One, &self.projectors[0])?
            .mode_product(Mode::Two, &self.projectors[1])?
            .mode_product(Mode::Three, &self.projectors[2])
    }

    /// `E[R | Y]` for a response already centered at the fixed effect.
    pub fn mean(&self, centered: &Tensor3) -> Result<Tensor3> {
        let z = self.project(centered)?;
        let v = &self.cov * z.vec();
        Tensor3::new(self.ranks, v.as_slice().to_vec())
    }

    /// `Cov(vec R | Y)`, shared by all samples.
    pub fn cov(&self) -> &Mat {
        &self.cov
    }

    /// Core-shaped tensors `T_s` with `sum_s vec(T_s) vec(T_s)' = Cov(vec R | Y)`.
    pub fn spread(&self) -> Result<Vec<Tensor3>> {
        let eig = self.cov.clone().symmetric_eigen();
        (0..eig.eigenvalues.len())
            .filter(|&s| eig.eigenvalues[s] > 0.0)
            .map(|s| {
                let c = eig.eigenvalues[s].sqrt();
                let v: Vec<f64> = eig.eigenvectors.column(s).iter().map(|x| x * c).collect();
                Tensor3::new(self.ranks, v)
            })
            .collect()
    }
}

/// Log-likelihood of the responses under the mixed model with the random
/// effect integrated out, `vec Y ~ N(vec F, kron(B X B') + kron(S))`.
pub fn marginal_loglik(
    samples: &[Tensor3],
    fixed_full: &Tensor3,
    design: &TmeDesign,
    random: &CovTriple,
    residual: &CovTriple,
) -> Result<f64> {
    let post = RandomPosterior::new(design, random, residual)?;
    marginal_loglik_with(samples, fixed_full, random, residual, &post)
}

fn marginal_loglik_with(
    samples: &[Tensor3],
    fixed_full: &Tensor3,
    random: &CovTriple,
    residual: &CovTriple,
    post: &RandomPosterior,
) -> Result<f64> {
    let n = fixed_full.len() as f64;
    let logdet = residual.kron_logdet() + random.kron_logdet() + post.precision_logdet;
    let quads: Vec<f64> = samples
        .par_iter()
        .map(|y| {
            let e = y.sub(fixed_full)?;
            let w = whiten(&e, residual, None)?;
            let z = post.project(&e)?.vec();
            Ok(w.frob_norm().powi(2) - (z.transpose() * &post.cov * &z)[(0, 0)])
        })
        .collect::<Result<_>>()?;
    Ok(quads
        .into_iter()
        .map(|q| -0.5 * (n * (2.0 * PI).ln() + logdet + q))
        .sum())
}

#[derive(Clone, Debug)]
pub struct EmStep {
    pub residual: CovTriple,
    pub random: CovTriple,
    /// Posterior means under the parameters the step started from.
    pub r_hat: Vec<Tensor3>,
    pub floored: bool,
}

/// One EM iteration: posterior under the current parameters, then one
/// flip-flop sweep for the residual triple (with its declared structure)
/// and one for the random triple.
pub fn em_step(
    samples: &[Tensor3],
    fixed_full: &Tensor3,
    design: &TmeDesign,
    random: &CovTriple,
    residual: &CovTriple,
    structures: &[ResidualStructure; 3],
    normalization: Normalization,
    floor_ratio: f64,
) -> Result<EmStep> {
    let post = RandomPosterior::new(design, random, residual)?;
    let b = design.b();
    let r_hat: Vec<Tensor3> = samples
        .par_iter()
        .map(|y| post.mean(&y.sub(fixed_full)?))
        .collect::<Result<_>>()?;
    let spread = post.spread()?;
    let residuals: Vec<Tensor3> = samples
        .par_iter()
        .zip(r_hat.par_iter())
        .map(|(y, r)| y.sub(fixed_full)?.sub(&tucker_apply(r, b)?))
        .collect::<Result<_>>()?;
    let spread_full: Vec<Tensor3> = spread.iter().map(|t| tucker_apply(t, b)).collect::<Result<_>>()?;
    let res = sweep_with_spread(&residuals, &spread_full, residual, Some(structures), normalization, floor_ratio)?;
    let rnd = sweep_with_spread(&r_hat, &spread, random, None, normalization, floor_ratio)?;
    Ok(EmStep {
        residual: res.triple,
        random: rnd.triple,
        r_hat,
        floored: res.floored || rnd.floored,
    })
}

/// Starting random triple `B_k' C_k B_k` from the total covariances, which
/// attributes all variation inside the span of B to the random effect.
pub fn initial_random(design: &TmeDesign, total: &CovTriple, normalization: Normalization, floor_ratio: f64) -> Result<CovTriple> {
    let b = design.b();
    let factors: Vec<SpdMatrix> = Mode::ALL
        .iter()
        .map(|&m| spd_project(&(b[m.axis()].transpose() * total.factor(m).values() * b[m.axis()]), floor_ratio))
        .collect::<Result<_>>()?;
    let [s, p, o]: [SpdMatrix; 3] = factors.try_into().expect("three modes");
    Ok(normalize_identifiability(&CovTriple::new(s, p, o), normalization))
}
