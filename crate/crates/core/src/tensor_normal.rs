//! The array-normal distribution `N_{J,K,L}(M; Sigma, Psi, Omega)`.
//!
//! Densities are evaluated factor-wise through triangular whitening along
//! each mode, so the JKL x JKL covariance is never formed.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TmeError};
use crate::spd::CovTriple;
use crate::tensor::{Mat, Mode, Tensor3};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug)]
pub struct TensorNormal3 {
    mean: Tensor3,
    cov: CovTriple,
}

impl TensorNormal3 {
    pub fn new(mean: Tensor3, cov: CovTriple) -> Result<Self> {
        if mean.dims() != cov.dims() {
            return Err(TmeError::DimensionMismatch(format!(
                "mean {:?} vs covariance factors {:?}",
                mean.dims(),
                cov.dims()
            )));
        }
        Ok(TensorNormal3 { mean, cov })
    }

    pub fn mean(&self) -> &Tensor3 {
        &self.mean
    }

    pub fn cov(&self) -> &CovTriple {
        &self.cov
    }

    pub fn dims(&self) -> [usize; 3] {
        self.mean.dims()
    }

    fn check(&self, y: &Tensor3) -> Result<()> {
        if y.dims() != self.dims() {
            return Err(TmeError::DimensionMismatch(format!(
                "observation {:?} vs distribution {:?}",
                y.dims(),
                self.dims()
            )));
        }
        Ok(())
    }

    fn constant(&self) -> f64 {
        let n = self.mean.len() as f64;
        -0.5 * n * LN_2PI - 0.5 * self.cov.kron_logdet()
    }

    pub fn log_density(&self, y: &Tensor3) -> Result<f64> {
        self.check(y)?;
        let w = whiten(&y.sub(&self.mean)?, &self.cov, None)?;
        let q: f64 = w.data().iter().map(|v| v * v).sum();
        Ok(self.constant() - 0.5 * q)
    }

    /// Same density computed from the mode-k matrix-normal form: the
    /// quadratic term is `tr(C_k^{-1} E_(k) (C_b kron C_a)^{-1} E_(k)^T)`.
    pub fn log_density_via_mode(&self, y: &Tensor3, mode: Mode) -> Result<f64> {
        self.check(y)?;
        let w = whiten(&y.sub(&self.mean)?, &self.cov, Some(mode))?;
        let wk = w.matricize(mode);
        let gram = &wk * wk.transpose();
        let inv = self.cov.factor(mode).inverse();
        let q = inv.component_mul(&gram).sum();
        Ok(self.constant() - 0.5 * q)
    }

    /// `n` independent draws `mean + Z x1 L_Sigma x2 L_Psi x3 L_Omega`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Tensor3>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Tensor3> {
        let z = standard_normal_tensor(self.dims(), rng);
        let colored = color(&z, &self.cov)?;
        colored.add(&self.mean)
    }
}

pub(crate) fn standard_normal_tensor<R: Rng + ?Sized>(dims: [usize; 3], rng: &mut R) -> Tensor3 {
    let n = dims[0] * dims[1] * dims[2];
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor3::from_raw(dims, data)
}

/// `z x1 L_Sigma x2 L_Psi x3 L_Omega`.
pub(crate) fn color(z: &Tensor3, cov: &CovTriple) -> Result<Tensor3> {
    z.mode_product(Mode::One, cov.sigma.chol())?
        .mode_product(Mode::Two, cov.psi.chol())?
        .mode_product(Mode::Three, cov.omega.chol())
}

/// Applies `L_k^{-1}` along every mode except `skip`.
pub fn whiten(t: &Tensor3, cov: &CovTriple, skip: Option<Mode>) -> Result<Tensor3> {
    let mut out = t.clone();
    for mode in Mode::ALL {
        if Some(mode) != skip {
            out = out.mode_product(mode, cov.factor(mode).chol_inv())?;
        }
    }
    Ok(out)
}

/// Dense multivariate normal log-density; reference implementation for
/// small dimensions.
pub fn dense_mvn_log_density(x: &nalgebra::DVector<f64>, mean: &nalgebra::DVector<f64>, cov: &Mat) -> Result<f64> {
    let n = x.len();
    let chol = nalgebra::Cholesky::new(cov.clone())
        .ok_or_else(|| TmeError::NotPositiveDefinite("dense covariance".into()))?;
    let d = x - mean;
    let sol = chol.solve(&d);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * n as f64 * LN_2PI - 0.5 * logdet - 0.5 * d.dot(&sol))
}
