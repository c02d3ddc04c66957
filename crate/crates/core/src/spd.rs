//! Symmetric positive-definite matrices with cached Cholesky factors, the
//! eigenvalue-floor projection, and Kronecker-separable covariance triples.

use nalgebra::{Cholesky, SymmetricEigen};

use crate::error::{Result, TmeError};
use crate::tensor::{kron, Mat, Mode};

/// Default relative eigenvalue floor used by [`spd_project`].
pub const DEFAULT_FLOOR_RATIO: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-12;

/// A symmetric positive-definite matrix.
///
/// The lower Cholesky factor, its inverse and the log-determinant are
/// computed once at construction.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    values: Mat,
    chol: Mat,
    chol_inv: Mat,
    logdet: f64,
}

impl PartialEq for SpdMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values
    }
}

impl SpdMatrix {
    pub fn new(values: Mat) -> Result<Self> {
        if !values.is_square() || values.nrows() == 0 {
            return Err(TmeError::Argument(format!(
                "covariance must be a nonempty square matrix, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TmeError::NotPositiveDefinite("non-finite entry".into()));
        }
        let scale = values.amax().max(f64::MIN_POSITIVE);
        let n = values.nrows();
        for i in 0..n {
            for j in 0..i {
                if (values[(i, j)] - values[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(TmeError::Argument(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Self::factorize(values)
    }

    fn factorize(values: Mat) -> Result<Self> {
        let n = values.nrows();
        let chol = Cholesky::new(values.clone())
            .ok_or_else(|| TmeError::NotPositiveDefinite(format!("{n}x{n} Cholesky failed")))?
            .unpack();
        let logdet = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let chol_inv = chol
            .solve_lower_triangular(&Mat::identity(n, n))
            .ok_or_else(|| TmeError::NotPositiveDefinite("singular Cholesky factor".into()))?;
        if !logdet.is_finite() || chol_inv.iter().any(|v| !v.is_finite()) {
            return Err(TmeError::NotPositiveDefinite(format!(
                "{n}x{n} factor is numerically singular"
            )));
        }
        Ok(SpdMatrix {
            values,
            chol,
            chol_inv,
            logdet,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, c: f64) -> Self {
        Self::from_diagonal(&vec![c; n]).expect("positive scaled identity")
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        if diag.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(TmeError::NotPositiveDefinite(
                "diagonal entries must be positive".into(),
            ));
        }
        Self::factorize(Mat::from_diagonal(&nalgebra::DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    /// Lower-triangular `L` with `L L^T = self`.
    pub fn chol(&self) -> &Mat {
        &self.chol
    }

    /// `L^{-1}`, the whitening transform.
    pub fn chol_inv(&self) -> &Mat {
        &self.chol_inv
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn trace(&self) -> f64 {
        self.values.trace()
    }

    pub fn inverse(&self) -> Mat {
        self.chol_inv.transpose() * &self.chol_inv
    }

    /// `self^{-1} rhs`.
    pub fn solve(&self, rhs: &Mat) -> Mat {
        self.chol_inv.transpose() * (&self.chol_inv * rhs)
    }

    /// `c * self` for `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(TmeError::Argument(format!("scale must be positive, got {c}")));
        }
        let n = self.dim() as f64;
        Ok(SpdMatrix {
            values: &self.values * c,
            chol: &self.chol * c.sqrt(),
            chol_inv: &self.chol_inv / c.sqrt(),
            logdet: self.logdet + n * c.ln(),
        })
    }
}

/// Result of [`spd_project_report`]: the projected matrix and whether any
/// eigenvalue had to be raised to the floor.
#[derive(Clone, Debug)]
pub struct Projection {
    pub matrix: SpdMatrix,
    pub floored: bool,
}

/// Symmetrize `m` and raise its eigenvalues to at least
/// `floor_ratio * trace / dim` (an absolute `floor_ratio` when the trace is
/// not positive).
pub fn spd_project(m: &Mat, floor_ratio: f64) -> Result<SpdMatrix> {
    spd_project_report(m, floor_ratio).map(|p| p.matrix)
}

pub fn spd_project_report(m: &Mat, floor_ratio: f64) -> Result<Projection> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(TmeError::Argument(format!(
            "spd_project needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(TmeError::NotPositiveDefinite("non-finite entry".into()));
    }
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let mean_eig = sym.trace() / n as f64;
    let floor = if mean_eig > 0.0 {
        floor_ratio * mean_eig
    } else {
        floor_ratio
    };
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&e| e >= floor) {
        if let Ok(matrix) = SpdMatrix::factorize(sym.clone()) {
            return Ok(Projection {
                matrix,
                floored: false,
            });
        }
    }
    let clipped = eig.eigenvalues.map(|e| e.max(floor));
    let v = &eig.eigenvectors;
    let rebuilt = v * Mat::from_diagonal(&clipped) * v.transpose();
    let rebuilt = (&rebuilt + rebuilt.transpose()) * 0.5;
    Ok(Projection {
        matrix: SpdMatrix::factorize(rebuilt)?,
        floored: true,
    })
}

/// Per-mode covariance factors `(Sigma, Psi, Omega)` of a tensor normal
/// distribution; the vec-covariance is `Omega kron Psi kron Sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovTriple {
    pub sigma: SpdMatrix,
    pub psi: SpdMatrix,
    pub omega: SpdMatrix,
}

impl CovTriple {
    pub fn new(sigma: SpdMatrix, psi: SpdMatrix, omega: SpdMatrix) -> Self {
        CovTriple { sigma, psi, omega }
    }

    pub fn identity(dims: [usize; 3]) -> Self {
        CovTriple::new(
            SpdMatrix::identity(dims[0]),
            SpdMatrix::identity(dims[1]),
            SpdMatrix::identity(dims[2]),
        )
    }

    pub fn from_factors(factors: [SpdMatrix; 3]) -> Self {
        let [sigma, psi, omega] = factors;
        CovTriple { sigma, psi, omega }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.sigma.dim(), self.psi.dim(), self.omega.dim()]
    }

    pub fn factor(&self, mode: Mode) -> &SpdMatrix {
        match mode {
            Mode::One => &self.sigma,
            Mode::Two => &self.psi,
            Mode::Three => &self.omega,
        }
    }

    pub fn factors(&self) -> [&SpdMatrix; 3] {
        [&self.sigma, &self.psi, &self.omega]
    }

    pub fn into_factors(self) -> [SpdMatrix; 3] {
        [self.sigma, self.psi, self.omega]
    }

    pub fn with_factor(&self, mode: Mode, m: SpdMatrix) -> CovTriple {
        let mut out = self.clone();
        match mode {
            Mode::One => out.sigma = m,
            Mode::Two => out.psi = m,
            Mode::Three => out.omega = m,
        }
        out
    }

    /// Dense `Omega kron Psi kron Sigma`; only sensible for small dims.
    pub fn kron_dense(&self) -> Mat {
        kron(
            &kron(self.omega.values(), self.psi.values()),
            self.sigma.values(),
        )
    }

    /// `log |Omega kron Psi kron Sigma|`.
    pub fn kron_logdet(&self) -> f64 {
        let [j, k, l] = self.dims().map(|d| d as f64);
        k * l * self.sigma.logdet() + j * l * self.psi.logdet() + j * k * self.omega.logdet()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gram(rng: &mut ChaCha8Rng, n: usize) -> Mat {
        let g = Mat::from_fn(n, n + 2, |_, _| rng.random_range(-1.0..1.0));
        &g * g.transpose()
    }

    #[test]
    fn cached_factorization_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_gram(&mut rng, 5);
        let s = SpdMatrix::new(a.clone()).unwrap();
        let rebuilt = s.chol() * s.chol().transpose();
        for (x, y) in rebuilt.iter().zip(a.iter()) {
            assert_relative_eq!(x, y, max_relative = 1e-10, epsilon = 1e-12);
        }
        let logdet = 2.0 * s.chol().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        assert_relative_eq!(s.logdet(), logdet, epsilon = 1e-14);
        assert_relative_eq!(s.logdet(), a.determinant().ln(), epsilon = 1e-10);
        let id = s.inverse() * &a;
        assert!((id - Mat::identity(5, 5)).amax() < 1e-10);
    }

    #[test]
    fn rejects_non_spd() {
        assert!(SpdMatrix::new(Mat::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0])).is_err());
        assert!(SpdMatrix::new(Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
        assert!(SpdMatrix::new(Mat::zeros(2, 3)).is_err());
        assert!(SpdMatrix::from_diagonal(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn scaled_keeps_caches_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = SpdMatrix::new(random_gram(&mut rng, 4)).unwrap();
        let t = s.scaled(3.0).unwrap();
        let direct = SpdMatrix::new(s.values() * 3.0).unwrap();
        assert_relative_eq!(t.logdet(), direct.logdet(), epsilon = 1e-12);
        assert!((t.chol() - direct.chol()).amax() < 1e-12);
        assert!((t.chol_inv() - direct.chol_inv()).amax() < 1e-10);
    }

    #[test]
    fn project_identity_is_identity() {
        let p = spd_project(&Mat::identity(3, 3), DEFAULT_FLOOR_RATIO).unwrap();
        assert_eq!(p.values(), &Mat::identity(3, 3));
    }

    #[test]
    fn project_floors_negative_eigenvalue() {
        let m = Mat::from_diagonal(&nalgebra::DVector::from_column_slice(&[1.0, -1e-14]));
        let p = spd_project_report(&m, DEFAULT_FLOOR_RATIO).unwrap();
        assert!(p.floored);
        // eigendecomposition oracle: floor = 1e-10 * trace / 2
        let floor = 1e-10 * (1.0 - 1e-14) / 2.0;
        let eig = SymmetricEigen::new(p.matrix.values().clone());
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert_relative_eq!(ev[0], floor, max_relative = 1e-6);
        assert_relative_eq!(ev[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn project_leaves_pd_gram_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_gram(&mut rng, 6);
        let p = spd_project_report(&a, DEFAULT_FLOOR_RATIO).unwrap();
        assert!(!p.floored);
        assert!((p.matrix.values() - &a).amax() <= 1e-12 * a.amax());
    }

    #[test]
    fn project_zero_matrix_uses_absolute_floor() {
        let p = spd_project(&Mat::zeros(3, 3), DEFAULT_FLOOR_RATIO).unwrap();
        assert!((p.values() - Mat::identity(3, 3) * 1e-10).amax() < 1e-20);
        assert!(spd_project(&Mat::zeros(2, 3), DEFAULT_FLOOR_RATIO).is_err());
    }

    #[test]
    fn triple_logdet_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let t = CovTriple::new(
            SpdMatrix::new(random_gram(&mut rng, 3)).unwrap(),
            SpdMatrix::new(random_gram(&mut rng, 2)).unwrap(),
            SpdMatrix::new(random_gram(&mut rng, 2)).unwrap(),
        );
        assert_relative_eq!(t.kron_logdet(), t.kron_dense().determinant().ln(), epsilon = 1e-9);
    }
}
