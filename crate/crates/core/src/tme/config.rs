use crate::error::{Result, TmeError};
use crate::spd::DEFAULT_FLOOR_RATIO;
use crate::tme::design::TmeDesign;

/// Structural constraint applied to one residual covariance factor after
/// each flip-flop update.
#[derive(Clone, Debug, PartialEq)]
pub enum ResidualStructure {
    /// No constraint.
    General,
    /// Off-diagonal entries set to zero.
    Diagonal,
    /// Replaced by `(trace / dim) I`.
    Isotropic,
    /// `c * diag(profile)` with the scalar `c > 0` fitted by maximum likelihood.
    GivenDiagonal(Vec<f64>),
}

impl ResidualStructure {
    pub fn is_diagonal(&self) -> bool {
        !matches!(self, ResidualStructure::General)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ResidualStructure::General => "general",
            ResidualStructure::Diagonal => "diagonal",
            ResidualStructure::Isotropic => "isotropic",
            ResidualStructure::GivenDiagonal(_) => "given",
        }
    }
}

/// Gauge fixing for the Kronecker scale ambiguity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// `tr(Psi) = K`, `tr(Omega) = L`; the scale lives in `Sigma`.
    Trace,
    /// `det(Psi) = det(Omega) = 1`; the scale lives in `Sigma`.
    Determinant,
}

/// How loop 2 estimates the random-effect and residual covariances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RandomEffectsMethod {
    /// EM on the mixed model with the random effect integrated out; the
    /// predicted random effects are posterior means.
    #[default]
    Em,
    /// Residual sweeps on plug-in residuals, random covariances read off
    /// the difference of total and residual factors, and gains built from
    /// the total covariances.
    Projection,
}

#[derive(Clone, Debug)]
pub struct TmeConfig {
    pub loop1_tol: f64,
    pub loop2_tol: f64,
    pub loop1_max: usize,
    pub loop2_max: usize,
    pub residual_structure: [ResidualStructure; 3],
    pub normalization: Normalization,
    pub eigen_floor_ratio: f64,
    pub random_effects: RandomEffectsMethod,
}

impl Default for TmeConfig {
    fn default() -> Self {
        TmeConfig {
            loop1_tol: 1e-4,
            loop2_tol: 1e-4,
            loop1_max: 100,
            loop2_max: 100,
            residual_structure: [
                ResidualStructure::General,
                ResidualStructure::General,
                ResidualStructure::General,
            ],
            normalization: Normalization::Trace,
            eigen_floor_ratio: DEFAULT_FLOOR_RATIO,
            random_effects: RandomEffectsMethod::default(),
        }
    }
}

impl TmeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, tol) in [("loop1_tol", self.loop1_tol), ("loop2_tol", self.loop2_tol)] {
            if !(tol > 0.0 && tol.is_finite()) {
                return Err(TmeError::Argument(format!("{name} must be positive, got {tol}")));
            }
        }
        if self.loop1_max == 0 || self.loop2_max == 0 {
            return Err(TmeError::Argument("iteration limits must be at least 1".into()));
        }
        if !(self.eigen_floor_ratio > 0.0 && self.eigen_floor_ratio < 1.0) {
            return Err(TmeError::Argument(format!(
                "eigen_floor_ratio must lie in (0, 1), got {}",
                self.eigen_floor_ratio
            )));
        }
        for s in &self.residual_structure {
            if let ResidualStructure::GivenDiagonal(p) = s {
                if p.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return Err(TmeError::Argument("noise profile must be strictly positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// How [`crate::tme::fit_tme`] obtains its design matrices.
#[derive(Clone, Debug)]
pub enum DesignSpec {
    Given(TmeDesign),
    /// HOOI of the mean response at `fixed_ranks`; B-matrices are the listed
    /// columns of each A-matrix, or the leading `random_ranks` columns.
    Auto {
        fixed_ranks: [usize; 3],
        random_ranks: [usize; 3],
        subsets: Option<[Vec<usize>; 3]>,
    },
}

impl DesignSpec {
    pub fn auto(fixed_ranks: [usize; 3], random_ranks: [usize; 3]) -> Self {
        DesignSpec::Auto {
            fixed_ranks,
            random_ranks,
            subsets: None,
        }
    }
}
