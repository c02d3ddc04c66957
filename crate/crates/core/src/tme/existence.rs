//! Sample-size conditions for the existence of the covariance MLEs.

use crate::tme::config::ResidualStructure;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SufficientRule {
    /// `N >= JKL`.
    FullSample,
    /// Diagonal `Sigma` and `N >= max(KL, bound)`.
    DiagonalSigma,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExistenceVerdict {
    Ok(SufficientRule),
    /// Necessary condition holds but no sufficient condition does.
    SufficientUnmet,
    /// `N < max(J/KL, K/JL, L/JK) + 1`; the MLE cannot exist.
    NecessaryViolated,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExistenceReport {
    pub dims: [usize; 3],
    pub n: usize,
    /// `max(J/KL, K/JL, L/JK) + 1`.
    pub necessary_bound: f64,
    pub verdict: ExistenceVerdict,
}

impl ExistenceReport {
    pub fn is_violated(&self) -> bool {
        self.verdict == ExistenceVerdict::NecessaryViolated
    }
}

pub fn necessary_bound(dims: [usize; 3]) -> f64 {
    let [j, k, l] = dims.map(|d| d as f64);
    (j / (k * l)).max(k / (j * l)).max(l / (j * k)) + 1.0
}

/// Classifies `n` against the necessary bound and the two sufficient
/// conditions; `sigma_structure` decides whether the diagonal-`Sigma`
/// condition applies.
pub fn existence_check(dims: [usize; 3], n: usize, sigma_structure: &ResidualStructure) -> ExistenceReport {
    let bound = necessary_bound(dims);
    let nf = n as f64;
    let [j, k, l] = dims;
    let verdict = if nf < bound {
        ExistenceVerdict::NecessaryViolated
    } else if n >= j * k * l {
        ExistenceVerdict::Ok(SufficientRule::FullSample)
    } else if sigma_structure.is_diagonal() && nf >= ((k * l) as f64).max(bound) {
        ExistenceVerdict::Ok(SufficientRule::DiagonalSigma)
    } else {
        ExistenceVerdict::SufficientUnmet
    };
    ExistenceReport {
        dims,
        n,
        necessary_bound: bound,
        verdict,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tall_tensor_with_two_samples_is_rejected() {
        let r = existence_check([30, 5, 5], 2, &ResidualStructure::General);
        assert!((r.necessary_bound - 2.2).abs() < 1e-12);
        assert_eq!(r.verdict, ExistenceVerdict::NecessaryViolated);
    }

    #[test]
    fn full_sample_condition() {
        let r = existence_check([2, 2, 2], 8, &ResidualStructure::General);
        assert_eq!(r.verdict, ExistenceVerdict::Ok(SufficientRule::FullSample));
        let r = existence_check([2, 2, 2], 7, &ResidualStructure::General);
        assert_eq!(r.verdict, ExistenceVerdict::SufficientUnmet);
    }

    #[test]
    fn diagonal_sigma_condition() {
        let r = existence_check([30, 5, 5], 600, &ResidualStructure::Diagonal);
        assert_eq!(r.verdict, ExistenceVerdict::Ok(SufficientRule::DiagonalSigma));
        let r = existence_check([30, 5, 5], 600, &ResidualStructure::General);
        assert_eq!(r.verdict, ExistenceVerdict::SufficientUnmet);
        let r = existence_check([30, 5, 5], 24, &ResidualStructure::Diagonal);
        assert_eq!(r.verdict, ExistenceVerdict::SufficientUnmet);
    }
}
