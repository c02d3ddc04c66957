use crate::error::{Result, TmeError};

/// Residual covariance recipe.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseRecipe {
    /// General PD `J x J` factor, isotropic `K x K` and `L x L` factors.
    Generic,
    /// Diagonal `J x J` factor proportional to a positive signal profile,
    /// identity `K x K` and `L x L` factors.
    Raman { profile: Vec<f64> },
}

/// Random-effect covariance recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RandomRecipe {
    /// Normalized Gram matrices `G G' / d` of Gaussian `G`.
    Gram,
    /// `diag(u) + I` with `u` uniform on `[0, 1)`.
    DiagPlusIdentity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub dims: [usize; 3],
    pub fixed_ranks: [usize; 3],
    pub random_ranks: [usize; 3],
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub noise: NoiseRecipe,
    pub random: RandomRecipe,
    /// Standard deviation of the fixed-core entries.
    pub fixed_scale: f64,
    /// Average per-entry variance of the residual tensor.
    pub noise_variance: f64,
    /// Average per-entry variance of the B-expanded random effect.
    pub random_variance: f64,
}

impl SimConfig {
    /// 30 x 5 x 5 responses, cores 8 x 3 x 3 and 3 x 2 x 2, general Sigma_e
    /// and isotropic Psi_e, Omega_e.
    ///
    /// The scales give per-entry noise variance 10 and random-effect
    /// variance 2.36, so a mean-only predictor scores an MSE near 12.36.
    pub fn simulation_study() -> Self {
        SimConfig {
            dims: [30, 5, 5],
            fixed_ranks: [8, 3, 3],
            random_ranks: [3, 2, 2],
            n: 1000,
            replicates: 20,
            seed: 0,
            noise: NoiseRecipe::Generic,
            random: RandomRecipe::Gram,
            fixed_scale: 100.0,
            noise_variance: 10.0,
            random_variance: 2.36,
        }
    }

    /// 256 x 5 x 5 spectral maps with signal-dependent diagonal noise.
    pub fn raman_surrogate() -> Self {
        SimConfig {
            dims: [256, 5, 5],
            fixed_ranks: [8, 3, 3],
            random_ranks: [4, 2, 2],
            n: 600,
            replicates: 1,
            seed: 0,
            noise: NoiseRecipe::Raman {
                profile: default_raman_profile(256),
            },
            random: RandomRecipe::DiagPlusIdentity,
            fixed_scale: 100.0,
            noise_variance: 10.0,
            random_variance: 2.36,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let (d, p, q) = (self.dims[axis], self.fixed_ranks[axis], self.random_ranks[axis]);
            if d == 0 || p == 0 || q == 0 {
                return Err(TmeError::Argument(format!("mode {}: dims and ranks must be positive", axis + 1)));
            }
            if p > d {
                return Err(TmeError::RankExceedsDimension {
                    mode: axis + 1,
                    rank: p,
                    dim: d,
                });
            }
            if q > p {
                return Err(TmeError::RankExceedsDimension {
                    mode: axis + 1,
                    rank: q,
                    dim: p,
                });
            }
        }
        if self.n == 0 || self.replicates == 0 {
            return Err(TmeError::Argument("sample size and replicates must be at least 1".into()));
        }
        for (name, v) in [
            ("fixed_scale", self.fixed_scale),
            ("noise_variance", self.noise_variance),
            ("random_variance", self.random_variance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TmeError::Argument(format!("{name} must be positive, got {v}")));
            }
        }
        if let NoiseRecipe::Raman { profile } = &self.noise {
            if profile.len() != self.dims[0] {
                return Err(TmeError::DimensionMismatch(format!(
                    "signal profile has {} entries, expected {}",
                    profile.len(),
                    self.dims[0]
                )));
            }
            if profile.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(TmeError::Argument("signal profile must be strictly positive".into()));
            }
        }
        Ok(())
    }
}

/// A synthetic carbon-nanotube spectrum sampled on `j` channels (D, G and
/// 2D bands on a sloped baseline), used as a shot-noise variance profile.
pub fn default_raman_profile(j: usize) -> Vec<f64> {
    let bands = [(0.22, 0.020, 0.6), (0.45, 0.015, 1.0), (0.78, 0.030, 0.8)];
    (0..j)
        .map(|i| {
            let x = if j > 1 { i as f64 / (j - 1) as f64 } else { 0.0 };
            let peaks: f64 = bands
                .iter()
                .map(|&(c, w, h)| h / (1.0 + ((x - c) / w).powi(2)))
                .sum();
            0.3 + 0.2 * x + peaks
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        SimConfig::simulation_study().validate().unwrap();
        SimConfig::raman_surrogate().validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let mut c = SimConfig::simulation_study();
        c.n = 0;
        assert!(c.validate().is_err());
        let mut c = SimConfig::simulation_study();
        c.random_ranks = [9, 2, 2];
        assert!(c.validate().is_err());
        let mut c = SimConfig::simulation_study();
        c.noise = NoiseRecipe::Raman { profile: vec![1.0; 29] };
        assert!(c.validate().is_err());
        c.noise = NoiseRecipe::Raman { profile: vec![0.0; 30] };
        assert!(c.validate().is_err());
    }

    #[test]
    fn profile_is_positive() {
        let p = default_raman_profile(256);
        assert_eq!(p.len(), 256);
        assert!(p.iter().all(|&v| v > 0.0));
        assert_eq!(default_raman_profile(1).len(), 1);
    }
}
