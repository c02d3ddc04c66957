use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::simlab::config::{NoiseRecipe, RandomRecipe, SimConfig};
use crate::spd::{spd_project, CovTriple, SpdMatrix};
use crate::tensor::{tucker_apply, Mat, Mode, Tensor3};
use crate::tensor_normal::TensorNormal3;
use crate::tme::{normalize_identifiability, Normalization, TmeDesign};
use crate::tucker::{hooi, HOOI_DEFAULT_MAX_ITER, HOOI_DEFAULT_TOL};

/// Parameters of a simulated data set and the responses drawn from them.
#[derive(Clone, Debug, PartialEq)]
pub struct SimTruth {
    pub design: TmeDesign,
    pub f: Tensor3,
    pub random: CovTriple,
    pub residual: CovTriple,
    pub samples: Vec<Tensor3>,
}

impl SimTruth {
    pub fn fixed_full(&self) -> Result<Tensor3> {
        tucker_apply(&self.f, self.design.a())
    }

    /// Kronecker triple closest in Kullback-Leibler divergence to the
    /// response covariance `kron(B X B') + kron(S)`: the population fixed
    /// point of the flip-flop sweep, hence the target of the fitted total
    /// triple. Each mode update has the closed form
    /// `C_k = sum_m M_k^m prod_{i != k} tr(C_i^{-1} M_i^m) / n_other` over the
    /// two Kronecker terms `m`.
    pub fn total(&self) -> Result<CovTriple> {
        let b = self.design.b();
        let terms: [[Mat; 3]; 2] = [
            Mode::ALL.map(|m| {
                let bm = b[m.axis()];
                bm * self.random.factor(m).values() * bm.transpose()
            }),
            Mode::ALL.map(|m| self.residual.factor(m).values().clone()),
        ];
        let dims = self.residual.dims();
        let mut cur = self.residual.clone();
        for _ in 0..500 {
            let mut next = cur.clone();
            for m in Mode::ALL {
                let k = m.axis();
                let others = m.others();
                let n_other = (dims[others[0].axis()] * dims[others[1].axis()]) as f64;
                let mut acc = Mat::zeros(dims[k], dims[k]);
                for t in &terms {
                    let w: f64 = others
                        .iter()
                        .map(|o| next.factor(*o).solve(&t[o.axis()]).trace())
                        .product();
                    acc += &t[k] * (w / n_other);
                }
                next = next.with_factor(m, SpdMatrix::new((&acc + acc.transpose()) * 0.5)?);
            }
            let next = normalize_identifiability(&next, Normalization::Trace);
            let change: f64 = Mode::ALL
                .iter()
                .map(|&m| (next.factor(m).values() - cur.factor(m).values()).norm() / cur.factor(m).values().norm())
                .sum();
            cur = next;
            if change < 1e-13 {
                break;
            }
        }
        Ok(cur)
    }

    /// Dense `kron(B X B') + kron(S)`, the covariance of `vec Y`.
    pub fn response_cov_dense(&self) -> Mat {
        let b = self.design.b();
        let xb = crate::tensor::kron(&crate::tensor::kron(b[2], b[1]), b[0]);
        &xb * self.random.kron_dense() * xb.transpose() + self.residual.kron_dense()
    }
}

fn gaussian_mat<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let q = gaussian_mat(rng, rows, cols).qr().q();
    q.columns(0, cols).into_owned()
}

fn gram_cov<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Result<SpdMatrix> {
    let g = gaussian_mat(rng, d, d);
    spd_project(&(&g * g.transpose() / d as f64), crate::spd::DEFAULT_FLOOR_RATIO)
}

fn with_trace(m: &SpdMatrix, target: f64) -> Result<SpdMatrix> {
    m.scaled(target / m.trace())
}

/// Draws a ground truth and `cfg.n` responses from
/// `Y_i = [[F; A]] + [[R_i; B]] + E_i`.
///
/// The fixed part is re-expressed through HOOI of `[[F; A]]` (exact at the
/// configured ranks), so the columns of A are ordered by mode-wise singular
/// value as in a fitted design, and B takes the leading columns.
pub fn gen_truth<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<SimTruth> {
    cfg.validate()?;
    let dims = cfg.dims;
    let raw_a = [0, 1, 2].map(|k| random_orthonormal(rng, dims[k], cfg.fixed_ranks[k]));
    let raw_f = Tensor3::from_fn(cfg.fixed_ranks, |_, _, _| cfg.fixed_scale * rng.sample::<f64, _>(StandardNormal))?;
    let full = tucker_apply(&raw_f, [&raw_a[0], &raw_a[1], &raw_a[2]])?;
    let dec = hooi(&full, cfg.fixed_ranks, HOOI_DEFAULT_MAX_ITER, HOOI_DEFAULT_TOL)?;
    let design = TmeDesign::from_leading_columns(dec.factors, cfg.random_ranks)?;
    let f = dec.core;

    let rr = cfg.random_ranks;
    let base: Vec<SpdMatrix> = rr
        .iter()
        .map(|&d| match cfg.random {
            RandomRecipe::Gram => gram_cov(rng, d),
            RandomRecipe::DiagPlusIdentity => {
                let u: Vec<f64> = (0..d).map(|_| 1.0 + rng.random::<f64>()).collect();
                SpdMatrix::from_diagonal(&u)
            }
        })
        .collect::<Result<_>>()?;
    let total_power = cfg.random_variance * dims.iter().product::<usize>() as f64;
    let random = CovTriple::new(
        with_trace(&base[0], total_power / (rr[1] * rr[2]) as f64)?,
        with_trace(&base[1], rr[1] as f64)?,
        with_trace(&base[2], rr[2] as f64)?,
    );

    let sigma_e = match &cfg.noise {
        NoiseRecipe::Generic => with_trace(&gram_cov(rng, dims[0])?, cfg.noise_variance * dims[0] as f64)?,
        NoiseRecipe::Raman { profile } => {
            with_trace(&SpdMatrix::from_diagonal(profile)?, cfg.noise_variance * dims[0] as f64)?
        }
    };
    let residual = CovTriple::new(sigma_e, SpdMatrix::identity(dims[1]), SpdMatrix::identity(dims[2]));

    let fixed = tucker_apply(&f, design.a())?;
    let rdist = TensorNormal3::new(Tensor3::zeros(rr)?, random.clone())?;
    let edist = TensorNormal3::new(fixed, residual.clone())?;
    let samples = (0..cfg.n)
        .map(|_| {
            let r = rdist.sample_one(rng)?;
            edist.sample_one(rng)?.add(&tucker_apply(&r, design.b())?)
        })
        .collect::<Result<_>>()?;
    Ok(SimTruth {
        design,
        f,
        random,
        residual,
        samples,
    })
}

/// Truth triples in the gauge used by the fits, for covariance metrics.
pub fn normalized(triple: &CovTriple) -> CovTriple {
    normalize_identifiability(triple, Normalization::Trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> SimConfig {
        SimConfig {
            dims: [3, 2, 2],
            fixed_ranks: [2, 2, 1],
            random_ranks: [1, 1, 1],
            n: 20,
            ..SimConfig::simulation_study()
        }
    }

    #[test]
    fn same_seed_same_truth() {
        let cfg = small();
        let a = gen_truth(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gen_truth(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let c = gen_truth(&cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn sample_covariance_matches_sum_of_kroneckers() {
        let cfg = SimConfig {
            dims: [3, 2, 2],
            fixed_ranks: [2, 2, 2],
            random_ranks: [2, 1, 2],
            n: 200_000,
            fixed_scale: 1.0,
            noise_variance: 1.0,
            random_variance: 1.0,
            ..SimConfig::simulation_study()
        };
        let t = gen_truth(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mean = t.fixed_full().unwrap().vec();
        let mut cov = Mat::zeros(12, 12);
        for y in &t.samples {
            let c = y.vec() - &mean;
            cov += &c * c.transpose();
        }
        cov /= t.samples.len() as f64;
        let truth = t.response_cov_dense();
        let rel = (&cov - &truth).norm() / truth.norm();
        assert!(rel < 0.1, "relative error {rel}");
    }

    #[test]
    fn total_is_the_population_flipflop_fixed_point() {
        let cfg = SimConfig {
            dims: [3, 2, 2],
            fixed_ranks: [2, 2, 2],
            random_ranks: [2, 1, 2],
            n: 1,
            ..SimConfig::simulation_study()
        };
        let t = gen_truth(&cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let total = t.total().unwrap();
        let c = t.response_cov_dense();
        // dense mode-1 update: Sigma_ab = sum C[(a,q),(b,q')] W[q',q] / 4
        let w = crate::tensor::kron(&total.omega.inverse(), &total.psi.inverse());
        let mut sigma = Mat::zeros(3, 3);
        for a in 0..3 {
            for bb in 0..3 {
                let mut s = 0.0;
                for q in 0..4 {
                    for q2 in 0..4 {
                        s += c[(a + 3 * q, bb + 3 * q2)] * w[(q2, q)];
                    }
                }
                sigma[(a, bb)] = s / 4.0;
            }
        }
        assert!((&sigma - total.sigma.values()).norm() < 1e-8 * sigma.norm());
        assert!((total.psi.trace() - 2.0).abs() < 1e-10);

        // without a random effect the target is the residual triple itself
        let mut quiet = t.clone();
        quiet.random = CovTriple::new(
            t.random.sigma.scaled(1e-30).unwrap(),
            t.random.psi.clone(),
            t.random.omega.clone(),
        );
        let q = quiet.total().unwrap();
        let r = normalized(&t.residual);
        assert!((q.sigma.values() - r.sigma.values()).norm() < 1e-9 * r.sigma.values().norm());
    }

    #[test]
    fn floor_scale_covariances_give_the_fixed_part() {
        let cfg = SimConfig {
            noise_variance: 1e-16,
            random_variance: 1e-16,
            ..small()
        };
        let t = gen_truth(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let fixed = t.fixed_full().unwrap();
        for y in &t.samples {
            assert!(y.sub(&fixed).unwrap().data().iter().all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn calibration_of_the_study_preset() {
        let cfg = SimConfig {
            n: 1,
            ..SimConfig::simulation_study()
        };
        let t = gen_truth(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let jkl = 750.0;
        let noise = t.residual.sigma.trace() * t.residual.psi.trace() * t.residual.omega.trace() / jkl;
        let random = t.random.sigma.trace() * t.random.psi.trace() * t.random.omega.trace() / jkl;
        assert!((noise - 10.0).abs() < 1e-9);
        assert!((random - 2.36).abs() < 1e-9);
        // the re-expressed fixed part is the same tensor
        assert_eq!(t.f.dims(), [8, 3, 3]);
        assert_eq!(t.design.random_ranks(), [3, 2, 2]);
        assert_eq!(t.residual.psi.values(), &Mat::identity(5, 5));
    }

    #[test]
    fn raman_noise_is_diagonal_and_follows_profile() {
        let mut cfg = SimConfig::raman_surrogate();
        cfg.n = 1;
        let t = gen_truth(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let s = t.residual.sigma.values();
        assert_eq!(s[(0, 1)], 0.0);
        let NoiseRecipe::Raman { profile } = &cfg.noise else { unreachable!() };
        let ratio = s[(10, 10)] / profile[10];
        for j in 0..256 {
            assert!((s[(j, j)] / profile[j] - ratio).abs() < 1e-9 * ratio);
        }
        for f in t.random.factors() {
            let v = f.values();
            assert_eq!(v[(0, 1)], 0.0);
        }
    }
}
