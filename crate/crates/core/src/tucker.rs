//! Rank-(P, Q, R) Tucker decompositions: HOSVD, HOOI and the sparsity-based
//! rank selection used to initialize a TME fit.

use rayon::prelude::*;

use crate::error::{Result, TmeError};
use crate::tensor::{tucker_apply, Mat, Mode, Tensor3};

#[derive(Clone, Debug)]
pub struct TuckerDecomp {
    pub core: Tensor3,
    /// Orthonormal-column factors, J x P, K x Q and L x R.
    pub factors: [Mat; 3],
    /// `||t - [[core; factors]]||_F / ||t||_F` for the decomposed tensor.
    pub rel_error: f64,
    /// Relative error after initialization and after every HOOI sweep.
    pub history: Vec<f64>,
}

impl TuckerDecomp {
    pub fn ranks(&self) -> [usize; 3] {
        self.core.dims()
    }

    pub fn reconstruct(&self) -> Result<Tensor3> {
        tucker_apply(&self.core, self.factor_refs())
    }

    pub fn factor_refs(&self) -> [&Mat; 3] {
        [&self.factors[0], &self.factors[1], &self.factors[2]]
    }
}

fn check_ranks(dims: [usize; 3], ranks: [usize; 3]) -> Result<()> {
    for (axis, (&r, &d)) in ranks.iter().zip(&dims).enumerate() {
        if r == 0 || r > d {
            return Err(TmeError::RankExceedsDimension {
                mode: axis + 1,
                rank: r,
                dim: d,
            });
        }
    }
    Ok(())
}

/// Leading `r` left singular vectors of `m`, with each column's
/// largest-magnitude entry made positive. When `r` exceeds the number of
/// available singular vectors the basis is completed orthonormally.
pub fn leading_left_singular_vectors(m: &Mat, r: usize) -> Mat {
    let rows = m.nrows();
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let take = r.min(order.len());
    let mut out = Mat::zeros(rows, r);
    for (c, &idx) in order.iter().take(take).enumerate() {
        out.set_column(c, &u.column(idx));
    }
    if take < r {
        complete_basis(&mut out, take);
    }
    for c in 0..r {
        fix_sign(&mut out, c);
    }
    out
}

fn fix_sign(m: &mut Mat, c: usize) {
    let col = m.column(c);
    let mut best = 0;
    for i in 1..col.len() {
        if col[i].abs() > col[best].abs() + 1e-12 {
            best = i;
        }
    }
    if col[best] < 0.0 {
        m.column_mut(c).neg_mut();
    }
}

/// Fills columns `filled..` of `m` with unit vectors orthogonal to the
/// preceding columns (Gram-Schmidt over the canonical basis).
fn complete_basis(m: &mut Mat, filled: usize) {
    let rows = m.nrows();
    let mut next = filled;
    for e in 0..rows {
        if next == m.ncols() {
            break;
        }
        let mut v = nalgebra::DVector::<f64>::zeros(rows);
        v[e] = 1.0;
        for _ in 0..2 {
            for c in 0..next {
                let proj = m.column(c).dot(&v);
                v -= m.column(c) * proj;
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            m.set_column(next, &(v / norm));
            next += 1;
        }
    }
}

fn project_core(t: &Tensor3, factors: &[Mat; 3]) -> Result<Tensor3> {
    t.mode_product(Mode::One, &factors[0].transpose())?
        .mode_product(Mode::Two, &factors[1].transpose())?
        .mode_product(Mode::Three, &factors[2].transpose())
}

fn relative_error(t: &Tensor3, core: &Tensor3, factors: &[Mat; 3]) -> Result<f64> {
    let norm = t.frob_norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let recon = tucker_apply(core, [&factors[0], &factors[1], &factors[2]])?;
    Ok(t.sub(&recon)?.frob_norm() / norm)
}

pub fn hosvd(t: &Tensor3, ranks: [usize; 3]) -> Result<TuckerDecomp> {
    check_ranks(t.dims(), ranks)?;
    let factors = Mode::ALL.map(|m| leading_left_singular_vectors(&t.matricize(m), ranks[m.axis()]));
    let core = project_core(t, &factors)?;
    let rel_error = relative_error(t, &core, &factors)?;
    Ok(TuckerDecomp {
        core,
        factors,
        rel_error,
        history: vec![rel_error],
    })
}

pub const HOOI_DEFAULT_MAX_ITER: usize = 50;
pub const HOOI_DEFAULT_TOL: f64 = 1e-8;

/// Higher-order orthogonal iteration started from [`hosvd`].
///
/// Each sweep replaces factor k by the leading left singular vectors of
/// `t` projected onto the other two current factors. Stops once a sweep
/// improves the relative error by less than `tol`.
pub fn hooi(t: &Tensor3, ranks: [usize; 3], max_iter: usize, tol: f64) -> Result<TuckerDecomp> {
    let mut dec = hosvd(t, ranks)?;
    if dec.rel_error == 0.0 {
        return Ok(dec);
    }
    for _ in 0..max_iter {
        let mut factors = dec.factors.clone();
        for mode in Mode::ALL {
            let [a, b] = mode.others();
            let y = t
                .mode_product(a, &factors[a.axis()].transpose())?
                .mode_product(b, &factors[b.axis()].transpose())?;
            factors[mode.axis()] = leading_left_singular_vectors(&y.matricize(mode), ranks[mode.axis()]);
        }
        let core = project_core(t, &factors)?;
        let rel_error = relative_error(t, &core, &factors)?;
        let improvement = dec.rel_error - rel_error;
        if rel_error > dec.rel_error {
            // Numerical noise at convergence; keep the better iterate.
            break;
        }
        dec.history.push(rel_error);
        dec.core = core;
        dec.factors = factors;
        dec.rel_error = rel_error;
        if improvement < tol {
            break;
        }
    }
    Ok(dec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankCandidate {
    pub ranks: [usize; 3],
    pub rel_error: f64,
    /// Smallest row-wise L1 mass of the mode-1 core unfolding.
    pub min_row_mass: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct RankSelection {
    pub chosen: [usize; 3],
    pub sparsity_threshold: f64,
    pub candidates_evaluated: Vec<RankCandidate>,
}

/// Evaluates every candidate with HOOI and keeps those whose mode-1 core
/// rows all carry L1 mass above `sparsity_threshold`; returns the passing
/// candidate with the largest `P + Q + R` (ties: smaller relative error,
/// then lexicographically smaller ranks).
pub fn rank_select(t: &Tensor3, candidate_ranks: &[[usize; 3]], sparsity_threshold: f64) -> Result<RankSelection> {
    if candidate_ranks.is_empty() {
        return Err(TmeError::Argument("rank_select needs at least one candidate".into()));
    }
    let evaluated: Vec<RankCandidate> = candidate_ranks
        .par_iter()
        .map(|&ranks| {
            let dec = hooi(t, ranks, HOOI_DEFAULT_MAX_ITER, HOOI_DEFAULT_TOL)?;
            let unfolded = dec.core.matricize(Mode::One);
            let min_row_mass = unfolded
                .row_iter()
                .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            Ok(RankCandidate {
                ranks,
                rel_error: dec.rel_error,
                min_row_mass,
                passed: min_row_mass > sparsity_threshold,
            })
        })
        .collect::<Result<_>>()?;
    let chosen = evaluated
        .iter()
        .filter(|c| c.passed)
        .min_by(|a, b| {
            let sa: usize = a.ranks.iter().sum();
            let sb: usize = b.ranks.iter().sum();
            sb.cmp(&sa)
                .then(a.rel_error.total_cmp(&b.rel_error))
                .then(a.ranks.cmp(&b.ranks))
        })
        .map(|c| c.ranks)
        .ok_or(TmeError::NoAdmissibleRank {
            evaluated: evaluated.len(),
            threshold: sparsity_threshold,
        })?;
    Ok(RankSelection {
        chosen,
        sparsity_threshold,
        candidates_evaluated: evaluated,
    })
}

/// Candidate ranks proportional to the tensor dimensions:
/// `ceil(d * i / steps)` per mode for `i = 1..=steps`, deduplicated.
pub fn proportional_grid(dims: [usize; 3], steps: usize) -> Vec<[usize; 3]> {
    let mut out: Vec<[usize; 3]> = (1..=steps.max(1))
        .map(|i| dims.map(|d| (d * i).div_ceil(steps.max(1)).clamp(1, d)))
        .collect();
    out.dedup();
    out
}
