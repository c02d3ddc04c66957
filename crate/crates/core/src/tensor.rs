//! Dense third-order tensors and the multilinear primitives everything else
//! is built on.
//!
//! Element `(j, k, l)` (0-based here) lives at linear position
//! `j + k * J + l * J * K`, so the mode-1 index varies fastest. With this
//! ordering `vec(X x1 A x2 B x3 C) = (C kron B kron A) vec(X)` and a tensor
//! normal draw has vec-covariance `Omega kron Psi kron Sigma`.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TmeError};

/// Dense column-major real matrix.
pub type Mat = DMatrix<f64>;

/// One of the three tensor modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    One,
    Two,
    Three,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::One, Mode::Two, Mode::Three];

    /// Zero-based axis index.
    pub fn axis(self) -> usize {
        match self {
            Mode::One => 0,
            Mode::Two => 1,
            Mode::Three => 2,
        }
    }

    /// One-based mode number as used in `X x_k U`.
    pub fn number(self) -> usize {
        self.axis() + 1
    }

    pub fn from_axis(axis: usize) -> Mode {
        Mode::ALL[axis]
    }

    /// The two remaining modes in increasing order.
    pub fn others(self) -> [Mode; 2] {
        match self {
            Mode::One => [Mode::Two, Mode::Three],
            Mode::Two => [Mode::One, Mode::Three],
            Mode::Three => [Mode::One, Mode::Two],
        }
    }
}

impl TryFrom<usize> for Mode {
    type Error = TmeError;

    /// Accepts the one-based mode numbers 1, 2 and 3.
    fn try_from(value: usize) -> Result<Self> {
        match value {
            1 => Ok(Mode::One),
            2 => Ok(Mode::Two),
            3 => Ok(Mode::Three),
            other => Err(TmeError::Argument(format!(
                "mode must be 1, 2 or 3, got {other}"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Dense real J x K x L array in canonical (mode-1 fastest) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(TmeError::DimensionMismatch(format!(
                "tensor {}x{}x{} needs {expected} values, got {}",
                dims[0],
                dims[1],
                dims[2],
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TmeError::Argument(format!(
                "non-finite tensor entry at position {pos}"
            )));
        }
        Ok(Tensor3 { dims, data })
    }

    /// Builds a tensor without validation; callers guarantee the length.
    pub(crate) fn from_raw(dims: [usize; 3], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
        Tensor3 { dims, data }
    }

    pub fn zeros(dims: [usize; 3]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Tensor3::from_raw(dims, vec![0.0; dims[0] * dims[1] * dims[2]]))
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        check_dims(dims)?;
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for l in 0..dims[2] {
            for k in 0..dims[1] {
                for j in 0..dims[0] {
                    data.push(f(j, k, l));
                }
            }
        }
        Tensor3::new(dims, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, j: usize, k: usize, l: usize) -> f64 {
        self.data[self.offset(j, k, l)]
    }

    fn offset(&self, j: usize, k: usize, l: usize) -> usize {
        let [nj, nk, _] = self.dims;
        j + k * nj + l * nj * nk
    }

    pub fn vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data)
    }

    pub fn unvec(v: &DVector<f64>, dims: [usize; 3]) -> Result<Self> {
        Tensor3::new(dims, v.as_slice().to_vec())
    }

    /// Mode-k unfolding.
    ///
    /// Mode 1 gives J x KL with column `k + l K`, mode 2 gives K x JL with
    /// column `j + l J`, mode 3 gives L x JK with column `j + k J`.
    pub fn matricize(&self, mode: Mode) -> Mat {
        let [nj, nk, nl] = self.dims;
        match mode {
            Mode::One => Mat::from_column_slice(nj, nk * nl, &self.data),
            Mode::Two => {
                let mut out = Mat::zeros(nk, nj * nl);
                for l in 0..nl {
                    for k in 0..nk {
                        for j in 0..nj {
                            out[(k, j + l * nj)] = self.data[j + k * nj + l * nj * nk];
                        }
                    }
                }
                out
            }
            Mode::Three => Mat::from_column_slice(nj * nk, nl, &self.data).transpose(),
        }
    }

    /// Inverse of [`Tensor3::matricize`].
    pub fn tensorize(m: &Mat, mode: Mode, dims: [usize; 3]) -> Result<Self> {
        check_dims(dims)?;
        let [nj, nk, nl] = dims;
        let (rows, cols) = match mode {
            Mode::One => (nj, nk * nl),
            Mode::Two => (nk, nj * nl),
            Mode::Three => (nl, nj * nk),
        };
        if m.nrows() != rows || m.ncols() != cols {
            return Err(TmeError::DimensionMismatch(format!(
                "mode-{mode} unfolding of {nj}x{nk}x{nl} must be {rows}x{cols}, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let data = match mode {
            Mode::One => m.as_slice().to_vec(),
            Mode::Two => {
                let mut data = vec![0.0; nj * nk * nl];
                for l in 0..nl {
                    for k in 0..nk {
                        for j in 0..nj {
                            data[j + k * nj + l * nj * nk] = m[(k, j + l * nj)];
                        }
                    }
                }
                data
            }
            Mode::Three => m.transpose().as_slice().to_vec(),
        };
        Tensor3::new(dims, data)
    }

    /// k-mode product `X x_k U`; `u.ncols()` must equal the mode-k dimension.
    pub fn mode_product(&self, mode: Mode, u: &Mat) -> Result<Tensor3> {
        let [nj, nk, nl] = self.dims;
        let axis = mode.axis();
        if u.ncols() != self.dims[axis] {
            return Err(TmeError::DimensionMismatch(format!(
                "mode-{mode} product needs a matrix with {} columns, got {}x{}",
                self.dims[axis],
                u.nrows(),
                u.ncols()
            )));
        }
        if u.nrows() == 0 {
            return Err(TmeError::DimensionMismatch(
                "mode product with a matrix of zero rows".into(),
            ));
        }
        let r = u.nrows();
        let out = match mode {
            Mode::One => {
                let x = Mat::from_column_slice(nj, nk * nl, &self.data);
                let y = u * x;
                Tensor3::from_raw([r, nk, nl], y.as_slice().to_vec())
            }
            Mode::Two => {
                let ut = u.transpose();
                let mut data = Vec::with_capacity(nj * r * nl);
                for l in 0..nl {
                    let slab = &self.data[l * nj * nk..(l + 1) * nj * nk];
                    let x = Mat::from_column_slice(nj, nk, slab);
                    let y = x * &ut;
                    data.extend_from_slice(y.as_slice());
                }
                Tensor3::from_raw([nj, r, nl], data)
            }
            Mode::Three => {
                let x = Mat::from_column_slice(nj * nk, nl, &self.data);
                let y = x * u.transpose();
                Tensor3::from_raw([nj, nk, r], y.as_slice().to_vec())
            }
        };
        Ok(out)
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, c: f64) -> Tensor3 {
        Tensor3::from_raw(self.dims, self.data.iter().map(|v| v * c).collect())
    }

    fn zip_with(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        if self.dims != other.dims {
            return Err(TmeError::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Tensor3::from_raw(
            self.dims,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    /// Elementwise mean of a nonempty list of equally shaped tensors.
    pub fn mean_of(samples: &[Tensor3]) -> Result<Tensor3> {
        let first = samples
            .first()
            .ok_or_else(|| TmeError::Argument("mean of an empty sample list".into()))?;
        let mut acc = vec![0.0; first.len()];
        for s in samples {
            if s.dims != first.dims {
                return Err(TmeError::DimensionMismatch(format!(
                    "samples have dims {:?} and {:?}",
                    first.dims, s.dims
                )));
            }
            for (a, v) in acc.iter_mut().zip(&s.data) {
                *a += v;
            }
        }
        let n = samples.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(Tensor3::from_raw(first.dims, acc))
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(TmeError::Argument(format!(
            "tensor dimensions must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

/// `core x1 a1 x2 a2 x3 a3`.
pub fn tucker_apply(core: &Tensor3, factors: [&Mat; 3]) -> Result<Tensor3> {
    core.mode_product(Mode::One, factors[0])?
        .mode_product(Mode::Two, factors[1])?
        .mode_product(Mode::Three, factors[2])
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = Mat::zeros(ra * rb, ca * cb);
    for ja in 0..ca {
        for ia in 0..ra {
            let s = a[(ia, ja)];
            if s == 0.0 {
                continue;
            }
            for jb in 0..cb {
                for ib in 0..rb {
                    out[(ia * rb + ib, ja * cb + jb)] = s * b[(ib, jb)];
                }
            }
        }
    }
    out
}

pub fn mat_frob_norm(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Tensor3 {
        Tensor3::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn vec_of_scalar_tensor() {
        let t = Tensor3::new([1, 1, 1], vec![3.5]).unwrap();
        assert_eq!(t.vec().as_slice(), &[3.5]);
    }

    #[test]
    fn vec_follows_mode_one_fastest() {
        let t = Tensor3::from_fn([2, 2, 1], |j, k, _| [[1.0, 3.0], [2.0, 4.0]][j][k]).unwrap();
        assert_eq!(t.vec().as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor3::new([2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Tensor3::new([0, 2, 2], vec![]).is_err());
        assert!(Tensor3::new([1, 1, 1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn mode_from_number() {
        assert_eq!(Mode::try_from(2).unwrap(), Mode::Two);
        assert!(Mode::try_from(0).is_err());
        assert!(Mode::try_from(4).is_err());
    }

    #[test]
    fn matricize_all_ones() {
        let t = Tensor3::from_fn([2, 2, 2], |_, _, _| 1.0).unwrap();
        let m = t.matricize(Mode::One);
        assert_eq!(m.shape(), (2, 4));
        assert!(m.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn matricize_matches_index_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&mut rng, [3, 2, 2]);
        let [nj, nk, nl] = t.dims();
        let m1 = t.matricize(Mode::One);
        let m2 = t.matricize(Mode::Two);
        let m3 = t.matricize(Mode::Three);
        for j in 0..nj {
            for k in 0..nk {
                for l in 0..nl {
                    let x = t.get(j, k, l);
                    assert_eq!(m1[(j, k + l * nk)], x);
                    assert_eq!(m2[(k, j + l * nj)], x);
                    assert_eq!(m3[(l, j + k * nj)], x);
                }
            }
        }
        // mode-1 unfolding is vec(t) cut into J-long columns
        let v = t.vec();
        for c in 0..nk * nl {
            for j in 0..nj {
                assert_eq!(m1[(j, c)], v[j + c * nj]);
            }
        }
    }

    #[test]
    fn tensorize_round_trips_and_checks_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tensor(&mut rng, [4, 3, 2]);
        for mode in Mode::ALL {
            let back = Tensor3::tensorize(&t.matricize(mode), mode, t.dims()).unwrap();
            assert_eq!(back, t);
        }
        assert!(Tensor3::tensorize(&Mat::zeros(3, 3), Mode::One, [4, 3, 2]).is_err());
        let z = Tensor3::tensorize(&Mat::zeros(4, 6), Mode::One, [4, 3, 2]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let col = Mat::from_column_slice(6, 1, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = Tensor3::tensorize(&col, Mode::One, [6, 1, 1]).unwrap();
        assert_eq!(t.data(), col.as_slice());
    }

    #[test]
    fn mode_product_identity_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(&mut rng, [3, 2, 2]);
        assert_eq!(t.mode_product(Mode::One, &Mat::identity(3, 3)).unwrap(), t);
        assert!(t.mode_product(Mode::Two, &Mat::identity(3, 3)).is_err());
    }

    #[test]
    fn mode_product_matches_elementwise_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_tensor(&mut rng, [3, 4, 2]);
        let u = random_mat(&mut rng, 5, 4);
        let p = t.mode_product(Mode::Two, &u).unwrap();
        assert_eq!(p.dims(), [3, 5, 2]);
        for j in 0..3 {
            for q in 0..5 {
                for l in 0..2 {
                    let direct: f64 = (0..4).map(|k| t.get(j, k, l) * u[(q, k)]).sum();
                    assert_relative_eq!(p.get(j, q, l), direct, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn repeated_mode_products_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_tensor(&mut rng, [3, 2, 2]);
        let a = random_mat(&mut rng, 2, 3);
        let b = random_mat(&mut rng, 4, 2);
        let lhs = t.mode_product(Mode::One, &a).unwrap().mode_product(Mode::One, &b).unwrap();
        let rhs = t.mode_product(Mode::One, &(&b * &a)).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn tucker_apply_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let core = random_tensor(&mut rng, [2, 3, 2]);
        let (i2, i3) = (Mat::identity(2, 2), Mat::identity(3, 3));
        assert_eq!(tucker_apply(&core, [&i2, &i3, &i2]).unwrap(), core);
        let zero = Tensor3::zeros([2, 3, 2]).unwrap();
        let a = random_mat(&mut rng, 4, 2);
        let out = tucker_apply(&zero, [&a, &i3, &i2]).unwrap();
        assert_eq!(out.dims(), [4, 3, 2]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kron_basics() {
        assert_eq!(kron(&Mat::identity(2, 2), &Mat::identity(3, 3)), Mat::identity(6, 6));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_mat(&mut rng, 2, 3);
        assert_eq!(kron(&Mat::from_element(1, 1, 2.0), &b), &b * 2.0);
    }

    #[test]
    fn kron_mixed_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_mat(&mut rng, 2, 3);
        let b = random_mat(&mut rng, 3, 2);
        let c = random_mat(&mut rng, 3, 2);
        let d = random_mat(&mut rng, 2, 4);
        let lhs = kron(&a, &b) * kron(&c, &d);
        let rhs = kron(&(&a * &c), &(&b * &d));
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn frobenius_norms() {
        assert_eq!(Tensor3::zeros([2, 2, 2]).unwrap().frob_norm(), 0.0);
        let e = Tensor3::from_fn([2, 3, 2], |j, k, l| f64::from(u8::from((j, k, l) == (1, 2, 0)))).unwrap();
        assert_eq!(e.frob_norm(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_tensor(&mut rng, [4, 3, 2]);
        let mut oracle = 0.0;
        for j in 0..4 {
            for k in 0..3 {
                for l in 0..2 {
                    oracle += t.get(j, k, l).powi(2);
                }
            }
        }
        assert_relative_eq!(t.frob_norm(), oracle.sqrt(), epsilon = 1e-14);
    }
}
