use crate::error::{Result, TmeError};
use crate::tensor::Mat;

const ORTHONORMAL_TOL: f64 = 1e-8;

/// Fixed-effect factors `A1, A2, A3` and random-effect factors `B1, B2, B3`,
/// all with orthonormal columns and shared across samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TmeDesign {
    a: [Mat; 3],
    b: [Mat; 3],
}

impl TmeDesign {
    pub fn new(a: [Mat; 3], b: [Mat; 3]) -> Result<Self> {
        for (axis, (am, bm)) in a.iter().zip(&b).enumerate() {
            check_orthonormal(am, &format!("A{}", axis + 1))?;
            check_orthonormal(bm, &format!("B{}", axis + 1))?;
            if am.nrows() != bm.nrows() {
                return Err(TmeError::DimensionMismatch(format!(
                    "A{0} has {1} rows but B{0} has {2}",
                    axis + 1,
                    am.nrows(),
                    bm.nrows()
                )));
            }
        }
        Ok(TmeDesign { a, b })
    }

    /// B-matrices taken as the listed columns of the A-matrices.
    pub fn from_column_subsets(a: [Mat; 3], subsets: &[Vec<usize>; 3]) -> Result<Self> {
        let mut b = Vec::with_capacity(3);
        for (axis, (am, cols)) in a.iter().zip(subsets).enumerate() {
            if cols.is_empty() {
                return Err(TmeError::Argument(format!("empty column subset for B{}", axis + 1)));
            }
            if let Some(&bad) = cols.iter().find(|&&c| c >= am.ncols()) {
                return Err(TmeError::Argument(format!(
                    "column {bad} out of range for A{} with {} columns",
                    axis + 1,
                    am.ncols()
                )));
            }
            let mut sorted = cols.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != cols.len() {
                return Err(TmeError::Argument(format!("repeated column in B{} subset", axis + 1)));
            }
            b.push(am.select_columns(cols.iter()));
        }
        let b: [Mat; 3] = b.try_into().expect("three modes");
        TmeDesign::new(a, b)
    }

    /// B-matrices taken as the leading `random_ranks` columns of A.
    pub fn from_leading_columns(a: [Mat; 3], random_ranks: [usize; 3]) -> Result<Self> {
        let subsets = random_ranks.map(|r| (0..r).collect::<Vec<_>>());
        TmeDesign::from_column_subsets(a, &subsets)
    }

    pub fn a(&self) -> [&Mat; 3] {
        [&self.a[0], &self.a[1], &self.a[2]]
    }

    pub fn b(&self) -> [&Mat; 3] {
        [&self.b[0], &self.b[1], &self.b[2]]
    }

    pub fn a_owned(&self) -> &[Mat; 3] {
        &self.a
    }

    pub fn b_owned(&self) -> &[Mat; 3] {
        &self.b
    }

    /// Response dimensions `(J, K, L)`.
    pub fn dims(&self) -> [usize; 3] {
        [self.a[0].nrows(), self.a[1].nrows(), self.a[2].nrows()]
    }

    /// `(P1, Q1, R1)`.
    pub fn fixed_ranks(&self) -> [usize; 3] {
        [self.a[0].ncols(), self.a[1].ncols(), self.a[2].ncols()]
    }

    /// `(P2, Q2, R2)`.
    pub fn random_ranks(&self) -> [usize; 3] {
        [self.b[0].ncols(), self.b[1].ncols(), self.b[2].ncols()]
    }
}

pub(crate) fn check_orthonormal(m: &Mat, name: &str) -> Result<()> {
    if m.ncols() == 0 || m.ncols() > m.nrows() {
        return Err(TmeError::Argument(format!(
            "{name} must have between 1 and {} columns, got {}",
            m.nrows(),
            m.ncols()
        )));
    }
    let gram = m.transpose() * m;
    let dev = (gram - Mat::identity(m.ncols(), m.ncols())).amax();
    if dev > ORTHONORMAL_TOL {
        return Err(TmeError::Argument(format!(
            "{name} columns are not orthonormal (max deviation {dev:.3e})"
        )));
    }
    Ok(())
}
