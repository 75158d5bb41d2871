//! Correlation matrices, Cholesky factors and the small dense kernels the
//! simulator, heads and baselines share.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Eigenvalue floor applied to every sampled or repaired correlation matrix.
pub const PD_FLOOR: f64 = 1e-8;
/// Relative Frobenius tolerance for `L·Lᵀ` against its source.
pub const CHOLESKY_TOL: f64 = 1e-10;

/// Serde adapter: dense matrices as row-major nested arrays.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows).map_err(D::Error::custom)
    }
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::DimensionMismatch("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorrelationMatrix(#[serde(with = "rows")] DMatrix<f64>);

impl CorrelationMatrix {
    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    /// Validating constructor: square, symmetric, unit diagonal, eigenvalues ≥ [`PD_FLOOR`].
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let c = Self(m);
        let problems = c.violations();
        if problems.is_empty() {
            Ok(c)
        } else {
            Err(Error::InvalidParameter(problems.join("; ")))
        }
    }

    /// Wraps a matrix without checks; see [`CorrelationMatrix::violations`].
    pub fn from_raw(m: DMatrix<f64>) -> Self {
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn is_identity(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| self.0[(i, j)] == if i == j { 1.0 } else { 0.0 }))
    }

    pub fn violations(&self) -> Vec<String> {
        let m = &self.0;
        let mut out = Vec::new();
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            out.push(format!("correlation must be square and non-empty, got {}x{}", m.nrows(), m.ncols()));
            return out;
        }
        if m.iter().any(|v| !v.is_finite()) {
            out.push("correlation has non-finite entries".into());
            return out;
        }
        let n = m.nrows();
        if (0..n).any(|i| (0..i).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12)) {
            out.push("correlation not symmetric".into());
        }
        if (0..n).any(|i| (m[(i, i)] - 1.0).abs() > 1e-12) {
            out.push("correlation diagonal must be 1".into());
        }
        if min_eigenvalue(m) < PD_FLOOR * (1.0 - 1e-6) {
            out.push("correlation not positive definite".into());
        }
        out
    }

    pub fn cholesky(&self) -> Result<CholeskyFactor> {
        cholesky(&self.0)
    }
}

/// Lower-triangular `L` with `L·Lᵀ = A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CholeskyFactor(#[serde(with = "rows")] DMatrix<f64>);

impl CholeskyFactor {
    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    /// Accepts any square matrix and keeps its lower triangle.
    pub fn from_lower(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "cholesky factor must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self(m.lower_triangle()))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn has_positive_diagonal(&self) -> bool {
        (0..self.dim()).all(|i| self.0[(i, i)] > 0.0 && self.0[(i, i)].is_finite())
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.0 * self.0.transpose()
    }

    /// `out = L·z`.
    pub fn mul_vec(&self, z: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.0[(i, j)] * z[j];
            }
            out[i] = acc;
        }
    }

    /// Solves `L·y = b` in place by forward substitution.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut acc = b[i];
            for j in 0..i {
                acc -= self.0[(i, j)] * b[j];
            }
            b[i] = acc / self.0[(i, i)];
        }
    }

    /// `log det(L·Lᵀ)`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.0[(i, i)].ln()).sum::<f64>()
    }
}

pub fn cholesky(m: &DMatrix<f64>) -> Result<CholeskyFactor> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            m.ncols()
        )));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut pivot = m[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut acc = m[(i, j)];
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = acc / d;
        }
    }
    Ok(CholeskyFactor(l))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn has_unit_diagonal(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (m[(i, i)] - 1.0).abs() <= 1e-12)
}

fn rescale_to_unit_diagonal(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    let scale: Vec<f64> = (0..n).map(|i| m[(i, i)].sqrt().recip()).collect();
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] *= scale[i] * scale[j];
        }
    }
    for i in 0..n {
        m[(i, i)] = 1.0;
    }
}

/// Clips eigenvalues to at least `floor`, re-symmetrizes and, when the input
/// had a unit diagonal, rescales back to one. Matrices already at or above
/// the floor come back untouched.
pub fn nearest_pd_repair(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = symmetrize(m);
    if min_eigenvalue(&sym) >= floor && sym == *m {
        return m.clone();
    }
    let unit = has_unit_diagonal(m);
    let eig = SymmetricEigen::new(sym);
    let mut target = floor;
    // Rescaling can pull the smallest eigenvalue back under the floor, so
    // the clip target doubles until the result clears it.
    for _ in 0..64 {
        let clipped = eig.eigenvalues.map(|v| v.max(target));
        let mut out = &eig.eigenvectors
            * DMatrix::from_diagonal(&clipped)
            * eig.eigenvectors.transpose();
        out = symmetrize(&out);
        if unit {
            rescale_to_unit_diagonal(&mut out);
        }
        if min_eigenvalue(&out) >= floor {
            return out;
        }
        target *= 2.0;
    }
    let n = m.nrows();
    DMatrix::identity(n, n)
}

/// Low-rank-loading correlation sampler: `W·Wᵀ + diag(noise)` normalized to a
/// unit diagonal, blended with the identity by `strength`, then PD-repaired.
pub fn sample_correlation(dim: usize, strength: f64, rng: &mut RngStream) -> CorrelationMatrix {
    assert!(dim >= 1, "correlation dimension must be positive");
    if dim == 1 {
        return CorrelationMatrix::identity(1);
    }
    let strength = strength.clamp(0.0, 1.0);
    let rank = dim.div_ceil(2).max(1);
    let mut w = DMatrix::<f64>::zeros(dim, rank);
    for i in 0..dim {
        for k in 0..rank {
            w[(i, k)] = rng.normal();
        }
    }
    let mut c = &w * w.transpose();
    for i in 0..dim {
        c[(i, i)] += rng.uniform(0.1, 1.0);
    }
    rescale_to_unit_diagonal(&mut c);
    let blended = c * strength + DMatrix::<f64>::identity(dim, dim) * (1.0 - strength);
    let mut repaired = nearest_pd_repair(&blended, PD_FLOOR);
    rescale_to_unit_diagonal(&mut repaired);
    CorrelationMatrix(repaired)
}

/// Sample correlation of the columns of a `rows × cols` row-major buffer.
pub fn column_correlation(data: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += data[r * cols + c];
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(cols, cols);
    for r in 0..rows {
        for i in 0..cols {
            let di = data[r * cols + i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (data[r * cols + j] - mean[j]);
            }
        }
    }
    for i in 0..cols {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let sd: Vec<f64> = (0..cols).map(|i| cov[(i, i)].sqrt()).collect();
    DMatrix::from_fn(cols, cols, |i, j| {
        if i == j {
            1.0
        } else if sd[i] > 0.0 && sd[j] > 0.0 {
            cov[(i, j)] / (sd[i] * sd[j])
        } else {
            0.0
        }
    })
}
