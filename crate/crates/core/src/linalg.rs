//! Small dense real matrices and vectors.
//!
//! Every matrix in the filter is at most a few dozen rows, so storage is a
//! plain row-major `Vec<f64>` and the algorithms are the textbook ones:
//! Cholesky for SPD inversion and power iteration for the spectral norm.

use std::cell::Cell;
use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Absolute symmetry tolerance, scaled by the largest entry magnitude when that exceeds 1.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Relative stopping tolerance of the power iteration.
pub const POWER_ITER_TOL: f64 = 1e-10;
pub const POWER_ITER_MAX: usize = 10_000;

thread_local! {
    static INVERSIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`invert_spd`] calls made on the current thread so far.
///
/// Runs are sequential on one thread, so the difference of two readings
/// counts the inversions performed in between.
pub fn inversion_count() -> u64 {
    INVERSIONS.with(Cell::get)
}

#[derive(Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(entries: Vec<f64>) -> Self {
        Vector(entries)
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dot: dimension mismatch");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, c: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * c).collect())
    }

    pub fn max_abs_diff(&self, other: &Vector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "max_abs_diff: dimension mismatch");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenates `self` and `tail`.
    pub fn concat(&self, tail: &[f64]) -> Vector {
        let mut v = self.0.clone();
        v.extend_from_slice(tail);
        Vector(v)
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl<const N: usize> From<[f64; N]> for Vector {
    fn from(v: [f64; N]) -> Self {
        Vector(v.to_vec())
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}

impl Add for &Vector {
    type Output = Vector;
    fn add(self, rhs: &Vector) -> Vector {
        assert_eq!(self.dim(), rhs.dim(), "vector add: dimension mismatch");
        Vector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &Vector {
    type Output = Vector;
    fn sub(self, rhs: &Vector) -> Vector {
        assert_eq!(self.dim(), rhs.dim(), "vector sub: dimension mismatch");
        Vector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

impl Neg for &Vector {
    type Output = Vector;
    fn neg(self) -> Vector {
        self.scale(-1.0)
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diag(&vec![1.0; n])
    }

    pub fn diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Single-row matrix.
    pub fn row(v: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_slice_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = rhs.row_slice(k);
                for (o, b) in out.row_slice_mut(i).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &Vector) -> Result<Vector> {
        if self.cols != v.dim() {
            return Err(Error::DimensionMismatch(format!(
                "cannot apply {}x{} matrix to vector of dim {}",
                self.rows,
                self.cols,
                v.dim()
            )));
        }
        Ok(Vector(
            (0..self.rows)
                .map(|i| self.row_slice(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum())
                .collect(),
        ))
    }

    /// `self · m · selfᵀ`, the covariance congruence transform.
    pub fn congruence(&self, m: &Matrix) -> Result<Matrix> {
        self.matmul(m)?.matmul(&self.transpose())
    }

    pub fn symmetrize(&self) -> Matrix {
        assert!(self.is_square(), "symmetrize needs a square matrix");
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = avg;
                s[(j, i)] = avg;
            }
        }
        s
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(1.0);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self[(i, j)] - self[(j, i)]).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Selects a subset of columns, in the given order.
    pub fn columns(&self, cols: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, cols.len());
        for i in 0..self.rows {
            for (jo, &j) in cols.iter().enumerate() {
                out[(i, jo)] = self[(i, j)];
            }
        }
        out
    }

    pub fn try_add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn try_sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::DimensionMismatch(format!(
                "elementwise op on {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    /// Lower Cholesky factor `L` with `L·Lᵀ = self`.
    pub fn cholesky(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::NotSpd(format!(
                "{}x{} matrix is not square",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotSpd(format!("non-positive pivot {d:e} at column {j}")));
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(l)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[f64]> = (0..self.rows).map(|i| self.row_slice(i)).collect();
        f.debug_list().entries(rows).finish()
    }
}

// Operator forms panic on shape mismatch; fallible code uses the `try_*` and
// `matmul` methods instead.
impl Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        self.try_add(rhs).expect("matrix add")
    }
}

impl Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        self.try_sub(rhs).expect("matrix sub")
    }
}

impl Mul for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        self.matmul(rhs).expect("matrix mul")
    }
}

impl Mul<&Vector> for &Matrix {
    type Output = Vector;
    fn mul(self, rhs: &Vector) -> Vector {
        self.mul_vec(rhs).expect("matrix-vector mul")
    }
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
///
/// The result is symmetrized before it is returned.
pub fn invert_spd(m: &Matrix) -> Result<Matrix> {
    INVERSIONS.with(|c| c.set(c.get() + 1));
    if !m.is_finite() {
        return Err(Error::NotSpd("matrix has non-finite entries".into()));
    }
    if !m.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::NotSpd(format!("matrix is not symmetric: {m:?}")));
    }
    let n = m.rows();
    // LDLᵀ rather than Cholesky: no square roots, so diagonal matrices invert
    // exactly and scaling by a power of two scales the inverse exactly.
    let mut l = Matrix::identity(n);
    let mut d = vec![0.0; n];
    for j in 0..n {
        let mut dj = m[(j, j)];
        for k in 0..j {
            dj -= l[(j, k)] * l[(j, k)] * d[k];
        }
        if !(dj > 0.0) || !dj.is_finite() {
            return Err(Error::NotSpd(format!("non-positive pivot {dj:e} at column {j}")));
        }
        d[j] = dj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)] * d[k];
            }
            l[(i, j)] = s / dj;
        }
    }
    // Unit lower-triangular L⁻¹ by forward substitution.
    let mut linv = Matrix::identity(n);
    for c in 0..n {
        for i in (c + 1)..n {
            let mut s = 0.0;
            for k in c..i {
                s -= l[(i, k)] * linv[(k, c)];
            }
            linv[(i, c)] = s;
        }
    }
    // m⁻¹ = L⁻ᵀ D⁻¹ L⁻¹
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += linv[(k, i)] * linv[(k, j)] / d[k];
            }
            inv[(i, j)] = s;
            inv[(j, i)] = s;
        }
    }
    Ok(inv)
}

/// Largest singular value, by power iteration on `mᵀm`.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    if !m.is_finite() {
        return Err(Error::NonFiniteState("spectral_norm of non-finite matrix".into()));
    }
    if m.max_abs() == 0.0 || m.cols() == 0 {
        return Ok(0.0);
    }
    let gram = m.transpose().matmul(m)?;
    let n = gram.rows();

    let mut last = 0.0;
    // A start vector orthogonal to the dominant singular direction makes the
    // Rayleigh quotient stall on a smaller value; restarting from a different
    // deterministic vector avoids it.
    for attempt in 0..3 {
        let mut v = Vector::new(
            (0..n)
                .map(|i| 1.0 + attempt as f64 * 0.618_033_988_749_895 * (i as f64 + 1.0).sin())
                .collect(),
        );
        let norm = v.norm();
        v = v.scale(1.0 / norm);
        let mut lambda = 0.0;
        let mut converged = false;
        for _ in 0..POWER_ITER_MAX {
            let w = gram.mul_vec(&v)?;
            let wn = w.norm();
            if wn == 0.0 {
                break;
            }
            let next = v.dot(&w);
            v = w.scale(1.0 / wn);
            if (next - lambda).abs() <= POWER_ITER_TOL * next.abs() {
                lambda = next;
                converged = true;
                break;
            }
            lambda = next;
        }
        last = lambda.max(0.0).sqrt();
        if converged && lambda > 0.0 {
            return Ok(last);
        }
    }
    Err(Error::NoConvergence {
        iterations: POWER_ITER_MAX,
        estimate: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let a = Matrix::from_row_major(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        &(&a * &a.transpose()) + &Matrix::identity(n).scale(0.5)
    }

    #[test]
    fn invert_identity_and_diagonal() {
        assert_eq!(invert_spd(&Matrix::identity(2)).unwrap(), Matrix::identity(2));
        let inv = invert_spd(&Matrix::diag(&[2.0, 4.0])).unwrap();
        assert_eq!(inv, Matrix::diag(&[0.5, 0.25]));
    }

    #[test]
    fn invert_random_spd_gives_identity_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=6 {
            let a = random_spd(n, &mut rng);
            let prod = &a * &invert_spd(&a).unwrap();
            assert!(prod.max_abs_diff(&Matrix::identity(n)) < 1e-9, "n={n}: {prod:?}");
        }
    }

    #[test]
    fn invert_rejects_non_spd() {
        let singular = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(invert_spd(&singular), Err(Error::NotSpd(_))));
        let indefinite = Matrix::diag(&[1.0, -1.0]);
        assert!(matches!(invert_spd(&indefinite), Err(Error::NotSpd(_))));
        let asym = Matrix::from_rows(&[&[2.0, 0.5], &[0.0, 2.0]]);
        assert!(matches!(invert_spd(&asym), Err(Error::NotSpd(_))));
        assert!(matches!(invert_spd(&Matrix::diag(&[0.0])), Err(Error::NotSpd(_))));
    }

    #[test]
    fn invert_counts_calls() {
        let before = inversion_count();
        invert_spd(&Matrix::identity(3)).unwrap();
        let _ = invert_spd(&Matrix::diag(&[-1.0]));
        assert_eq!(inversion_count() - before, 2);
    }

    #[test]
    fn spectral_norm_examples() {
        assert!((spectral_norm(&Matrix::identity(2)).unwrap() - 1.0).abs() < 1e-12);
        assert!((spectral_norm(&Matrix::diag(&[0.3, 0.9])).unwrap() - 0.9).abs() < 1e-9);
        assert_eq!(spectral_norm(&Matrix::zeros(3, 2)).unwrap(), 0.0);
    }

    /// Closed-form singular values of a 2x2 matrix, independent of power iteration.
    fn svd2_max(m: &Matrix) -> f64 {
        let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
        let s1 = a * a + b * b + c * c + d * d;
        let s2 = ((a * a + b * b - c * c - d * d).powi(2) + 4.0 * (a * c + b * d).powi(2)).sqrt();
        ((s1 + s2) / 2.0).sqrt()
    }

    #[test]
    fn spectral_norm_nilpotent() {
        let m = Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        assert!((svd2_max(&m) - 1.0).abs() < 1e-15);
        assert!((spectral_norm(&m).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn spectral_norm_orthogonal_start_vector_restarts() {
        // The all-ones start vector is orthogonal to e1 - e2, the dominant direction.
        let m = Matrix::from_rows(&[&[2.0, -2.0], &[0.0, 0.0]]);
        assert!((spectral_norm(&m).unwrap() - svd2_max(&m)).abs() < 1e-9);
    }

    #[test]
    fn spectral_norm_matches_2x2_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = Matrix::from_row_major(2, 2, (0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
                .unwrap();
            let want = svd2_max(&m);
            let got = spectral_norm(&m).unwrap();
            assert!((got - want).abs() <= 1e-8 * want.max(1.0), "{m:?}: {got} vs {want}");
        }
    }

    #[test]
    fn cholesky_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd(4, &mut rng);
        let l = a.cholesky().unwrap();
        assert!((&l * &l.transpose()).max_abs_diff(&a) < 1e-12);
    }

    fn matrix_strategy(n: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-2.0f64..2.0, n * n)
            .prop_map(move |d| Matrix::from_row_major(n, n, d).unwrap())
    }

    proptest! {
        #[test]
        fn double_inversion_round_trips(seed in any::<u64>(), n in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_spd(n, &mut rng);
            let back = invert_spd(&invert_spd(&a).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&a) < 1e-8);
        }

        #[test]
        fn spectral_norm_is_homogeneous(m in matrix_strategy(3), c in -5.0f64..5.0) {
            let base = spectral_norm(&m).unwrap();
            let scaled = spectral_norm(&m.scale(c)).unwrap();
            prop_assert!((scaled - c.abs() * base).abs() <= 1e-9 * (1.0 + scaled));
        }

        #[test]
        fn spectral_norm_bounds_basis_images(m in matrix_strategy(3)) {
            let norm = spectral_norm(&m).unwrap();
            for i in 0..3 {
                let mut e = Vector::zeros(3);
                e[i] = 1.0;
                prop_assert!((&m * &e).norm() <= norm * (1.0 + 1e-9) + 1e-12);
            }
        }
    }
}
