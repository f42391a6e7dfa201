//! Dense linear algebra used throughout the crate.
//!
//! Everything here works on small row-major matrices (tens of rows at most).
//! The symmetric eigensolver is a cyclic Jacobi iteration, which is slow for
//! large inputs but accurate to working precision on the sizes we need.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Off-diagonal Frobenius mass (relative) at which Jacobi sweeps stop.
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is rank deficient (smallest gram eigenvalue {lower:e})")]
    RankDeficient { lower: f64 },
    #[error("matrix is singular (pivot {index})")]
    Singular { index: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense row-major real matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row-major entries, rejecting bad lengths and
    /// non-finite values.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(LinalgError::Dimension("ragged rows".into()));
        }
        Self::from_row_major(r, c, rows.concat())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// Single-row matrix.
    pub fn row_vector(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
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

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Self {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v`
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "tr_matvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    /// `selfᵀ · self`
    pub fn gram_cols(&self) -> Self {
        self.transpose().matmul(self)
    }

    /// `self · selfᵀ`
    pub fn gram_rows(&self) -> Self {
        self.matmul(&self.transpose())
    }

    pub fn add(&self, other: &Matrix) -> Self {
        assert_eq!(self.shape(), other.shape(), "add dimension mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Self { data, ..*self }
    }

    pub fn sub(&self, other: &Matrix) -> Self {
        assert_eq!(self.shape(), other.shape(), "sub dimension mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Self { data, ..*self }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            data: self.data.iter().map(|a| a * s).collect(),
            ..*self
        }
    }

    /// `(S + Sᵀ)/2`
    pub fn symmetrize(&self) -> Self {
        assert!(self.is_square());
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        s
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Assembles `[[a, b], [c, d]]` from conforming blocks.
    pub fn block2x2(a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix) -> Self {
        assert_eq!(a.rows, b.rows);
        assert_eq!(c.rows, d.rows);
        assert_eq!(a.cols, c.cols);
        assert_eq!(b.cols, d.cols);
        let (n, m) = (a.rows + c.rows, a.cols + b.cols);
        let mut out = Self::zeros(n, m);
        for (blk, r0, c0) in [
            (a, 0, 0),
            (b, 0, a.cols),
            (c, a.rows, 0),
            (d, a.rows, a.cols),
        ] {
            for i in 0..blk.rows {
                for j in 0..blk.cols {
                    out[(r0 + i, c0 + j)] = blk[(i, j)];
                }
            }
        }
        out
    }

    /// Horizontal concatenation `[a b]`.
    pub fn hstack(a: &Matrix, b: &Matrix) -> Self {
        assert_eq!(a.rows, b.rows);
        let mut out = Self::zeros(a.rows, a.cols + b.cols);
        for i in 0..a.rows {
            for j in 0..a.cols {
                out[(i, j)] = a[(i, j)];
            }
            for j in 0..b.cols {
                out[(i, a.cols + j)] = b[(i, j)];
            }
        }
        out
    }

    /// Copy of the block with rows `r0..r0+nr` and columns `c0..c0+nc`.
    pub fn submatrix(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> Self {
        let mut out = Self::zeros(nr, nc);
        for i in 0..nr {
            for j in 0..nc {
                out[(i, j)] = self[(r0 + i, c0 + j)];
            }
        }
        out
    }

    /// Largest absolute asymmetry `|S_ij - S_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

// ---- vector helpers ----

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// `y += a·x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

// ---- symmetric eigendecomposition ----

/// Eigenvalues (ascending) and matching unit eigenvectors stored as columns.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEig {
    pub fn min(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized first, so slightly asymmetric round-off is
/// tolerated. Eigenvalues come back ascending.
pub fn sym_eig(s: &Matrix) -> Result<SymEig> {
    if !s.is_square() {
        return Err(LinalgError::Dimension(format!(
            "eigendecomposition of a {}x{} matrix",
            s.rows, s.cols
        )));
    }
    if !s.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let n = s.rows;
    let mut a = s.symmetrize();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius();
    let target = JACOBI_TOL * scale;

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= target || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok(SymEig { values, vectors })
}

// ---- Cholesky and triangular solves ----

/// Lower-triangular `R` with `P = R·Rᵀ`.
pub fn cholesky(p: &Matrix) -> Result<Matrix> {
    if !p.is_square() {
        return Err(LinalgError::Dimension(
            "cholesky of a non-square matrix".into(),
        ));
    }
    if !p.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let n = p.rows;
    let mut r = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = p[(j, j)];
        for k in 0..j {
            d -= r[(j, k)] * r[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { index: j, pivot: d });
        }
        let djj = d.sqrt();
        r[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = 0.5 * (p[(i, j)] + p[(j, i)]);
            for k in 0..j {
                s -= r[(i, k)] * r[(j, k)];
            }
            r[(i, j)] = s / djj;
        }
    }
    Ok(r)
}

/// Solves `R·y = b` for lower-triangular `R`.
pub fn forward_solve(r: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = r.rows;
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= r[(i, k)] * y[k];
        }
        y[i] = s / r[(i, i)];
    }
    y
}

/// Solves `Rᵀ·x = y` for lower-triangular `R`.
pub fn backward_solve_transposed(r: &Matrix, y: &[f64]) -> Vec<f64> {
    let n = r.rows;
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= r[(k, i)] * x[k];
        }
        x[i] = s / r[(i, i)];
    }
    x
}

/// Solves `P·x = b` given the Cholesky factor of `P`.
pub fn cholesky_solve(r: &Matrix, b: &[f64]) -> Vec<f64> {
    backward_solve_transposed(r, &forward_solve(r, b))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(p: &Matrix) -> Result<Matrix> {
    let r = cholesky(p)?;
    let n = p.rows;
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = cholesky_solve(&r, &e);
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    Ok(inv.symmetrize())
}

/// `R⁻¹·G·R⁻ᵀ` for a lower-triangular factor `R`.
pub fn congruence_whiten(r: &Matrix, g: &Matrix) -> Matrix {
    let n = r.rows;
    // X = R⁻¹ G, column by column.
    let mut x = Matrix::zeros(n, n);
    for j in 0..n {
        let col = forward_solve(r, &g.column(j));
        for i in 0..n {
            x[(i, j)] = col[i];
        }
    }
    // Y = X R⁻ᵀ = (R⁻¹ Xᵀ)ᵀ
    let mut y = Matrix::zeros(n, n);
    for i in 0..n {
        let row = forward_solve(r, x.row(i));
        for j in 0..n {
            y[(i, j)] = row[j];
        }
    }
    y
}

// ---- general square solve ----

/// Solves `A·x = b` by LU with partial pivoting.
pub fn lu_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if !a.is_square() || a.rows != b.len() {
        return Err(LinalgError::Dimension(format!(
            "solve with a {}x{} matrix and {} right-hand entries",
            a.rows,
            a.cols,
            b.len()
        )));
    }
    if !a.is_finite() || b.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let n = a.rows;
    let mut lu = a.clone();
    let mut x = b.to_vec();
    let tiny = 1e-13 * a.max_abs().max(f64::MIN_POSITIVE);
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| lu[(i, k)].abs().total_cmp(&lu[(j, k)].abs()))
            .unwrap_or(k);
        if lu[(piv, k)].abs() <= tiny {
            return Err(LinalgError::Singular { index: k });
        }
        if piv != k {
            for j in 0..n {
                let t = lu[(k, j)];
                lu[(k, j)] = lu[(piv, j)];
                lu[(piv, j)] = t;
            }
            x.swap(k, piv);
        }
        let pivot = lu[(k, k)];
        for i in k + 1..n {
            let f = lu[(i, k)] / pivot;
            if f == 0.0 {
                continue;
            }
            lu[(i, k)] = f;
            for j in k + 1..n {
                lu[(i, j)] -= f * lu[(k, j)];
            }
            x[i] -= f * x[k];
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= lu[(i, j)] * x[j];
        }
        x[i] = s / lu[(i, i)];
    }
    Ok(x)
}

/// Orthonormalizes the columns of a square matrix (modified Gram-Schmidt,
/// two passes). Fails if the columns are numerically dependent.
pub fn orthonormalize_columns(g: &Matrix) -> Result<Matrix> {
    let (n, k) = g.shape();
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| g.column(j)).collect();
    for j in 0..k {
        for _pass in 0..2 {
            for i in 0..j {
                let proj = dot(&cols[i], &cols[j]);
                let (done, rest) = cols.split_at_mut(j);
                axpy(-proj, &done[i], &mut rest[0]);
            }
        }
        let nrm = norm2(&cols[j]);
        if nrm <= 1e-12 {
            return Err(LinalgError::Singular { index: j });
        }
        cols[j].iter_mut().for_each(|v| *v /= nrm);
    }
    let mut q = Matrix::zeros(n, k);
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            q[(i, j)] = c[i];
        }
    }
    Ok(q)
}

// ---- norms and spectral bounds ----

/// Extreme eigenvalues of a symmetric positive-semidefinite matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralBounds {
    pub lower: f64,
    pub upper: f64,
}

impl SpectralBounds {
    pub fn of_symmetric(s: &Matrix) -> Result<Self> {
        let eig = sym_eig(s)?;
        Ok(Self {
            lower: eig.min(),
            upper: eig.max(),
        })
    }
}

/// `a_min`, `a_max` with `a_min·I ⪯ A·Aᵀ ⪯ a_max·I`.
pub fn spectral_bounds_gram(a: &Matrix) -> Result<SpectralBounds> {
    if a.rows > a.cols {
        return Err(LinalgError::Dimension(format!(
            "gram bounds need rows <= cols, got {}x{}",
            a.rows, a.cols
        )));
    }
    let b = SpectralBounds::of_symmetric(&a.gram_rows())?;
    if b.lower <= 1e-10 {
        return Err(LinalgError::RankDeficient { lower: b.lower });
    }
    Ok(b)
}

/// `‖v‖_P = sqrt(vᵀPv)` for positive-definite `P`.
pub fn weighted_norm(p: &Matrix, v: &[f64]) -> Result<f64> {
    if p.rows != v.len() || !p.is_square() {
        return Err(LinalgError::Dimension(format!(
            "weighted norm with a {}x{} weight and a {}-vector",
            p.rows,
            p.cols,
            v.len()
        )));
    }
    let r = cholesky(p)?;
    Ok(weighted_norm_factored(&r, v))
}

/// `‖v‖_P` given the Cholesky factor `R` of `P`: `‖Rᵀv‖₂`.
pub fn weighted_norm_factored(r: &Matrix, v: &[f64]) -> f64 {
    norm2(&r.tr_matvec(v))
}

/// Weighted logarithmic norm `μ_P(A)`: the least `b` with
/// `P·A + Aᵀ·P ⪯ 2b·P`.
pub fn lognorm_weighted(p: &Matrix, a: &Matrix) -> Result<f64> {
    if !a.is_square() || a.rows != p.rows || !p.is_square() {
        return Err(LinalgError::Dimension(format!(
            "log-norm of a {}x{} matrix with a {}x{} weight",
            a.rows, a.cols, p.rows, p.cols
        )));
    }
    let r = cholesky(p)?;
    Ok(lognorm_factored(&r, p, a))
}

/// `μ_P(A)` given `R` with `P = R·Rᵀ`.
pub fn lognorm_factored(r: &Matrix, p: &Matrix, a: &Matrix) -> f64 {
    let pa = p.matmul(a);
    let g = pa.add(&pa.transpose());
    let w = congruence_whiten(r, &g).symmetrize();
    let eig = sym_eig(&w).expect("whitened matrix is square and finite");
    0.5 * eig.max()
}
