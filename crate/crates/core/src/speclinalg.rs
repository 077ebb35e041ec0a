//! Dense `f64` matrices plus the spectral kernels the trimming math needs:
//! cyclic Jacobi eigendecomposition, Gram matrices, top-`c` eigenvector
//! selection and a thresholded pseudo-inverse solve.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensorio::Tensor;

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} matrix from {} values", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Rank-2 tensor view (widened to `f64`).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[r, c] => Self::from_vec(r, c, t.to_f64_vec()),
            s => Err(Error::Shape(format!("expected a rank-2 tensor, got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_f64(vec![self.rows, self.cols], self.data.clone())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    /// `self · other`, accumulated in ascending inner index.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "t_matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let arow = self.row(r);
            let brow = other.row(r);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[(i, j)] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "elementwise {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Result<Matrix> {
        if self.rows != self.cols {
            return Err(Error::Shape(format!("{}x{} matrix is not square", self.rows, self.cols)));
        }
        let n = self.rows;
        let mut s = self.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        Ok(s)
    }

    /// Copy of the given columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, cols.len());
        for r in 0..self.rows {
            for (j, &c) in cols.iter().enumerate() {
                out[(r, j)] = self[(r, c)];
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
#[derive(Debug, Clone)]
pub struct EigenResult {
    pub eigenvalues: Vec<f64>,
    /// Column `j` pairs with `eigenvalues[j]`.
    pub eigenvectors: Matrix,
}

pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const JACOBI_TOL: f64 = 1e-12;

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized first. Iteration stops once the off-diagonal
/// Frobenius norm falls below `1e-12 · ‖A‖_F`. Eigenvalues are sorted
/// descending (ties keep the lower diagonal index first) and every
/// eigenvector is flipped so its largest-magnitude component is positive.
pub fn sym_eig(a: &Matrix) -> Result<EigenResult> {
    let mut a = a.symmetrized()?;
    let n = a.rows();
    let mut v = Matrix::identity(n);
    let norm = a.frobenius();
    let tol = JACOBI_TOL * norm;

    let mut converged = norm == 0.0 || off_diagonal_norm(&a) < tol;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                if s == 0.0 {
                    // Rotation below resolution; the entry is negligible.
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                // A ← Jᵀ A J on rows/columns p, q.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_diagonal_norm(&a) < tol;
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps, residual: off_diagonal_norm(&a) });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut eigenvectors = v.select_columns(&order);
    for j in 0..n {
        let mut best = 0;
        for r in 1..n {
            if eigenvectors[(r, j)].abs() > eigenvectors[(best, j)].abs() {
                best = r;
            }
        }
        if eigenvectors[(best, j)] < 0.0 {
            for r in 0..n {
                eigenvectors[(r, j)] = -eigenvectors[(r, j)];
            }
        }
    }
    Ok(EigenResult { eigenvalues, eigenvectors })
}

/// `XᵀX`; the upper triangle is accumulated row by row and mirrored.
pub fn gram(x: &Matrix) -> Matrix {
    let d = x.cols();
    let mut g = Matrix::zeros(d, d);
    for r in 0..x.rows() {
        let row = x.row(r);
        for i in 0..d {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            for j in i..d {
                g[(i, j)] += xi * row[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            g[(i, j)] = g[(j, i)];
        }
    }
    g
}

/// Eigenvalues at or below this are treated as non-positive when gating.
pub fn eig_tolerance(eigenvalues: &[f64]) -> f64 {
    let lmax = eigenvalues.first().copied().unwrap_or(0.0);
    1e-10 * lmax.max(1.0)
}

/// The leading `min(c, d)` eigenvectors as a `d × c'` matrix; with
/// `positive_only`, columns whose eigenvalue is `≤ 1e-10 · max(1, λ_max)`
/// are dropped.
pub fn top_c_eigvecs(e: &EigenResult, c: usize, positive_only: bool) -> Matrix {
    let d = e.eigenvectors.rows();
    let tol = eig_tolerance(&e.eigenvalues);
    let cols: Vec<usize> = (0..c.min(e.eigenvalues.len()))
        .filter(|&j| !positive_only || e.eigenvalues[j] > tol)
        .collect();
    if cols.is_empty() {
        return Matrix::zeros(d, 0);
    }
    e.eigenvectors.select_columns(&cols)
}

/// Relative eigenvalue cutoff used by [`spd_solve`].
pub const PINV_RELTOL: f64 = 1e-10;

/// Minimum-norm solution of `A X = B` for symmetric PSD `A`, through the
/// eigendecomposition of `A` with eigenvalues `≤ 1e-10 · λ_max` discarded.
pub fn spd_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() || a.rows() != b.rows() {
        return Err(Error::Shape(format!(
            "spd_solve with A {}x{} and B {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let e = sym_eig(a)?;
    let n = a.rows();
    let mut x = Matrix::zeros(n, b.cols());
    let lmax = e.eigenvalues.first().copied().unwrap_or(0.0);
    if lmax <= 0.0 {
        return Ok(x);
    }
    let cutoff = PINV_RELTOL * lmax;
    for (j, &lambda) in e.eigenvalues.iter().enumerate() {
        if lambda <= cutoff {
            continue;
        }
        let v = e.eigenvectors.column(j);
        // coefficient row: vᵀB / λ
        let mut coef = vec![0.0; b.cols()];
        for (r, &vr) in v.iter().enumerate() {
            for (c, slot) in coef.iter_mut().enumerate() {
                *slot += vr * b[(r, c)];
            }
        }
        for r in 0..n {
            for (c, &k) in coef.iter().enumerate() {
                x[(r, c)] += v[r] * k / lambda;
            }
        }
    }
    Ok(x)
}
