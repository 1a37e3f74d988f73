use std::ops::{Index, IndexMut};

use crate::error::{check_dim, Error, Result};

/// Dense real vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize) -> f64) -> Self {
        Self {
            data: (0..dim).map(f).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        dot(&self.data, &other.data)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Vector) {
        debug_assert_eq!(self.len(), x.len());
        for (a, b) in self.data.iter_mut().zip(&x.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Vector {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn add(&self, other: &Vector) -> Vector {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// Outer product `self * other^T`.
    pub fn outer(&self, other: &Vector) -> Matrix {
        Matrix::from_fn(self.len(), other.len(), |i, j| self.data[i] * other.data[j])
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major entries, rejecting bad lengths and
    /// non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { iteration: None });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.cols, x.len())?;
        Ok(self.matvec_unchecked(x.as_slice()))
    }

    pub(crate) fn matvec_unchecked(&self, x: &[f64]) -> Vector {
        Vector::from_fn(self.rows, |i| dot(self.row(i), x))
    }

    /// `self^T x`
    pub fn matvec_t(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.rows, x.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        Ok(Vector::from_vec(out))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dim(self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out.row_mut(i).iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T self`
    pub fn gram(&self) -> Matrix {
        self.transpose()
            .matmul(self)
            .expect("gram dimensions chain")
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (x.rows, x.cols));
        for (a, b) in self.data.iter_mut().zip(&x.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn symmetrized(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self[(i, j)] + self[(j, i)])
        })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.frobenius_norm_sq().sqrt()
}

pub const SPECTRAL_TOL: f64 = 1e-10;
pub const SPECTRAL_MAX_ITER: usize = 1000;

/// Largest singular value by power iteration on `M^T M`.
///
/// Starts from the normalized all-ones vector. If that start is annihilated
/// by a nonzero matrix, a fixed sequence of fallback starts is tried, so the
/// result stays deterministic.
pub fn spectral_norm(m: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument {
            name: "tol",
            reason: format!("must be positive, got {tol}"),
        });
    }
    let n = m.cols();
    if n == 0 || m.rows() == 0 || m.frobenius_norm_sq() == 0.0 {
        return Ok(0.0);
    }
    let starts: [fn(usize) -> f64; 3] = [
        |_| 1.0,
        |i| (i + 1) as f64,
        |i| ((i as f64) * 0.618_033_988_75 + 0.5).sin(),
    ];
    for start in starts {
        let mut v = Vector::from_fn(n, start);
        let norm = v.norm();
        v.scale(1.0 / norm);
        let mut prev = f64::NAN;
        let mut collapsed = false;
        for _ in 0..max_iter {
            let mv = m.matvec_unchecked(v.as_slice());
            let mut w = m.matvec_t(&mv).expect("shape");
            // Rayleigh quotient v^T M^T M v with ||v|| = 1.
            let est = mv.norm_sq();
            let wn = w.norm();
            if wn == 0.0 {
                collapsed = true;
                break;
            }
            w.scale(1.0 / wn);
            v = w;
            if (est - prev).abs() <= tol * est.abs() {
                return Ok(est.sqrt());
            }
            prev = est;
        }
        if !collapsed {
            return Err(Error::NonConvergence {
                iterations: max_iter,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
    })
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Ascending eigenvalues.
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigen-solver for small symmetric matrices.
pub fn sym_eigen(m: &Matrix) -> Result<SymEigen> {
    check_dim(m.rows(), m.cols())?;
    let n = m.rows();
    let mut a = m.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm_sq().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
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
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEigen { values, vectors })
}

impl SymEigen {
    /// Rebuilds `V f(D) V^T`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let fv: Vec<f64> = self.values.iter().map(|&x| f(x)).collect();
        Matrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| self.vectors[(i, k)] * fv[k] * self.vectors[(j, k)])
                .sum()
        })
    }
}

/// Largest singular value through the Jacobi solver on the smaller Gram
/// matrix. Slower than power iteration but immune to small spectral gaps.
pub fn spectral_norm_exact(m: &Matrix) -> f64 {
    let gram = if m.rows() < m.cols() {
        m.matmul(&m.transpose()).expect("shape")
    } else {
        m.gram()
    };
    let eig = sym_eigen(&gram).expect("square");
    eig.values.last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky.
pub fn cholesky_solve(a: &Matrix, b: &Vector) -> Result<Vector> {
    check_dim(a.rows(), a.cols())?;
    check_dim(a.rows(), b.len())?;
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(Error::InvalidArgument {
                name: "a",
                reason: "matrix is not positive definite".into(),
            });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[(i, k)] * y[k]).sum();
        y[i] = (b[i] - s) / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[(k, i)] * x[k]).sum();
        x[i] = (y[i] - s) / l[(i, i)];
    }
    Ok(Vector::from_vec(x))
}
