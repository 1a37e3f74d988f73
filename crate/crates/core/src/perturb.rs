//! Per-node affine shifts `x -> Λx + δ`, their penalty, and projections onto
//! the Frobenius/ℓ2 budget balls.

use crate::error::{check_dim, Error, Result};
use crate::numerics::{gaussian_matrix, gaussian_sample, Matrix, Purpose, RngStream, Vector};

/// An affine shift `(Λ, δ)`. The same shape also carries gradients with
/// respect to a shift.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineShift {
    pub lambda: Matrix,
    pub delta: Vector,
}

/// Radii of the feasible set: `‖Λ − I‖_F ≤ eps1`, `‖δ‖₂ ≤ eps2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftBudget {
    pub eps1: f64,
    pub eps2: f64,
}

impl ShiftBudget {
    pub fn new(eps1: f64, eps2: f64) -> Result<Self> {
        for (name, v) in [("eps1", eps1), ("eps2", eps2)] {
            if !(v >= 0.0) {
                return Err(Error::InvalidArgument {
                    name,
                    reason: format!("must be nonnegative, got {v}"),
                });
            }
        }
        Ok(Self { eps1, eps2 })
    }
}

impl AffineShift {
    pub fn new(lambda: Matrix, delta: Vector) -> Result<Self> {
        check_dim(lambda.rows(), lambda.cols())?;
        check_dim(lambda.rows(), delta.len())?;
        if !lambda.is_finite() || !delta.is_finite() {
            return Err(Error::NonFinite { iteration: None });
        }
        Ok(Self { lambda, delta })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            lambda: Matrix::identity(d),
            delta: Vector::zeros(d),
        }
    }

    /// All-zero shift-shaped value (a zero gradient).
    pub fn zeros(d: usize) -> Self {
        Self {
            lambda: Matrix::zeros(d, d),
            delta: Vector::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.delta.len()
    }

    /// `‖Λ − I‖²_F`
    pub fn lambda_dev_sq(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim() {
            for (j, v) in self.lambda.row(i).iter().enumerate() {
                let e = if i == j { v - 1.0 } else { *v };
                s += e * e;
            }
        }
        s
    }

    /// Squared distance from the identity shift.
    pub fn deviation_sq(&self) -> f64 {
        self.lambda_dev_sq() + self.delta.norm_sq()
    }

    pub fn norm_sq(&self) -> f64 {
        self.lambda.frobenius_norm_sq() + self.delta.norm_sq()
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &AffineShift) {
        self.lambda.axpy(alpha, &x.lambda);
        self.delta.axpy(alpha, &x.delta);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.lambda.scale(alpha);
        self.delta.scale(alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.lambda.is_finite() && self.delta.is_finite()
    }

    /// Inverse shift `x -> Λ⁻¹(x − δ)` applied to `x`, when `Λ` is invertible.
    pub fn invert_apply(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x.len())?;
        let rhs = x.sub(&self.delta);
        solve_lu(&self.lambda, &rhs)
    }
}

fn solve_lu(a: &Matrix, b: &Vector) -> Result<Vector> {
    let n = a.rows();
    let mut m = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .unwrap();
        if m[(piv, col)].abs() < 1e-300 {
            return Err(Error::InvalidArgument {
                name: "lambda",
                reason: "matrix is singular".into(),
            });
        }
        if piv != col {
            for k in 0..n {
                let tmp = m[(col, k)];
                m[(col, k)] = m[(piv, k)];
                m[(piv, k)] = tmp;
            }
            x.as_mut_slice().swap(col, piv);
        }
        for r in col + 1..n {
            let f = m[(r, col)] / m[(col, col)];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[(r, k)] -= f * m[(col, k)];
            }
            x[r] -= f * x[col];
        }
    }
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[(r, k)] * x[k]).sum();
        x[r] = (x[r] - s) / m[(r, r)];
    }
    Ok(x)
}

/// `Λx + δ`
pub fn apply(shift: &AffineShift, x: &Vector) -> Result<Vector> {
    let mut out = shift.lambda.matvec(x)?;
    out.axpy(1.0, &shift.delta);
    Ok(out)
}

/// `λ‖Λ − I‖²_F + λ‖δ‖²₂`, returned with a positive sign.
pub fn penalty(shift: &AffineShift, lam: f64) -> f64 {
    lam * shift.deviation_sq()
}

/// Gradient of [`penalty`]: `(2λ(Λ − I), 2λδ)`.
pub fn penalty_grad(shift: &AffineShift, lam: f64) -> AffineShift {
    let d = shift.dim();
    let mut lambda = shift.lambda.scaled(2.0 * lam);
    for i in 0..d {
        lambda[(i, i)] -= 2.0 * lam;
    }
    AffineShift {
        lambda,
        delta: shift.delta.scaled(2.0 * lam),
    }
}

/// Euclidean projection onto the product of the two budget balls. Each ball
/// is handled by a radial rescale, which is exact because the feasible set
/// factorizes.
pub fn project(shift: &AffineShift, budget: ShiftBudget) -> AffineShift {
    let d = shift.dim();
    let mut out = shift.clone();
    let dev = shift.lambda_dev_sq().sqrt();
    if dev > budget.eps1 {
        let f = budget.eps1 / dev;
        for i in 0..d {
            for j in 0..d {
                let e = shift.lambda[(i, j)] - if i == j { 1.0 } else { 0.0 };
                out.lambda[(i, j)] = e * f + if i == j { 1.0 } else { 0.0 };
            }
        }
    }
    let dn = shift.delta.norm();
    if dn > budget.eps2 {
        out.delta = shift.delta.scaled(budget.eps2 / dn);
    }
    out
}

pub const DEFAULT_NODE_SHIFT_SIGMA: f64 = 0.01;

/// Random node shift `(I + Λ̃, δ̃)` with `Λ̃ᵢⱼ ~ N(0, σ²/d)` and `δ̃ ~ N(0, σ²I)`.
pub fn sample_node_shift(stream: &RngStream, d: usize, sigma: f64) -> AffineShift {
    assert!(d >= 1, "dimension must be positive");
    let lam_stream = RngStream::derive(stream.seed, Purpose::NodeShift, stream.stream_id, 0);
    let delta_stream = RngStream::derive(stream.seed, Purpose::NodeShift, stream.stream_id, 1);
    let mut lambda = gaussian_matrix(&lam_stream, d, d, sigma / (d as f64).sqrt());
    for i in 0..d {
        lambda[(i, i)] += 1.0;
    }
    let delta = gaussian_sample(&delta_stream, d, 0.0, sigma);
    AffineShift { lambda, delta }
}
