//! Exact quadratic-cost optimal transport between equal-size uniform
//! empirical distributions, and the affine-shift transport bound.
//!
//! With equal sizes and uniform weights the optimal coupling is a
//! permutation, so an assignment solver is exact.

use crate::error::{Error, Result};
use crate::numerics::{spectral_norm_exact, Matrix, Vector};
use crate::perturb::{apply, AffineShift};

/// Largest size solved by enumerating permutations.
pub const EXHAUSTIVE_LIMIT: usize = 8;
/// Largest size accepted at all.
pub const ASSIGNMENT_LIMIT: usize = 64;

/// Uniform distribution over a list of points.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDist {
    points: Vec<Vector>,
}

impl EmpiricalDist {
    pub fn new(points: Vec<Vector>) -> Result<Self> {
        let first = points.first().ok_or(Error::InvalidArgument {
            name: "points",
            reason: "empty distribution".into(),
        })?;
        let d = first.len();
        for p in &points {
            if p.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: p.len(),
                });
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vector] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Pushes every point through the shift.
    pub fn shifted(&self, shift: &AffineShift) -> Result<Self> {
        Ok(Self {
            points: self
                .points
                .iter()
                .map(|x| apply(shift, x))
                .collect::<Result<_>>()?,
        })
    }

    /// `(1/N) Σ x xᵀ`
    pub fn second_moment(&self) -> Matrix {
        let d = self.dim();
        let mut m = Matrix::zeros(d, d);
        for x in &self.points {
            m.axpy(1.0 / self.len() as f64, &x.outer(x));
        }
        m
    }
}

/// Optimal coupling as a permutation plus its mean cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    /// `assignment[i] = j` pairs `p_i` with `q_j`.
    pub assignment: Vec<usize>,
    pub cost: f64,
}

fn cost_matrix(p: &EmpiricalDist, q: &EmpiricalDist) -> Vec<Vec<f64>> {
    p.points
        .iter()
        .map(|x| q.points.iter().map(|y| 0.5 * x.sub(y).norm_sq()).collect())
        .collect()
}

fn check_sizes(p: &EmpiricalDist, q: &EmpiricalDist) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::SizeMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    if p.len() > ASSIGNMENT_LIMIT {
        return Err(Error::TooLarge(p.len()));
    }
    Ok(())
}

/// Minimum over all `N!` permutations (Heap's algorithm).
pub fn exhaustive_coupling(cost: &[Vec<f64>]) -> Coupling {
    let n = cost.len();
    let total = |perm: &[usize]| {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| cost[i][j])
            .sum::<f64>()
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = Coupling {
        assignment: perm.clone(),
        cost: total(&perm),
    };
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let v = total(&perm);
            if v < best.cost {
                best = Coupling {
                    assignment: perm.clone(),
                    cost: v,
                };
            }
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best.cost /= n.max(1) as f64;
    best
}

/// Shortest-augmenting-path Hungarian method, `O(N³)`.
pub fn hungarian_coupling(cost: &[Vec<f64>]) -> Coupling {
    let n = cost.len();
    // 1-based potentials; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .sum();
    Coupling {
        assignment,
        cost: total / n.max(1) as f64,
    }
}

/// Optimal coupling under `c(x, x') = ½‖x − x'‖²`.
pub fn optimal_coupling(p: &EmpiricalDist, q: &EmpiricalDist) -> Result<Coupling> {
    check_sizes(p, q)?;
    let cost = cost_matrix(p, q);
    Ok(if p.len() <= EXHAUSTIVE_LIMIT {
        exhaustive_coupling(&cost)
    } else {
        hungarian_coupling(&cost)
    })
}

/// Minimum mean transport cost `min_π E_π[½‖X − X'‖²]`.
pub fn w2_cost(p: &EmpiricalDist, q: &EmpiricalDist) -> Result<f64> {
    Ok(optimal_coupling(p, q)?.cost)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportBoundReport {
    /// Exact transport cost between the samples and their shifted copies.
    pub lhs: f64,
    /// `max{λ̂, 1}(‖Λ − I‖²_F + ‖δ‖²)`
    pub rhs: f64,
    /// Spectral norm of the empirical second moment.
    pub lambda_hat: f64,
    /// Cost of pairing each sample with its own image.
    pub identity_coupling_cost: f64,
    pub holds: bool,
}

/// Evaluates the transport bound for an affine shift on a sample.
pub fn check_transport_bound(
    x_samples: &EmpiricalDist,
    shift: &AffineShift,
) -> Result<TransportBoundReport> {
    if x_samples.dim() != shift.dim() {
        return Err(Error::DimensionMismatch {
            expected: shift.dim(),
            got: x_samples.dim(),
        });
    }
    let shifted = x_samples.shifted(shift)?;
    let lhs = w2_cost(x_samples, &shifted)?;
    let lambda_hat = spectral_norm_exact(&x_samples.second_moment());
    let rhs = lambda_hat.max(1.0) * shift.deviation_sq();
    let identity_coupling_cost = x_samples
        .points()
        .iter()
        .zip(shifted.points())
        .map(|(x, y)| 0.5 * x.sub(y).norm_sq())
        .sum::<f64>()
        / x_samples.len() as f64;
    Ok(TransportBoundReport {
        lhs,
        rhs,
        lambda_hat,
        identity_coupling_cost,
        holds: lhs <= rhs,
    })
}
