//! Dense linear algebra, norms and seeded random streams.

mod linalg;
mod rng;

pub(crate) use linalg::dot;
pub use linalg::{
    cholesky_solve, frobenius_norm, spectral_norm, spectral_norm_exact, sym_eigen, Matrix,
    SymEigen, Vector, SPECTRAL_MAX_ITER, SPECTRAL_TOL,
};
pub use rng::{gaussian_sample, Purpose, RngStream};

/// Random matrix with i.i.d. `N(0, std^2)` entries.
pub fn gaussian_matrix(stream: &RngStream, rows: usize, cols: usize, std: f64) -> Matrix {
    let v = gaussian_sample(stream, rows * cols, 0.0, std);
    Matrix::new(rows, cols, v.into_vec()).expect("finite gaussian draws")
}
