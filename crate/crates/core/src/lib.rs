//! Federated minimax training against per-node affine distribution shifts.
//!
//! Nodes run stochastic gradient descent on a shared model while each one
//! ascends on its own affine shift `x -> Λx + δ`; the server averages models
//! every `τ` local steps. Alongside the trainer the crate carries the
//! measurement tooling used to check its convergence and robustness
//! guarantees: quadratic minimax games with closed-form constants, exact
//! small-sample optimal transport, and model complexity diagnostics.

pub mod attacks;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fedopt;
pub mod lab;
pub mod model;
pub mod numerics;
pub mod perturb;
pub mod transport;

pub use error::{Error, Result};
