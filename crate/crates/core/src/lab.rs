//! Quadratic minimax games with closed-form constants.
//!
//! Node `i` holds
//! `f^i(w, ψ) = ½wᵀAᵢw + uᵢᵀw + wᵀBᵢψ − ½ψᵀCᵢψ + vᵢᵀψ`
//! and the global objective is the node average. Everything the convergence
//! bounds are stated in terms of (`Φ`, `Φ*`, the smoothness and PL constants,
//! the optimality gaps) is available exactly, so the bounds can be checked
//! against real runs of the federated trainer.

use crate::error::{check_dim, Error, Result};
use crate::fedopt::{
    run_fedavg, run_fedrobust, Evaluation, HyperParams, LocalObjective, NodeState, TrainHooks,
};
use crate::numerics::{
    gaussian_matrix, gaussian_sample, spectral_norm_exact, sym_eigen, Matrix, Purpose, RngStream,
    Vector,
};

/// Condition number above which an inner matrix counts as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;
/// Random `w` points used to measure the heterogeneity constant.
pub const RHO_GRID_POINTS: usize = 100;
pub const DEFAULT_NOISE_SEEDS: usize = 20;

/// One node of a quadratic game.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadNode {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub u: Vector,
    pub v: Vector,
}

impl QuadNode {
    pub fn value(&self, w: &Vector, psi: &Vector) -> f64 {
        let aw = self.a.matvec_unchecked(w.as_slice());
        let bpsi = self.b.matvec_unchecked(psi.as_slice());
        let cpsi = self.c.matvec_unchecked(psi.as_slice());
        0.5 * w.dot(&aw) + self.u.dot(w) + w.dot(&bpsi) - 0.5 * psi.dot(&cpsi) + self.v.dot(psi)
    }

    pub fn grad_w(&self, w: &Vector, psi: &Vector) -> Vector {
        let mut g = self.a.matvec_unchecked(w.as_slice());
        g.axpy(1.0, &self.u);
        g.axpy(1.0, &self.b.matvec_unchecked(psi.as_slice()));
        g
    }

    pub fn grad_psi(&self, w: &Vector, psi: &Vector) -> Vector {
        let mut g = self.b.matvec_t(w).expect("validated shapes");
        g.axpy(-1.0, &self.c.matvec_unchecked(psi.as_slice()));
        g.axpy(1.0, &self.v);
        g
    }
}

impl LocalObjective for QuadNode {
    type W = Vector;
    type Psi = Vector;

    fn sample_count(&self) -> usize {
        1
    }

    fn evaluate(
        &self,
        w: &Vector,
        psi: &Vector,
        _rows: Option<&[usize]>,
        _lam: f64,
        want_w: bool,
    ) -> Result<Evaluation<Vector, Vector>> {
        let loss = self.value(w, psi);
        if !loss.is_finite() {
            return Err(Error::NonFinite { iteration: None });
        }
        let grad_w = if want_w {
            self.grad_w(w, psi)
        } else {
            Vector::zeros(w.len())
        };
        Ok(Evaluation {
            loss,
            data_loss: loss,
            penalty: 0.0,
            grad_w,
            grad_psi: self.grad_psi(w, psi),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticGame {
    pub nodes: Vec<QuadNode>,
    /// Dimension of `w`.
    pub p: usize,
    /// Dimension of each `ψᵢ`.
    pub q: usize,
}

fn is_symmetric(m: &Matrix) -> bool {
    let scale = m.frobenius_norm_sq().sqrt().max(1.0);
    (0..m.rows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= 1e-12 * scale))
}

impl QuadraticGame {
    pub fn new(nodes: Vec<QuadNode>) -> Result<Self> {
        let first = nodes.first().ok_or(Error::InvalidArgument {
            name: "nodes",
            reason: "no nodes".into(),
        })?;
        let (p, q) = (first.a.rows(), first.c.rows());
        for (i, nd) in nodes.iter().enumerate() {
            check_dim(p, nd.a.rows())?;
            check_dim(p, nd.a.cols())?;
            check_dim(p, nd.b.rows())?;
            check_dim(q, nd.b.cols())?;
            check_dim(q, nd.c.rows())?;
            check_dim(q, nd.c.cols())?;
            check_dim(p, nd.u.len())?;
            check_dim(q, nd.v.len())?;
            if !is_symmetric(&nd.a) || !is_symmetric(&nd.c) {
                return Err(Error::InvalidArgument {
                    name: "nodes",
                    reason: format!("node {i}: A and C must be symmetric"),
                });
            }
            let ea = sym_eigen(&nd.a)?;
            if ea.values[0] < -1e-12 * ea.values.last().unwrap().abs().max(1.0) {
                return Err(Error::InvalidArgument {
                    name: "nodes",
                    reason: format!("node {i}: A is not PSD"),
                });
            }
        }
        Ok(Self { nodes, p, q })
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    /// Global objective `(1/n) Σ f^i(w, ψᵢ)`.
    pub fn value(&self, w: &Vector, psi: &[Vector]) -> f64 {
        self.nodes
            .iter()
            .zip(psi)
            .map(|(nd, s)| nd.value(w, s))
            .sum::<f64>()
            / self.n() as f64
    }

    /// Precomputes inner inverses and the saddle point.
    pub fn prepare(&self) -> Result<PreparedGame> {
        PreparedGame::new(self.clone())
    }
}

/// A game with its inner inverses, `Φ`-Hessian and saddle point cached.
#[derive(Debug, Clone)]
pub struct PreparedGame {
    pub game: QuadraticGame,
    inv_c: Vec<Matrix>,
    /// Hessian of `Φ`: `avg(Aᵢ + BᵢCᵢ⁻¹Bᵢᵀ)`.
    pub hessian: Matrix,
    /// `∇Φ(0)`: `avg(uᵢ + BᵢCᵢ⁻¹vᵢ)`.
    pub linear: Vector,
    pub w_star: Vector,
    pub psi_star: Vec<Vector>,
    pub phi_star: f64,
}

impl PreparedGame {
    fn new(game: QuadraticGame) -> Result<Self> {
        let n = game.n() as f64;
        let mut inv_c = Vec::with_capacity(game.n());
        let mut hessian = Matrix::zeros(game.p, game.p);
        let mut linear = Vector::zeros(game.p);
        for (i, nd) in game.nodes.iter().enumerate() {
            let eig = sym_eigen(&nd.c)?;
            let (lo, hi) = (eig.values[0], *eig.values.last().unwrap());
            if !(lo > 0.0) || hi / lo > SINGULAR_CONDITION {
                let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
                return Err(Error::SingularInnerMatrix { node: i, condition });
            }
            let ci = eig.map_values(|x| 1.0 / x);
            let bci = nd.b.matmul(&ci)?;
            hessian.axpy(1.0 / n, &nd.a);
            hessian.axpy(1.0 / n, &bci.matmul(&nd.b.transpose())?);
            linear.axpy(1.0 / n, &nd.u);
            linear.axpy(1.0 / n, &bci.matvec(&nd.v)?);
            inv_c.push(ci);
        }
        let hessian = hessian.symmetrized();
        let eig = sym_eigen(&hessian)?;
        let top = eig
            .values
            .last()
            .copied()
            .unwrap_or(0.0)
            .abs()
            .max(f64::MIN_POSITIVE);
        let cut = 1e-10 * top;
        // w* = −H⁺ ∇Φ(0); a gradient component in the null space means Φ is unbounded below
        let mut w_star = Vector::zeros(game.p);
        for (k, &lam) in eig.values.iter().enumerate() {
            let col = Vector::from_fn(game.p, |r| eig.vectors[(r, k)]);
            let coef = col.dot(&linear);
            if lam > cut {
                w_star.axpy(-coef / lam, &col);
            } else if coef.abs() > 1e-9 * linear.norm().max(1.0) {
                return Err(Error::InvalidArgument {
                    name: "game",
                    reason: "Φ is unbounded below".into(),
                });
            }
        }
        let mut prepared = Self {
            game,
            inv_c,
            hessian,
            linear,
            w_star: w_star.clone(),
            psi_star: Vec::new(),
            phi_star: 0.0,
        };
        prepared.psi_star = prepared.inner_argmax(&w_star);
        prepared.phi_star = prepared.phi(&w_star);
        Ok(prepared)
    }

    /// `ψᵢ*(w) = Cᵢ⁻¹(Bᵢᵀw + vᵢ)` for every node.
    pub fn inner_argmax(&self, w: &Vector) -> Vec<Vector> {
        self.game
            .nodes
            .iter()
            .zip(&self.inv_c)
            .map(|(nd, ci)| {
                let mut r = nd.b.matvec_t(w).expect("shape");
                r.axpy(1.0, &nd.v);
                ci.matvec_unchecked(r.as_slice())
            })
            .collect()
    }

    /// `Φ(w) = max_Ψ f(w, Ψ)`.
    pub fn phi(&self, w: &Vector) -> f64 {
        let n = self.game.n() as f64;
        self.game
            .nodes
            .iter()
            .zip(&self.inv_c)
            .map(|(nd, ci)| {
                let mut r = nd.b.matvec_t(w).expect("shape");
                r.axpy(1.0, &nd.v);
                let aw = nd.a.matvec_unchecked(w.as_slice());
                0.5 * w.dot(&aw) + nd.u.dot(w) + 0.5 * r.dot(&ci.matvec_unchecked(r.as_slice()))
            })
            .sum::<f64>()
            / n
    }

    pub fn grad_phi(&self, w: &Vector) -> Vector {
        let mut g = self.hessian.matvec_unchecked(w.as_slice());
        g.axpy(1.0, &self.linear);
        g
    }

    /// `Φ(w) − Φ*`, evaluated as `½(w − w*)ᵀH(w − w*)` to avoid cancellation.
    pub fn outer_gap(&self, w: &Vector) -> f64 {
        let e = w.sub(&self.w_star);
        0.5 * e.dot(&self.hessian.matvec_unchecked(e.as_slice()))
    }

    /// `Φ(w) − f(w, Ψ)`, evaluated as the average of `½eᵢᵀCᵢeᵢ` with
    /// `eᵢ = ψᵢ − ψᵢ*(w)`.
    pub fn inner_gap(&self, w: &Vector, psi: &[Vector]) -> f64 {
        let star = self.inner_argmax(w);
        let n = self.game.n() as f64;
        self.game
            .nodes
            .iter()
            .zip(psi.iter().zip(&star))
            .map(|(nd, (s, st))| {
                let e = s.sub(st);
                0.5 * e.dot(&nd.c.matvec_unchecked(e.as_slice()))
            })
            .sum::<f64>()
            / n
    }

    /// Variance of the local `w`-gradients around their mean at `ψ = 0`.
    pub fn heterogeneity_sq(&self, w: &Vector) -> f64 {
        let zero = Vector::zeros(self.game.q);
        let grads: Vec<Vector> = self
            .game
            .nodes
            .iter()
            .map(|nd| nd.grad_w(w, &zero))
            .collect();
        let n = grads.len() as f64;
        let mut mean = Vector::zeros(self.game.p);
        grads.iter().for_each(|g| mean.axpy(1.0 / n, g));
        grads.iter().map(|g| g.sub(&mean).norm_sq()).sum::<f64>() / n
    }
}

/// `Φ(w)` for a game, computing the inner maximizers in closed form.
pub fn phi_closed_form(game: &QuadraticGame, w: &Vector) -> Result<f64> {
    check_dim(game.p, w.len())?;
    Ok(game.prepare()?.phi(w))
}

/// Smoothness, PL and heterogeneity constants of a game.
///
/// `l1`, `l2`, `l12`, `l21` bound the local gradients. `mu1` and `mu2` are PL
/// constants of the node-averaged objective, so `mu2` carries the `1/n` of
/// the average.
#[derive(Debug, Clone, PartialEq)]
pub struct GameConstants {
    pub n: usize,
    pub l1: f64,
    pub l2: f64,
    pub l12: f64,
    pub l21: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub l_phi: f64,
    pub kappa: f64,
    pub rho_f: f64,
}

pub fn constants(game: &QuadraticGame) -> Result<GameConstants> {
    let prepared = game.prepare()?;
    let n = game.n();
    let nf = n as f64;
    let mut l1: f64 = 0.0;
    let mut l2: f64 = 0.0;
    let mut l12: f64 = 0.0;
    let mut c_min = f64::INFINITY;
    for nd in &game.nodes {
        let ea = sym_eigen(&nd.a)?;
        l1 = l1.max(ea.values.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let ec = sym_eigen(&nd.c)?;
        l2 = l2.max(*ec.values.last().unwrap());
        c_min = c_min.min(ec.values[0]);
        l12 = l12.max(spectral_norm_exact(&nd.b));
    }
    let mu2 = c_min / nf;
    let eh = sym_eigen(&prepared.hessian)?;
    let top = eh
        .values
        .last()
        .copied()
        .unwrap_or(0.0)
        .abs()
        .max(f64::MIN_POSITIVE);
    let mu1 = eh
        .values
        .iter()
        .copied()
        .find(|&v| v > 1e-10 * top)
        .unwrap_or(0.0);
    let l21 = l12;
    let l_phi = l1 + l12 * l21 / (2.0 * nf * mu2);
    let big_l = l1.max(l2 / nf).max(l12 / nf.sqrt()).max(l21 / nf.sqrt());
    let kappa = big_l / mu1.min(mu2);

    let radius = 1f64.max(2.0 * prepared.w_star.norm());
    let mut rho_sq: f64 = 0.0;
    for k in 0..RHO_GRID_POINTS {
        let stream = RngStream::derive(0x5eed, Purpose::Trial, k as u64, 0);
        let w = gaussian_sample(&stream, game.p, 0.0, radius / (game.p as f64).sqrt());
        rho_sq = rho_sq.max(prepared.heterogeneity_sq(&w));
    }
    Ok(GameConstants {
        n,
        l1,
        l2,
        l12,
        l21,
        mu1,
        mu2,
        l_phi,
        kappa,
        rho_f: rho_sq.sqrt(),
    })
}

/// Parameters for random game generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// Eigenvalue range of the shared part of `Aᵢ`.
    pub a_eig: (f64, f64),
    /// Eigenvalue range of the shared part of `Cᵢ`.
    pub c_eig: (f64, f64),
    /// Spectral scale of the coupling `Bᵢ`.
    pub b_scale: f64,
    /// Magnitude of per-node deviations (0 gives identical nodes).
    pub heterogeneity: f64,
    /// Scale of the linear terms.
    pub linear_scale: f64,
}

fn random_orthogonal(stream: &RngStream, d: usize) -> Matrix {
    let g = gaussian_matrix(stream, d, d, 1.0);
    let mut q = Matrix::zeros(d, d);
    for c in 0..d {
        let mut col: Vec<f64> = (0..d).map(|r| g[(r, c)]).collect();
        for k in 0..c {
            let proj: f64 = (0..d).map(|r| q[(r, k)] * col[r]).sum();
            for r in 0..d {
                col[r] -= proj * q[(r, k)];
            }
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        for r in 0..d {
            q[(r, c)] = col[r] / norm;
        }
    }
    q
}

fn random_spd(stream: &RngStream, d: usize, (lo, hi): (f64, f64)) -> Matrix {
    let q = random_orthogonal(stream, d);
    let diag: Vec<f64> = (0..d)
        .map(|k| {
            if d == 1 {
                lo
            } else {
                lo + (hi - lo) * (k as f64 / (d - 1) as f64)
            }
        })
        .collect();
    let d_mat = Matrix::from_diag(&diag);
    q.matmul(&d_mat)
        .unwrap()
        .matmul(&q.transpose())
        .unwrap()
        .symmetrized()
}

impl QuadraticGame {
    /// Random game: a shared base node plus per-node PSD/Gaussian deviations.
    pub fn random(spec: &GameSpec, seed: u64) -> Result<Self> {
        let s = |k: u64, node: u64| RngStream::derive(seed, Purpose::Trial, node, k);
        let (p, q) = (spec.p, spec.q);
        let base_a = random_spd(&s(1, u64::MAX), p, spec.a_eig);
        let base_c = random_spd(&s(2, u64::MAX), q, spec.c_eig);
        let mut base_b = gaussian_matrix(&s(3, u64::MAX), p, q, 1.0);
        let bn = spectral_norm_exact(&base_b);
        if bn > 0.0 {
            base_b.scale(spec.b_scale / bn);
        }
        let base_u = gaussian_sample(&s(4, u64::MAX), p, 0.0, spec.linear_scale);
        let base_v = gaussian_sample(&s(5, u64::MAX), q, 0.0, spec.linear_scale);
        let h = spec.heterogeneity;
        let nodes = (0..spec.n as u64)
            .map(|i| {
                let ga = gaussian_matrix(&s(6, i), p, p, 1.0 / (p as f64).sqrt());
                let gc = gaussian_matrix(&s(7, i), q, q, 1.0 / (q as f64).sqrt());
                let gb = gaussian_matrix(&s(8, i), p, q, spec.b_scale / ((p + q) as f64).sqrt());
                let mut a = base_a.clone();
                a.axpy(h, &ga.matmul(&ga.transpose()).unwrap());
                let mut c = base_c.clone();
                c.axpy(h, &gc.matmul(&gc.transpose()).unwrap());
                let mut b = base_b.clone();
                b.axpy(h, &gb);
                let mut u = base_u.clone();
                u.axpy(h, &gaussian_sample(&s(9, i), p, 0.0, spec.linear_scale));
                let mut v = base_v.clone();
                v.axpy(h, &gaussian_sample(&s(10, i), q, 0.0, spec.linear_scale));
                QuadNode {
                    a: a.symmetrized(),
                    b,
                    c: c.symmetrized(),
                    u,
                    v,
                }
            })
            .collect();
        Self::new(nodes)
    }
}

/// Starting point of a lab run.
#[derive(Debug, Clone, PartialEq)]
pub struct LabStart {
    pub w0: Vector,
    pub psi0: Vec<Vector>,
}

impl LabStart {
    pub fn zeros(game: &QuadraticGame) -> Self {
        Self {
            w0: Vector::zeros(game.p),
            psi0: vec![Vector::zeros(game.q); game.n()],
        }
    }

    pub fn saddle(prepared: &PreparedGame) -> Self {
        Self {
            w0: prepared.w_star.clone(),
            psi0: prepared.psi_star.clone(),
        }
    }

    /// Gaussian start with the given scale.
    pub fn random(game: &QuadraticGame, scale: f64, seed: u64) -> Self {
        let w0 = gaussian_sample(
            &RngStream::derive(seed, Purpose::Init, 0, 0),
            game.p,
            0.0,
            scale,
        );
        let psi0 = (0..game.n() as u64)
            .map(|i| {
                gaussian_sample(
                    &RngStream::derive(seed, Purpose::Init, i + 1, 0),
                    game.q,
                    0.0,
                    scale,
                )
            })
            .collect();
        Self { w0, psi0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabAlgorithm {
    FedRobust,
    FedAvg,
}

/// Gap quantities at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PotentialRecord {
    pub t: usize,
    /// `Φ(w̄ₜ) − Φ*`
    pub a: f64,
    /// `Φ(w̄ₜ) − f(w̄ₜ, Ψₜ)`
    pub b: f64,
    /// `a + ½b`
    pub p: f64,
    /// Model dispersion `(1/n)Σ‖wᵢ − w̄‖²`.
    pub e: f64,
    /// `‖(1/n)Σ∇_w fⁱ(wᵢ, ψᵢ)‖²`
    pub g: f64,
    pub grad_phi_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialTrace {
    /// Records for `t = 0..=T`, averaged over seeds.
    pub records: Vec<PotentialRecord>,
    /// Largest `‖ψᵢ‖²` seen on any node at any iteration (the realized shift
    /// radius, measured from `ψ = 0`).
    pub max_psi_sq: f64,
    /// Largest heterogeneity variance seen at the averaged iterates.
    pub max_rho_sq: f64,
    pub n: usize,
    pub seeds: usize,
}

impl PotentialTrace {
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }
}

struct LabHooks<'a> {
    game: &'a PreparedGame,
    records: Vec<PotentialRecord>,
    max_psi_sq: f64,
    max_rho_sq: f64,
}

impl TrainHooks<QuadNode> for LabHooks<'_> {
    fn observe(&mut self, t: usize, nodes: &[NodeState<QuadNode>]) -> Result<()> {
        let n = nodes.len() as f64;
        let mut order: Vec<&NodeState<QuadNode>> = nodes.iter().collect();
        order.sort_by_key(|nd| nd.id);
        let mut w_bar = Vector::zeros(self.game.game.p);
        order.iter().for_each(|nd| w_bar.axpy(1.0 / n, &nd.w_local));
        let psi: Vec<Vector> = order.iter().map(|nd| nd.shift.clone()).collect();
        let a = self.game.outer_gap(&w_bar);
        let b = self.game.inner_gap(&w_bar, &psi);
        let e = order
            .iter()
            .map(|nd| nd.w_local.sub(&w_bar).norm_sq())
            .sum::<f64>()
            / n;
        let mut gsum = Vector::zeros(self.game.game.p);
        for nd in &order {
            gsum.axpy(1.0 / n, &nd.data.grad_w(&nd.w_local, &nd.shift));
        }
        let grad_phi_sq = self.game.grad_phi(&w_bar).norm_sq();
        self.records.push(PotentialRecord {
            t,
            a,
            b,
            p: a + 0.5 * b,
            e,
            g: gsum.norm_sq(),
            grad_phi_sq,
        });
        for s in &psi {
            self.max_psi_sq = self.max_psi_sq.max(s.norm_sq());
        }
        self.max_rho_sq = self.max_rho_sq.max(self.game.heterogeneity_sq(&w_bar));
        Ok(())
    }
}

/// Runs the trainer on the game once per seed and records the gap
/// quantities at every iteration, averaged over seeds.
pub fn trace_run(
    game: &PreparedGame,
    hp: &HyperParams,
    algorithm: LabAlgorithm,
    start: &LabStart,
    seeds: &[u64],
) -> Result<PotentialTrace> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument {
            name: "seeds",
            reason: "need at least one seed".into(),
        });
    }
    check_dim(game.game.p, start.w0.len())?;
    check_dim(game.game.n(), start.psi0.len())?;
    let mut sum: Vec<PotentialRecord> = Vec::new();
    let (mut max_psi_sq, mut max_rho_sq) = (0.0f64, 0.0f64);
    for &seed in seeds {
        let mut nodes: Vec<NodeState<QuadNode>> = game
            .game
            .nodes
            .iter()
            .enumerate()
            .map(|(i, nd)| NodeState {
                id: i,
                data: nd.clone(),
                w_local: start.w0.clone(),
                shift: start.psi0[i].clone(),
                stream: RngStream::new(seed, i as u64),
            })
            .collect();
        let mut hooks = LabHooks {
            game,
            records: Vec::with_capacity(hp.iterations + 1),
            max_psi_sq: 0.0,
            max_rho_sq: 0.0,
        };
        match algorithm {
            LabAlgorithm::FedRobust => run_fedrobust(&mut nodes, hp, &mut hooks)?,
            LabAlgorithm::FedAvg => run_fedavg(&mut nodes, hp, &mut hooks)?,
        };
        max_psi_sq = max_psi_sq.max(hooks.max_psi_sq);
        max_rho_sq = max_rho_sq.max(hooks.max_rho_sq);
        if sum.is_empty() {
            sum = hooks.records;
        } else {
            for (acc, r) in sum.iter_mut().zip(&hooks.records) {
                acc.a += r.a;
                acc.b += r.b;
                acc.p += r.p;
                acc.e += r.e;
                acc.g += r.g;
                acc.grad_phi_sq += r.grad_phi_sq;
            }
        }
    }
    let k = seeds.len() as f64;
    if seeds.len() > 1 {
        for r in &mut sum {
            r.a /= k;
            r.b /= k;
            r.p /= k;
            r.e /= k;
            r.g /= k;
            r.grad_phi_sq /= k;
        }
    }
    Ok(PotentialTrace {
        records: sum,
        max_psi_sq,
        max_rho_sq,
        n: game.game.n(),
        seeds: seeds.len(),
    })
}

fn noise_vars(hp: &HyperParams) -> (f64, f64) {
    hp.noise.map_or((0.0, 0.0), |n| {
        (n.sigma_w * n.sigma_w, n.sigma_psi * n.sigma_psi)
    })
}

/// `L̃ = (3/2)η₁L₁² + (1/2)η₂L₂₁²`
pub fn l_tilde(c: &GameConstants, hp: &HyperParams) -> f64 {
    1.5 * hp.eta1 * c.l1 * c.l1 + 0.5 * hp.eta2 * c.l21 * c.l21
}

/// `L̂ = (3/2)L_Φ + (1/2)L₁ + L₂₁²/L₂`
pub fn l_hat(c: &GameConstants) -> f64 {
    1.5 * c.l_phi + 0.5 * c.l1 + c.l21 * c.l21 / c.l2
}

/// `ρ² = 3ρ_f² + 6L₁₂²ε²`
pub fn rho_sq(c: &GameConstants, rho_f_sq: f64, eps_sq: f64) -> f64 {
    3.0 * rho_f_sq + 6.0 * c.l12 * c.l12 * eps_sq
}

fn violation(name: &str, lhs: f64, rhs: f64) -> Error {
    Error::InfeasibleStepSizes(format!("{name} (lhs {lhs:.6e}, rhs {rhs:.6e})"))
}

/// Step-size conditions of the PL-PL rate.
pub fn decay_feasibility(c: &GameConstants, hp: &HyperParams) -> Result<()> {
    let (e1, e2) = (hp.eta1, hp.eta2);
    let tm1 = hp.tau as f64 - 1.0;
    let n = c.n as f64;
    if e2 > 1.0 / c.l2 {
        return Err(violation("eta2 <= 1/L2", e2, 1.0 / c.l2));
    }
    let lhs = 32.0 * e1 * e1 * tm1 * tm1 * c.l1 * c.l1;
    if lhs > 1.0 {
        return Err(violation("32 eta1^2 (tau-1)^2 L1^2 <= 1", lhs, 1.0));
    }
    let lhs = c.mu2 * c.mu2 * e2 * n / (e1 * c.l1 * c.l2);
    let rhs = 1.0 + 8.0 * c.l12 * c.l12 / (c.l1 * c.l2);
    if !(lhs >= rhs) {
        return Err(violation(
            "mu2^2 eta2 n / (eta1 L1 L2) >= 1 + 8 L12^2 / (L1 L2)",
            lhs,
            rhs,
        ));
    }
    let contraction = (1.0 - 0.5 * c.mu1 * e1).powi(hp.tau as i32 - 1);
    let lhs = e1 * (l_hat(c) + 80.0 * l_tilde(c, hp) * tm1 / (c.mu1 * e1 * contraction));
    if !(lhs <= 1.0) {
        return Err(violation(
            "eta1 (L_hat + 80 L_tilde (tau-1) / (mu1 eta1 (1 - mu1 eta1 / 2)^(tau-1))) <= 1",
            lhs,
            1.0,
        ));
    }
    Ok(())
}

/// Step-size conditions of the nonconvex-PL rate.
pub fn stationarity_feasibility(c: &GameConstants, hp: &HyperParams) -> Result<()> {
    let (e1, e2) = (hp.eta1, hp.eta2);
    let tm1 = hp.tau as f64 - 1.0;
    let n = c.n as f64;
    if e2 > 1.0 / c.l2 {
        return Err(violation("eta2 <= 1/L2", e2, 1.0 / c.l2));
    }
    let rhs = c.mu2 * c.mu2 * n * n / (8.0 * c.l12 * c.l12);
    if !(e1 / e2 <= rhs) {
        return Err(violation(
            "eta1/eta2 <= mu2^2 n^2 / (8 L12^2)",
            e1 / e2,
            rhs,
        ));
    }
    let lhs = 32.0 * e1 * e1 * tm1 * tm1 * c.l1 * c.l1;
    if lhs > 1.0 {
        return Err(violation("32 eta1^2 (tau-1)^2 L1^2 <= 1", lhs, 1.0));
    }
    let lhs = e1 * (l_hat(c) + 40.0 * l_tilde(c, hp) * tm1 * tm1);
    if !(lhs <= 1.0) {
        return Err(violation(
            "eta1 (L_hat + 40 L_tilde (tau-1)^2) <= 1",
            lhs,
            1.0,
        ));
    }
    Ok(())
}

/// Largest `η₁` (to a relative 1e-6) passing `check` with `η₂` fixed.
pub fn max_feasible_eta1(
    c: &GameConstants,
    base: &HyperParams,
    check: fn(&GameConstants, &HyperParams) -> Result<()>,
) -> Option<f64> {
    let with = |e1: f64| HyperParams {
        eta1: e1,
        ..base.clone()
    };
    let mut lo = 0.0;
    let mut hi = 1.0 / c.l1.max(c.mu1).max(1e-12);
    if check(c, &with(hi)).is_ok() {
        return Some(hi);
    }
    let mut found = false;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if check(c, &with(mid)).is_ok() {
            lo = mid;
            found = true;
        } else {
            hi = mid;
        }
        if found && hi - lo <= 1e-6 * lo {
            break;
        }
    }
    found.then_some(lo)
}

/// Step pair maximizing `η₁` under `check`, scanning `η₂` on a log grid
/// below `1/L₂`.
pub fn best_feasible_steps(
    c: &GameConstants,
    base: &HyperParams,
    check: fn(&GameConstants, &HyperParams) -> Result<()>,
) -> Option<(f64, f64)> {
    let top = 1.0 / c.l2;
    (0..=120)
        .map(|k| top * 10f64.powf(-(k as f64) / 20.0))
        .filter_map(|e2| {
            let hp = HyperParams {
                eta2: e2,
                ..base.clone()
            };
            max_feasible_eta1(c, &hp, check).map(|e1| (e1, e2))
        })
        .max_by(|x, y| x.0.total_cmp(&y.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    pub holds: bool,
    /// Smallest `bound_t − P_t` over the trace.
    pub margin: f64,
    /// Iteration attaining the margin.
    pub worst_t: usize,
    /// The constant floor added to the geometric term.
    pub floor: f64,
    /// `1 − ½μ₁η₁`
    pub rate: f64,
    /// Bound at every recorded iteration.
    pub bound: Vec<f64>,
}

/// Relative slack allowed when comparing measured gaps to bounds.
pub const BOUND_REL_TOL: f64 = 1e-9;
/// Absolute slack covering rounding in squared gaps when a bound is exactly 0.
pub const BOUND_ABS_TOL: f64 = 1e-20;

/// Floor of the PL-PL rate for the measured heterogeneity and shift radius.
pub fn decay_floor(c: &GameConstants, hp: &HyperParams, rho_f_sq: f64, eps_sq: f64) -> f64 {
    let (sw, sp) = noise_vars(hp);
    let n = c.n as f64;
    let tm1 = hp.tau as f64 - 1.0;
    let lt = l_tilde(c, hp);
    let rho2 = rho_sq(c, rho_f_sq, eps_sq);
    32.0 * hp.eta1 * lt / c.mu1 * tm1 * tm1 * rho2
        + 8.0 * hp.eta1 * lt / c.mu1 * tm1 * (n + 1.0) * sw / n
        + hp.eta1 * l_hat(c) / c.mu1 * sw / n
        + hp.eta2 * hp.eta2 / hp.eta1 * c.l2 / (2.0 * c.mu1) * sp
}

/// Checks `Pₜ ≤ (1 − ½μ₁η₁)ᵗP₀ + F` at every recorded iteration.
pub fn check_decay_bound(
    trace: &PotentialTrace,
    c: &GameConstants,
    hp: &HyperParams,
) -> Result<DecayReport> {
    decay_feasibility(c, hp)?;
    let rho_f_sq = (c.rho_f * c.rho_f).max(trace.max_rho_sq);
    let floor = decay_floor(c, hp, rho_f_sq, trace.max_psi_sq);
    let rate = 1.0 - 0.5 * c.mu1 * hp.eta1;
    let p0 = trace.records.first().map_or(0.0, |r| r.p);
    let mut margin = f64::INFINITY;
    let mut worst_t = 0;
    let mut holds = true;
    let mut bound = Vec::with_capacity(trace.records.len());
    for r in &trace.records {
        let bt = rate.powi(r.t as i32) * p0 + floor;
        if r.p > bt * (1.0 + BOUND_REL_TOL) + BOUND_ABS_TOL {
            holds = false;
        }
        if bt - r.p < margin {
            margin = bt - r.p;
            worst_t = r.t;
        }
        bound.push(bt);
    }
    Ok(DecayReport {
        holds,
        margin,
        worst_t,
        floor,
        rate,
        bound,
    })
}

/// Right-hand side of the nonconvex-PL rate, term by term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationarityTerms {
    /// `4ΔΦ/(η₁T)`
    pub initial_gap: f64,
    /// `2b₀/(μ₂nη₁T)`: the shift-radius term with the realized initial
    /// inner gap in place of the ball radius.
    pub initial_inner_gap: f64,
    pub heterogeneity: f64,
    pub local_noise: f64,
    pub global_noise: f64,
    pub ascent_noise: f64,
}

impl StationarityTerms {
    pub fn total(&self) -> f64 {
        self.initial_gap
            + self.initial_inner_gap
            + self.heterogeneity
            + self.local_noise
            + self.global_noise
            + self.ascent_noise
    }
}

pub fn stationarity_terms(
    c: &GameConstants,
    hp: &HyperParams,
    iterations: usize,
    delta_phi: f64,
    b0: f64,
    rho_f_sq: f64,
    eps_sq: f64,
) -> StationarityTerms {
    let (sw, sp) = noise_vars(hp);
    let n = c.n as f64;
    let t = iterations as f64;
    let tm1 = hp.tau as f64 - 1.0;
    let lt = l_tilde(c, hp);
    StationarityTerms {
        initial_gap: 4.0 * delta_phi / (hp.eta1 * t),
        initial_inner_gap: 2.0 * b0 / (c.mu2 * n * hp.eta1 * t),
        heterogeneity: 64.0 * hp.eta1 * lt * tm1 * tm1 * rho_sq(c, rho_f_sq, eps_sq),
        local_noise: 16.0 * hp.eta1 * lt * tm1 * (n + 1.0) / n * sw,
        global_noise: 2.0 * hp.eta1 * l_hat(c) * sw / n,
        ascent_noise: hp.eta2 * hp.eta2 / hp.eta1 * c.l2 * sp,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationarityReport {
    /// `(1/T) Σ_{t<T} ‖∇Φ(w̄ₜ)‖²`
    pub lhs: f64,
    pub terms: StationarityTerms,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

/// Checks the averaged stationarity bound over the first `iterations` steps
/// of the trace.
pub fn check_stationarity_bound(
    trace: &PotentialTrace,
    c: &GameConstants,
    hp: &HyperParams,
    iterations: usize,
) -> Result<StationarityReport> {
    stationarity_feasibility(c, hp)?;
    if iterations == 0 || iterations > trace.iterations() {
        return Err(Error::InvalidArgument {
            name: "iterations",
            reason: format!("must be in 1..={}, got {iterations}", trace.iterations()),
        });
    }
    let lhs = trace.records[..iterations]
        .iter()
        .map(|r| r.grad_phi_sq)
        .sum::<f64>()
        / iterations as f64;
    let first = trace.records[0];
    let rho_f_sq = (c.rho_f * c.rho_f).max(trace.max_rho_sq);
    let terms = stationarity_terms(
        c,
        hp,
        iterations,
        first.a,
        first.b,
        rho_f_sq,
        trace.max_psi_sq,
    );
    let rhs = terms.total();
    Ok(StationarityReport {
        lhs,
        terms,
        rhs,
        slack: rhs - lhs,
        holds: lhs <= rhs * (1.0 + BOUND_REL_TOL) + BOUND_ABS_TOL,
    })
}
