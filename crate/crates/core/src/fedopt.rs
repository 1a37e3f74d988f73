//! Simulated federated network and its training algorithms.
//!
//! Every algorithm runs on the same engine: an iteration is one local update
//! per node (parallel over nodes), followed by a model average whenever
//! `(t + 1) % τ == 0`. Node updates draw randomness only from streams keyed by
//! `(seed, node id, iteration)` and averages are summed in node-id order, so a
//! run is a pure function of its inputs regardless of the thread count.

use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;

use crate::attacks::{fgm_attack, pgd_attack};
use crate::error::{Error, Result};
use crate::model::{evaluate, Batch, ModelParams};
use crate::numerics::{gaussian_sample, Matrix, Purpose, RngStream, Vector};
use crate::perturb::{AffineShift, ShiftBudget};

/// Parameter containers the engine can average and step.
pub trait ParamSpace: Clone + Send + Sync {
    /// `self += alpha * x`
    fn axpy(&mut self, alpha: f64, x: &Self);
    fn scale(&mut self, alpha: f64);
    fn zeros_like(&self) -> Self;
    fn norm_sq(&self) -> f64;
    fn same_shape(&self, other: &Self) -> bool;
    fn coord_count(&self) -> usize;
    fn is_finite(&self) -> bool;
    /// Adds i.i.d. `N(0, std²)` to every coordinate.
    fn add_gaussian(&mut self, stream: &RngStream, std: f64);
}

impl ParamSpace for Vector {
    fn axpy(&mut self, alpha: f64, x: &Self) {
        Vector::axpy(self, alpha, x)
    }
    fn scale(&mut self, alpha: f64) {
        Vector::scale(self, alpha)
    }
    fn zeros_like(&self) -> Self {
        Vector::zeros(self.len())
    }
    fn norm_sq(&self) -> f64 {
        Vector::norm_sq(self)
    }
    fn same_shape(&self, other: &Self) -> bool {
        self.len() == other.len()
    }
    fn coord_count(&self) -> usize {
        self.len()
    }
    fn is_finite(&self) -> bool {
        Vector::is_finite(self)
    }
    fn add_gaussian(&mut self, stream: &RngStream, std: f64) {
        let noise = gaussian_sample(stream, self.len(), 0.0, std);
        Vector::axpy(self, 1.0, &noise);
    }
}

impl ParamSpace for AffineShift {
    fn axpy(&mut self, alpha: f64, x: &Self) {
        AffineShift::axpy(self, alpha, x)
    }
    fn scale(&mut self, alpha: f64) {
        AffineShift::scale(self, alpha)
    }
    fn zeros_like(&self) -> Self {
        AffineShift::zeros(self.dim())
    }
    fn norm_sq(&self) -> f64 {
        AffineShift::norm_sq(self)
    }
    fn same_shape(&self, other: &Self) -> bool {
        self.dim() == other.dim()
    }
    fn coord_count(&self) -> usize {
        self.dim() * (self.dim() + 1)
    }
    fn is_finite(&self) -> bool {
        AffineShift::is_finite(self)
    }
    fn add_gaussian(&mut self, stream: &RngStream, std: f64) {
        let d = self.dim();
        let noise = gaussian_sample(stream, d * (d + 1), 0.0, std).into_vec();
        let lam = Matrix::new(d, d, noise[..d * d].to_vec()).expect("finite noise");
        self.lambda.axpy(1.0, &lam);
        self.delta
            .axpy(1.0, &Vector::from_vec(noise[d * d..].to_vec()));
    }
}

impl ParamSpace for ModelParams {
    fn axpy(&mut self, alpha: f64, x: &Self) {
        ModelParams::axpy(self, alpha, x)
    }
    fn scale(&mut self, alpha: f64) {
        ModelParams::scale(self, alpha)
    }
    fn zeros_like(&self) -> Self {
        ModelParams::zeros_like(self)
    }
    fn norm_sq(&self) -> f64 {
        ModelParams::norm_sq(self)
    }
    fn same_shape(&self, other: &Self) -> bool {
        self.same_topology(other)
    }
    fn coord_count(&self) -> usize {
        self.num_params()
    }
    fn is_finite(&self) -> bool {
        ModelParams::is_finite(self)
    }
    fn add_gaussian(&mut self, stream: &RngStream, std: f64) {
        let noise = gaussian_sample(stream, self.num_params(), 0.0, std).into_vec();
        let mut flat = self.to_flat();
        for (a, n) in flat.iter_mut().zip(noise) {
            *a += n;
        }
        self.set_flat(&flat).expect("same length");
    }
}

/// Penalized local objective value and gradients at one point.
#[derive(Debug, Clone)]
pub struct Evaluation<W, P> {
    pub loss: f64,
    pub data_loss: f64,
    pub penalty: f64,
    pub grad_w: W,
    pub grad_psi: P,
}

/// A node's local minimax objective `f^i(w, ψ)`.
pub trait LocalObjective: Send + Sync {
    type W: ParamSpace;
    type Psi: ParamSpace;

    /// Number of local samples minibatches are drawn from.
    fn sample_count(&self) -> usize;

    /// Value and gradients on `rows` (everything when `None`). `grad_w` may be
    /// left at zero when `want_w` is false.
    fn evaluate(
        &self,
        w: &Self::W,
        psi: &Self::Psi,
        rows: Option<&[usize]>,
        lam: f64,
        want_w: bool,
    ) -> Result<Evaluation<Self::W, Self::Psi>>;
}

impl LocalObjective for Batch {
    type W = ModelParams;
    type Psi = AffineShift;

    fn sample_count(&self) -> usize {
        self.len()
    }

    fn evaluate(
        &self,
        w: &ModelParams,
        psi: &AffineShift,
        rows: Option<&[usize]>,
        lam: f64,
        want_w: bool,
    ) -> Result<Evaluation<ModelParams, AffineShift>> {
        let r = evaluate(w, psi, self, rows, lam, want_w)?;
        Ok(Evaluation {
            loss: r.loss,
            data_loss: r.data_loss,
            penalty: r.penalty,
            grad_w: r.grad_w,
            grad_psi: r.grad_shift,
        })
    }
}

/// One simulated device.
#[derive(Debug, Clone)]
pub struct NodeState<O: LocalObjective = Batch> {
    pub id: usize,
    pub data: O,
    pub w_local: O::W,
    pub shift: O::Psi,
    pub stream: RngStream,
}

impl NodeState<Batch> {
    /// Node holding `data`, starting from `model` and the identity shift.
    pub fn new(id: usize, data: Batch, model: ModelParams, seed: u64) -> Result<Self> {
        if data.dim() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim(),
                got: data.dim(),
            });
        }
        let d = data.dim();
        Ok(Self {
            id,
            data,
            w_local: model,
            shift: AffineShift::identity(d),
            stream: RngStream::new(seed, id as u64),
        })
    }
}

/// Nodes over `datasets` sharing the initial `model`.
pub fn make_nodes(
    datasets: Vec<Batch>,
    model: &ModelParams,
    seed: u64,
) -> Result<Vec<NodeState<Batch>>> {
    datasets
        .into_iter()
        .enumerate()
        .map(|(i, d)| NodeState::new(i, d, model.clone(), seed))
        .collect()
}

/// Synthetic additive gradient noise; `sigma_*` is the root of the expected
/// squared norm of the noise vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradNoise {
    pub sigma_w: f64,
    pub sigma_psi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Descent step.
    pub eta1: f64,
    /// Ascent step.
    pub eta2: f64,
    /// Local steps per synchronization round.
    pub tau: usize,
    /// Total iterations.
    pub iterations: usize,
    /// Shift penalty weight.
    pub lam: f64,
    pub budget: ShiftBudget,
    pub batch_size: usize,
    /// Ascent steps per descent step.
    pub ascent_reps: usize,
    pub noise: Option<GradNoise>,
}

pub const DEFAULT_ASCENT_REPS: usize = 2;
pub const DEFAULT_PGD_STEPS: usize = 10;
pub const BASELINE_EPS_FRACTION: f64 = 0.05;

impl HyperParams {
    pub fn validate(&self, sample_count: usize) -> Result<()> {
        let positive = [("eta1", self.eta1), ("lam", self.lam)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument {
                    name,
                    reason: format!("must be positive, got {v}"),
                });
            }
        }
        if !(self.eta2 >= 0.0 && self.eta2.is_finite()) {
            return Err(Error::InvalidArgument {
                name: "eta2",
                reason: format!("must be nonnegative, got {}", self.eta2),
            });
        }
        if self.tau == 0 {
            return Err(Error::InvalidArgument {
                name: "tau",
                reason: "must be at least 1".into(),
            });
        }
        if self.ascent_reps == 0 {
            return Err(Error::InvalidArgument {
                name: "ascent_reps",
                reason: "must be at least 1".into(),
            });
        }
        if self.batch_size == 0 || self.batch_size > sample_count {
            return Err(Error::InvalidArgument {
                name: "batch_size",
                reason: format!("must be in 1..={sample_count}, got {}", self.batch_size),
            });
        }
        Ok(())
    }
}

/// One row of training metrics, averaged over nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct IterMetrics {
    pub iter: usize,
    pub round: usize,
    /// Mean unpenalized minibatch loss.
    pub train_loss: f64,
    /// Mean shift penalty.
    pub penalty: f64,
    /// Mean penalized objective `loss − penalty`.
    pub robust_loss: f64,
    /// Norm of the node-averaged descent gradient.
    pub grad_w_norm: f64,
    /// Root mean square of the per-node shift gradient norms.
    pub grad_psi_norm: f64,
    /// Filled at synchronization iterations when a hook supplies it.
    pub clean_test_acc: Option<f64>,
    pub synced: bool,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport<W, P> {
    /// Average of the final local models.
    pub final_avg_model: W,
    pub rows: Vec<IterMetrics>,
    /// Final shift of each node, in node-id order.
    pub final_shifts: Vec<P>,
    pub sync_events: usize,
    /// Gradient evaluations summed over nodes and iterations. A joint
    /// evaluation counts once per variable it differentiates.
    pub grad_evals: usize,
}

impl<W, P> TrainReport<W, P> {
    /// Gradient evaluations per node per iteration.
    pub fn grad_evals_per_node_iter(&self, nodes: usize) -> f64 {
        self.grad_evals as f64 / (nodes * self.rows.len()).max(1) as f64
    }
}

/// Callbacks into a running training loop.
pub trait TrainHooks<O: LocalObjective> {
    /// Node states at the start of iteration `t`; called once more with
    /// `t = T` after the last iteration.
    fn observe(&mut self, _t: usize, _nodes: &[NodeState<O>]) -> Result<()> {
        Ok(())
    }

    /// The freshly averaged model after the synchronization at iteration `t`.
    /// A returned value is recorded as that row's test accuracy.
    fn on_sync(&mut self, _t: usize, _global: &O::W) -> Result<Option<f64>> {
        Ok(None)
    }

    /// Every completed metrics row, in order.
    fn on_row(&mut self, _row: &IterMetrics) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl<O: LocalObjective> TrainHooks<O> for NoHooks {}

/// What one node's update reports back to the engine.
#[derive(Debug, Clone)]
pub struct StepOutcome<W> {
    pub data_loss: f64,
    pub penalty: f64,
    pub loss: f64,
    pub grad_w: W,
    pub grad_psi_norm_sq: f64,
    pub grad_evals: usize,
}

fn minibatch(stream: &RngStream, t: usize, m: usize, b: usize) -> Option<Vec<usize>> {
    if b >= m {
        return None;
    }
    let mut rng =
        RngStream::derive(stream.seed, Purpose::Minibatch, stream.stream_id, t as u64).rng();
    Some(index::sample(&mut rng, m, b).into_vec())
}

fn noise_stream(stream: &RngStream, purpose: Purpose, t: usize, rep: usize) -> RngStream {
    RngStream::derive(
        stream.seed,
        purpose,
        stream.stream_id,
        ((t as u64) << 16) | rep as u64,
    )
}

fn add_noise<P: ParamSpace>(g: &mut P, sigma: f64, stream: RngStream) {
    if sigma > 0.0 {
        let std = sigma / (g.coord_count() as f64).sqrt();
        g.add_gaussian(&stream, std);
    }
}

/// One FedRobust local iteration: simultaneous descent on `w` and ascent on
/// the shift, both from gradients at the iteration-start point. Extra ascent
/// repetitions reuse the minibatch and the original `w`.
pub fn local_step<O: LocalObjective>(
    node: &mut NodeState<O>,
    t: usize,
    hp: &HyperParams,
) -> Result<StepOutcome<O::W>> {
    let rows = minibatch(&node.stream, t, node.data.sample_count(), hp.batch_size);
    let rows = rows.as_deref();
    let ev = node
        .data
        .evaluate(&node.w_local, &node.shift, rows, hp.lam, true)?;
    let (sigma_w, sigma_psi) = hp.noise.map_or((0.0, 0.0), |n| (n.sigma_w, n.sigma_psi));

    let mut grad_w = ev.grad_w.clone();
    add_noise(
        &mut grad_w,
        sigma_w,
        noise_stream(&node.stream, Purpose::NoiseW, t, 0),
    );

    let mut g_psi = ev.grad_psi.clone();
    add_noise(
        &mut g_psi,
        sigma_psi,
        noise_stream(&node.stream, Purpose::NoisePsi, t, 0),
    );
    let mut shift = node.shift.clone();
    shift.axpy(hp.eta2, &g_psi);
    for rep in 1..hp.ascent_reps {
        let mut g = node
            .data
            .evaluate(&node.w_local, &shift, rows, hp.lam, false)?
            .grad_psi;
        add_noise(
            &mut g,
            sigma_psi,
            noise_stream(&node.stream, Purpose::NoisePsi, t, rep),
        );
        shift.axpy(hp.eta2, &g);
    }
    node.shift = shift;
    node.w_local.axpy(-hp.eta1, &grad_w);
    Ok(StepOutcome {
        data_loss: ev.data_loss,
        penalty: ev.penalty,
        loss: ev.loss,
        grad_psi_norm_sq: ev.grad_psi.norm_sq(),
        grad_w: ev.grad_w,
        grad_evals: 1 + hp.ascent_reps,
    })
}

/// Local SGD step with the shift held fixed.
fn descent_step<O: LocalObjective>(
    node: &mut NodeState<O>,
    t: usize,
    hp: &HyperParams,
) -> Result<StepOutcome<O::W>> {
    let rows = minibatch(&node.stream, t, node.data.sample_count(), hp.batch_size);
    let ev = node
        .data
        .evaluate(&node.w_local, &node.shift, rows.as_deref(), hp.lam, true)?;
    let mut grad_w = ev.grad_w.clone();
    let sigma_w = hp.noise.map_or(0.0, |n| n.sigma_w);
    add_noise(
        &mut grad_w,
        sigma_w,
        noise_stream(&node.stream, Purpose::NoiseW, t, 0),
    );
    node.w_local.axpy(-hp.eta1, &grad_w);
    Ok(StepOutcome {
        data_loss: ev.data_loss,
        penalty: ev.penalty,
        loss: ev.loss,
        grad_psi_norm_sq: ev.grad_psi.norm_sq(),
        grad_w: ev.grad_w,
        grad_evals: 1,
    })
}

fn id_order<O: LocalObjective>(nodes: &[NodeState<O>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by_key(|&i| nodes[i].id);
    order
}

/// Coordinatewise mean of the local models, summed in node-id order.
pub fn server_average<O: LocalObjective>(nodes: &[NodeState<O>]) -> Result<O::W> {
    let first = nodes.first().ok_or(Error::InvalidArgument {
        name: "nodes",
        reason: "no nodes".into(),
    })?;
    let mut acc = first.w_local.zeros_like();
    for i in id_order(nodes) {
        let w = &nodes[i].w_local;
        if !w.same_shape(&first.w_local) {
            return Err(Error::TopologyMismatch);
        }
        acc.axpy(1.0, w);
    }
    acc.scale(1.0 / nodes.len() as f64);
    Ok(acc)
}

fn check_nodes<O: LocalObjective>(nodes: &[NodeState<O>], hp: &HyperParams) -> Result<()> {
    let first = nodes.first().ok_or(Error::InvalidArgument {
        name: "nodes",
        reason: "no nodes".into(),
    })?;
    for n in nodes {
        if !n.w_local.same_shape(&first.w_local) {
            return Err(Error::TopologyMismatch);
        }
        if !n.shift.same_shape(&first.shift) {
            return Err(Error::DimensionMismatch {
                expected: first.shift.coord_count(),
                got: n.shift.coord_count(),
            });
        }
        hp.validate(n.data.sample_count())?;
    }
    Ok(())
}

fn run_engine<O, F>(
    nodes: &mut [NodeState<O>],
    hp: &HyperParams,
    hooks: &mut dyn TrainHooks<O>,
    step: F,
) -> Result<TrainReport<O::W, O::Psi>>
where
    O: LocalObjective,
    F: Fn(&mut NodeState<O>, usize) -> Result<StepOutcome<O::W>> + Sync,
{
    check_nodes(nodes, hp)?;
    let n = nodes.len();
    let inv_n = 1.0 / n as f64;
    let mut rows = Vec::with_capacity(hp.iterations);
    let mut sync_events = 0;
    let mut grad_evals = 0;
    for t in 0..hp.iterations {
        hooks.observe(t, nodes)?;
        let start = Instant::now();
        let outcomes: Vec<StepOutcome<O::W>> = nodes
            .par_iter_mut()
            .map(|node| step(node, t))
            .collect::<Result<_>>()
            .map_err(|e| at_iteration(e, t))?;

        let order = id_order(nodes);
        let mut grad_sum = outcomes[0].grad_w.zeros_like();
        let (mut data_loss, mut pen, mut loss, mut psi_sq) = (0.0, 0.0, 0.0, 0.0);
        for &i in &order {
            let o = &outcomes[i];
            data_loss += o.data_loss;
            pen += o.penalty;
            loss += o.loss;
            psi_sq += o.grad_psi_norm_sq;
            grad_sum.axpy(1.0, &o.grad_w);
            grad_evals += o.grad_evals;
        }
        grad_sum.scale(inv_n);

        let synced = (t + 1) % hp.tau == 0;
        let mut acc = None;
        if synced {
            let avg = server_average(nodes)?;
            for node in nodes.iter_mut() {
                node.w_local = avg.clone();
            }
            sync_events += 1;
            acc = hooks.on_sync(t, &avg)?;
        }
        if nodes
            .iter()
            .any(|nd| !nd.w_local.is_finite() || !nd.shift.is_finite())
        {
            return Err(Error::NonFinite { iteration: Some(t) });
        }
        let row = IterMetrics {
            iter: t,
            round: t / hp.tau,
            train_loss: data_loss * inv_n,
            penalty: pen * inv_n,
            robust_loss: loss * inv_n,
            grad_w_norm: grad_sum.norm_sq().sqrt(),
            grad_psi_norm: (psi_sq * inv_n).sqrt(),
            clean_test_acc: acc,
            synced,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        hooks.on_row(&row)?;
        rows.push(row);
    }
    hooks.observe(hp.iterations, nodes)?;
    let order = id_order(nodes);
    Ok(TrainReport {
        final_avg_model: server_average(nodes)?,
        rows,
        final_shifts: order.iter().map(|&i| nodes[i].shift.clone()).collect(),
        sync_events,
        grad_evals,
    })
}

fn at_iteration(e: Error, t: usize) -> Error {
    match e {
        Error::NonFinite { iteration: None } => Error::NonFinite { iteration: Some(t) },
        other => other,
    }
}

/// FedRobust: local descent-ascent with model averaging every `τ` steps.
pub fn run_fedrobust<O: LocalObjective>(
    nodes: &mut [NodeState<O>],
    hp: &HyperParams,
    hooks: &mut dyn TrainHooks<O>,
) -> Result<TrainReport<O::W, O::Psi>> {
    run_engine(nodes, hp, hooks, |node, t| local_step(node, t, hp))
}

/// FedAvg: local SGD with periodic averaging; shifts stay at their initial
/// value (the identity for freshly built nodes).
pub fn run_fedavg<O: LocalObjective>(
    nodes: &mut [NodeState<O>],
    hp: &HyperParams,
    hooks: &mut dyn TrainHooks<O>,
) -> Result<TrainReport<O::W, O::Psi>> {
    run_engine(nodes, hp, hooks, |node, t| descent_step(node, t, hp))
}

/// Per-sample ℓ2 attack used by the adversarial-training baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleAttack {
    pub eps: f64,
    /// 0 selects the one-step fast gradient method.
    pub pgd_steps: usize,
}

impl SampleAttack {
    /// PGD step length relative to the radius.
    pub const PGD_STEP_FACTOR: f64 = 2.5;

    fn input_grad_evals(&self) -> usize {
        self.pgd_steps.max(1)
    }
}

fn adversarial_step(
    node: &mut NodeState<Batch>,
    t: usize,
    hp: &HyperParams,
    attack: SampleAttack,
) -> Result<StepOutcome<ModelParams>> {
    let rows = minibatch(&node.stream, t, node.data.len(), hp.batch_size)
        .unwrap_or_else(|| (0..node.data.len()).collect());
    let mut perturbed = node.data.select(&rows);
    if attack.eps > 0.0 {
        for j in 0..perturbed.len() {
            let x = perturbed.sample(j);
            let y = perturbed.labels.target(j);
            let adv = if attack.pgd_steps == 0 {
                fgm_attack(&node.w_local, &x, y, attack.eps)?
            } else {
                let step = SampleAttack::PGD_STEP_FACTOR * attack.eps / attack.pgd_steps as f64;
                pgd_attack(&node.w_local, &x, y, attack.eps, attack.pgd_steps, step)?
            };
            perturbed
                .features
                .row_mut(j)
                .copy_from_slice(adv.as_slice());
        }
    }
    let ev = perturbed.evaluate(&node.w_local, &node.shift, None, hp.lam, true)?;
    node.w_local.axpy(-hp.eta1, &ev.grad_w);
    Ok(StepOutcome {
        data_loss: ev.data_loss,
        penalty: ev.penalty,
        loss: ev.loss,
        grad_psi_norm_sq: ev.grad_psi.norm_sq(),
        grad_w: ev.grad_w,
        grad_evals: 1 + attack.input_grad_evals(),
    })
}

/// Distributed fast-gradient-method adversarial training.
pub fn run_dist_fgm(
    nodes: &mut [NodeState<Batch>],
    hp: &HyperParams,
    eps: f64,
    hooks: &mut dyn TrainHooks<Batch>,
) -> Result<TrainReport<ModelParams, AffineShift>> {
    check_eps(eps)?;
    let attack = SampleAttack { eps, pgd_steps: 0 };
    run_engine(nodes, hp, hooks, |node, t| {
        adversarial_step(node, t, hp, attack)
    })
}

/// Distributed PGD adversarial training.
pub fn run_dist_pgd(
    nodes: &mut [NodeState<Batch>],
    hp: &HyperParams,
    eps: f64,
    pgd_steps: usize,
    hooks: &mut dyn TrainHooks<Batch>,
) -> Result<TrainReport<ModelParams, AffineShift>> {
    check_eps(eps)?;
    if pgd_steps == 0 {
        return Err(Error::InvalidArgument {
            name: "pgd_steps",
            reason: "must be at least 1".into(),
        });
    }
    let attack = SampleAttack { eps, pgd_steps };
    run_engine(nodes, hp, hooks, |node, t| {
        adversarial_step(node, t, hp, attack)
    })
}

fn check_eps(eps: f64) -> Result<()> {
    if eps >= 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument {
            name: "eps",
            reason: format!("must be nonnegative, got {eps}"),
        })
    }
}

/// Default baseline radius: a fixed fraction of the mean sample norm.
pub fn baseline_eps(datasets: &[Batch]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for b in datasets {
        for j in 0..b.len() {
            sum += b.features.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        BASELINE_EPS_FRACTION * sum / count as f64
    }
}

/// Single-machine simultaneous SGDA on one objective, written without the
/// federated engine. With `n = 1` and `τ = 1` the federated run must
/// reproduce it exactly.
pub fn run_centralized_sgda<O: LocalObjective>(
    data: &O,
    w0: O::W,
    psi0: O::Psi,
    stream: RngStream,
    hp: &HyperParams,
    hooks: &mut dyn FnMut(usize, &O::W) -> Result<Option<f64>>,
) -> Result<(O::W, O::Psi, Vec<IterMetrics>)> {
    hp.validate(data.sample_count())?;
    let (mut w, mut psi) = (w0, psi0);
    let (sigma_w, sigma_psi) = hp.noise.map_or((0.0, 0.0), |n| (n.sigma_w, n.sigma_psi));
    let mut rows = Vec::with_capacity(hp.iterations);
    for t in 0..hp.iterations {
        let start = Instant::now();
        let batch = minibatch(&stream, t, data.sample_count(), hp.batch_size);
        let ev = data.evaluate(&w, &psi, batch.as_deref(), hp.lam, true)?;
        let mut gw = ev.grad_w.clone();
        add_noise(
            &mut gw,
            sigma_w,
            noise_stream(&stream, Purpose::NoiseW, t, 0),
        );
        let w_next = {
            let mut x = w.clone();
            x.axpy(-hp.eta1, &gw);
            x
        };
        for rep in 0..hp.ascent_reps {
            let mut g = if rep == 0 {
                ev.grad_psi.clone()
            } else {
                data.evaluate(&w, &psi, batch.as_deref(), hp.lam, false)?
                    .grad_psi
            };
            add_noise(
                &mut g,
                sigma_psi,
                noise_stream(&stream, Purpose::NoisePsi, t, rep),
            );
            psi.axpy(hp.eta2, &g);
        }
        w = w_next;
        if !w.is_finite() || !psi.is_finite() {
            return Err(Error::NonFinite { iteration: Some(t) });
        }
        let acc = hooks(t, &w)?;
        rows.push(IterMetrics {
            iter: t,
            round: t,
            train_loss: ev.data_loss,
            penalty: ev.penalty,
            robust_loss: ev.loss,
            grad_w_norm: ev.grad_w.norm_sq().sqrt(),
            grad_psi_norm: ev.grad_psi.norm_sq().sqrt(),
            clean_test_acc: acc,
            synced: true,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok((w, psi, rows))
}
