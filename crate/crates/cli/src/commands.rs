use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use fedrobust::attacks::{affine_attack, robust_accuracy, AttackSpec};
use fedrobust::data::{
    normalize, parse_idx, partition_with_shifts, synth_gaussian_mixture, Partition,
};
use fedrobust::diagnostics::{heterogeneity, margin_risk, spectral_complexity, SpectralComplexity};
use fedrobust::fedopt::{
    baseline_eps, make_nodes, run_dist_fgm, run_dist_pgd, run_fedavg, run_fedrobust, HyperParams,
    IterMetrics, NodeState, TrainHooks, TrainReport,
};
use fedrobust::lab::{
    best_feasible_steps, check_decay_bound, check_stationarity_bound, constants, decay_feasibility,
    max_feasible_eta1, stationarity_feasibility, stationarity_terms, trace_run, GameConstants,
    LabAlgorithm, LabStart, PotentialTrace, QuadraticGame,
};
use fedrobust::model::{Batch, ModelParams};
use fedrobust::numerics::{gaussian_matrix, Purpose, RngStream, Vector};
use fedrobust::perturb::{sample_node_shift, AffineShift, ShiftBudget};
use fedrobust::transport::{check_transport_bound, EmpiricalDist, TransportBoundReport};

use crate::checkpoint::{checkpoint_read, checkpoint_write};
use crate::config::{Algorithm, DataSource, LabCheck, RunConfig, LAMBDA_GRID};
use crate::error::{CliError, CliResult};
use crate::metrics::{fmt_f64, CsvSink, EVAL_HEADER, LAB_HEADER, METRICS_HEADER};

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Directory receiving every output file.
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.output.seed = seed;
        }
        if let Some(dir) = &self.out {
            let o = &mut cfg.output;
            for p in [
                &mut o.metrics_path,
                &mut o.checkpoint_path,
                &mut o.eval_path,
                &mut o.lab_path,
            ] {
                let name = p.file_name().map(PathBuf::from).unwrap_or_default();
                *p = dir.join(name);
            }
        }
    }
}

/// Runs `f` on a dedicated pool of `threads` workers (the global pool when
/// `None`).
pub fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(CliError::config("threads", "must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::config("threads", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Node datasets and held-out splits for a config.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub partition: Partition,
    pub classes: usize,
    pub dim: usize,
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn prepare_data(cfg: &RunConfig) -> CliResult<PreparedData> {
    let d = &cfg.data;
    let seed = cfg.output.seed;
    let raw = match d.source {
        DataSource::Synthetic => {
            let n = d.nodes * d.per_node + d.validation + d.test;
            synth_gaussian_mixture(d.classes, d.dim, n, d.separation, seed)?
        }
        DataSource::Idx => {
            let images = read(d.images.as_deref().expect("validated"))?;
            let labels = read(d.labels.as_deref().expect("validated"))?;
            let raw = parse_idx(&images, &labels)?;
            if d.normalize {
                normalize(&raw)?
            } else {
                raw
            }
        }
    };
    let classes = match d.source {
        DataSource::Synthetic => d.classes,
        DataSource::Idx => raw.labels.iter().max().map_or(2, |&m| (m + 1).max(2)),
    };
    let dim = raw.dim();
    let partition = partition_with_shifts(&raw, d.sizes(), d.sigma, seed)?;
    Ok(PreparedData {
        partition,
        classes,
        dim,
    })
}

type FileSink = CsvSink<BufWriter<File>>;

struct RunHooks<'a> {
    sink: Option<&'a mut FileSink>,
    test: &'a Batch,
    failure: Option<CliError>,
}

impl TrainHooks<Batch> for RunHooks<'_> {
    fn on_sync(&mut self, _t: usize, global: &ModelParams) -> fedrobust::Result<Option<f64>> {
        robust_accuracy(global, self.test, &AttackSpec::none()).map(Some)
    }

    fn on_row(&mut self, row: &IterMetrics) -> fedrobust::Result<()> {
        if let Some(sink) = self.sink.as_mut() {
            if let Err(e) = sink.write_metrics(row) {
                self.failure = Some(e);
                return Err(fedrobust::Error::InvalidArgument {
                    name: "metrics",
                    reason: "write failed".into(),
                });
            }
        }
        Ok(())
    }
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub shifts: Vec<AffineShift>,
    pub rows: Vec<IterMetrics>,
    pub lam: f64,
    pub grad_evals_per_node_iter: f64,
}

/// Trains on prepared data, streaming rows to `sink` when given.
pub fn train_on(
    cfg: &RunConfig,
    data: &PreparedData,
    sink: Option<&mut FileSink>,
) -> CliResult<TrainOutcome> {
    let seed = cfg.output.seed;
    let dims = cfg.dims(data.dim, data.classes);
    let model = ModelParams::init(&dims, cfg.model.activation.into(), cfg.head(), seed)?;
    let mut nodes = make_nodes(data.partition.nodes.clone(), &model, seed)?;
    let hp = cfg.hyper_params();
    let mut hooks = RunHooks {
        sink,
        test: &data.partition.test,
        failure: None,
    };
    let eps = || {
        cfg.train
            .baseline_eps
            .unwrap_or_else(|| baseline_eps(&data.partition.nodes))
    };
    let result: fedrobust::Result<TrainReport<ModelParams, AffineShift>> = match cfg.algorithm {
        Algorithm::Fedrobust => run_fedrobust(&mut nodes, &hp, &mut hooks),
        Algorithm::Fedavg => run_fedavg(&mut nodes, &hp, &mut hooks),
        Algorithm::DistFgm => run_dist_fgm(&mut nodes, &hp, eps(), &mut hooks),
        Algorithm::DistPgd => run_dist_pgd(&mut nodes, &hp, eps(), cfg.train.pgd_steps, &mut hooks),
    };
    if let Some(e) = hooks.failure.take() {
        return Err(e);
    }
    let report = result?;
    Ok(TrainOutcome {
        grad_evals_per_node_iter: report.grad_evals_per_node_iter(nodes.len()),
        model: report.final_avg_model,
        shifts: report.final_shifts,
        rows: report.rows,
        lam: hp.lam,
    })
}

/// Penalty weight chosen by the validation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaChoice {
    pub lam: f64,
    /// `(λ, mean ‖Λ − I‖²_F + ‖δ‖²)` per candidate.
    pub penalties: Vec<(f64, f64)>,
    /// One tenth of the mean squared validation sample norm.
    pub target: f64,
}

/// Trains FedRobust once per grid value and keeps the `λ` whose learned
/// shifts have mean squared size closest to a tenth of the mean squared
/// validation sample norm.
pub fn select_lambda(cfg: &RunConfig, data: &PreparedData) -> CliResult<LambdaChoice> {
    let val = if data.partition.validation.is_empty() {
        &data.partition.test
    } else {
        &data.partition.validation
    };
    let target =
        0.1 * (0..val.len()).map(|j| val.sample(j).norm_sq()).sum::<f64>() / val.len() as f64;
    let mut penalties = Vec::with_capacity(LAMBDA_GRID.len());
    for lam in LAMBDA_GRID {
        let mut trial = cfg.clone();
        trial.algorithm = Algorithm::Fedrobust;
        trial.train.lam = lam;
        let out = train_on(&trial, data, None)?;
        let pen = out
            .shifts
            .iter()
            .map(AffineShift::deviation_sq)
            .sum::<f64>()
            / out.shifts.len() as f64;
        penalties.push((lam, pen));
    }
    let lam = penalties
        .iter()
        .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
        .map(|&(l, _)| l)
        .expect("grid is not empty");
    Ok(LambdaChoice {
        lam,
        penalties,
        target,
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub lambda: Option<LambdaChoice>,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig, lambda_grid: bool) -> CliResult<TrainSummary> {
    let data = prepare_data(cfg)?;
    let mut cfg = cfg.clone();
    let lambda = if lambda_grid {
        let choice = select_lambda(&cfg, &data)?;
        cfg.train.lam = choice.lam;
        Some(choice)
    } else {
        None
    };
    let mut sink = CsvSink::create(&cfg.output.metrics_path, &METRICS_HEADER)?;
    let outcome = train_on(&cfg, &data, Some(&mut sink))?;
    sink.flush()?;
    checkpoint_write(&outcome.model, &cfg.output.checkpoint_path)?;
    let test = &data.partition.test;
    let clean_acc = robust_accuracy(&outcome.model, test, &AttackSpec::none())?;
    let robust_acc = robust_accuracy(&outcome.model, test, &cfg.attack.spec())?;
    Ok(TrainSummary {
        outcome,
        lambda,
        clean_acc,
        robust_acc,
        metrics_path: cfg.output.metrics_path.clone(),
        checkpoint_path: cfg.output.checkpoint_path.clone(),
    })
}

fn check_input_dim(model: &ModelParams, data: &PreparedData) -> CliResult<()> {
    if model.input_dim() != data.dim {
        return Err(CliError::config(
            "data",
            format!(
                "checkpoint expects {} inputs, data has {}",
                model.input_dim(),
                data.dim
            ),
        ));
    }
    Ok(())
}

/// Accuracy at each budget point of the configured sweep, written to the
/// eval CSV.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> CliResult<Vec<(f64, f64)>> {
    let model = checkpoint_read(checkpoint)?;
    let data = prepare_data(cfg)?;
    check_input_dim(&model, &data)?;
    let mut sink = CsvSink::create(&cfg.output.eval_path, &EVAL_HEADER)?;
    let mut table = Vec::with_capacity(cfg.attack.sweep.len());
    for &b in &cfg.attack.sweep {
        let acc = robust_accuracy(&model, &data.partition.test, &cfg.attack.spec_at(b))?;
        sink.write(&[fmt_f64(b), fmt_f64(acc)])?;
        table.push((b, acc));
    }
    sink.flush()?;
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct LabOutcome {
    pub constants: GameConstants,
    pub hp: HyperParams,
    pub trace: PotentialTrace,
    /// Bound at every recorded iteration (`NaN` where undefined).
    pub bound: Vec<f64>,
    pub holds: bool,
    pub margin: f64,
}

fn lab_steps(cfg: &RunConfig, c: &GameConstants, base: &HyperParams) -> CliResult<(f64, f64)> {
    let l = &cfg.lab;
    let check = match l.check {
        LabCheck::Decay => decay_feasibility,
        LabCheck::Stationarity => stationarity_feasibility,
    };
    let (eta1, eta2) = match (l.eta1, l.eta2) {
        (Some(a), Some(b)) => (a, b),
        (Some(a), None) => (a, 1.0 / c.l2),
        (None, Some(b)) => {
            let hp = HyperParams {
                eta2: b,
                ..base.clone()
            };
            (max_feasible_eta1(c, &hp, check).unwrap_or(0.0), b)
        }
        (None, None) => best_feasible_steps(c, base, check).ok_or_else(|| {
            fedrobust::Error::InfeasibleStepSizes("no feasible step pair found".into())
        })?,
    };
    check(
        c,
        &HyperParams {
            eta1,
            eta2,
            ..base.clone()
        },
    )?;
    Ok((eta1, eta2))
}

pub fn cmd_lab(cfg: &RunConfig) -> CliResult<LabOutcome> {
    let l = &cfg.lab;
    let game = QuadraticGame::random(&l.game_spec(), l.game_seed)?;
    let c = constants(&game)?;
    let base = HyperParams {
        eta1: 0.0,
        eta2: 0.0,
        tau: l.tau,
        iterations: l.iterations,
        lam: 1.0,
        budget: ShiftBudget {
            eps1: f64::INFINITY,
            eps2: f64::INFINITY,
        },
        batch_size: 1,
        ascent_reps: 1,
        noise: l.noise(),
    };
    let (eta1, eta2) = lab_steps(cfg, &c, &base)?;
    let hp = HyperParams { eta1, eta2, ..base };
    let prepared = game.prepare()?;
    let seed = cfg.output.seed;
    let seeds: Vec<u64> = if hp.noise.is_some() {
        (seed..seed + l.seeds as u64).collect()
    } else {
        vec![seed]
    };
    let start = LabStart::random(&game, l.start_scale, seed);
    let trace = trace_run(&prepared, &hp, LabAlgorithm::FedRobust, &start, &seeds)?;
    let (bound, holds, margin) = match l.check {
        LabCheck::Decay => {
            let r = check_decay_bound(&trace, &c, &hp)?;
            (r.bound, r.holds, r.margin)
        }
        LabCheck::Stationarity => {
            let iterations = trace.iterations().max(1);
            if trace.iterations() == 0 {
                return Err(CliError::config("lab.iterations", "must be at least 1"));
            }
            let r = check_stationarity_bound(&trace, &c, &hp, iterations)?;
            let first = trace.records[0];
            let rho = (c.rho_f * c.rho_f).max(trace.max_rho_sq);
            let bound = (0..trace.records.len())
                .map(|t| {
                    if t == 0 {
                        f64::NAN
                    } else {
                        stationarity_terms(&c, &hp, t, first.a, first.b, rho, trace.max_psi_sq)
                            .total()
                    }
                })
                .collect();
            (bound, r.holds, r.slack)
        }
    };
    let mut sink = CsvSink::create(&cfg.output.lab_path, &LAB_HEADER)?;
    for (r, b) in trace.records.iter().zip(&bound) {
        let rhs = if b.is_nan() {
            String::new()
        } else {
            fmt_f64(*b)
        };
        sink.write(&[
            r.t.to_string(),
            fmt_f64(r.a),
            fmt_f64(r.b),
            fmt_f64(r.p),
            fmt_f64(r.e),
            fmt_f64(r.g),
            fmt_f64(r.grad_phi_sq),
            rhs,
        ])?;
    }
    sink.flush()?;
    Ok(LabOutcome {
        constants: c,
        hp,
        trace,
        bound,
        holds,
        margin,
    })
}

#[derive(Debug, Clone)]
pub struct TransportOutcome {
    pub reports: Vec<TransportBoundReport>,
    pub held: usize,
}

impl TransportOutcome {
    pub fn summary_line(&self) -> String {
        format!("{}/{} hold", self.held, self.reports.len())
    }
}

/// Uniform draw in `1..=max` from a hashed stream id.
fn small_draw(seed: u64, k: u64, salt: u64, max: usize) -> usize {
    1 + (RngStream::derive(seed, Purpose::Trial, k, salt).stream_id % max as u64) as usize
}

pub fn transport_trials(cfg: &RunConfig) -> CliResult<TransportOutcome> {
    let t = &cfg.transport;
    let seed = cfg.output.seed;
    let mut reports = Vec::with_capacity(t.trials);
    for k in 0..t.trials as u64 {
        let n = small_draw(seed, k, 0, t.max_points);
        let d = small_draw(seed, k, 1, t.max_dim);
        let m = gaussian_matrix(&RngStream::derive(seed, Purpose::Trial, k, 2), n, d, 1.0);
        let points = (0..n)
            .map(|i| Vector::from_vec(m.row(i).to_vec()))
            .collect();
        let dist = EmpiricalDist::new(points)?;
        let shift = sample_node_shift(&RngStream::derive(seed, Purpose::Trial, k, 3), d, t.sigma);
        reports.push(check_transport_bound(&dist, &shift)?);
    }
    let held = reports.iter().filter(|r| r.holds).count();
    Ok(TransportOutcome { reports, held })
}

#[derive(Debug, Clone)]
pub struct DiagOutcome {
    pub complexity: SpectralComplexity,
    /// `(γ, margin risk)` under each node's fitted worst-case shift.
    pub margin_risk: Vec<(f64, f64)>,
    pub heterogeneity: f64,
}

pub const DIAG_GAMMAS: [f64; 4] = [0.0, 0.1, 0.5, 1.0];

pub fn cmd_diag(cfg: &RunConfig, checkpoint: &Path) -> CliResult<DiagOutcome> {
    let model = checkpoint_read(checkpoint)?;
    let complexity = spectral_complexity(&model)?;
    let data = prepare_data(cfg)?;
    check_input_dim(&model, &data)?;
    let budget = ShiftBudget::new(cfg.attack.eps1, cfg.attack.eps2)?;
    let sets = data
        .partition
        .nodes
        .iter()
        .map(|b| {
            Ok((
                b.clone(),
                affine_attack(&model, b, budget, cfg.attack.steps, cfg.attack.step_size)?,
            ))
        })
        .collect::<fedrobust::Result<Vec<_>>>()?;
    let margin_risk = DIAG_GAMMAS
        .iter()
        .map(|&g| Ok((g, margin_risk(&model, &sets, g)?)))
        .collect::<fedrobust::Result<Vec<_>>>()?;
    let nodes: Vec<NodeState<Batch>> =
        make_nodes(data.partition.nodes.clone(), &model, cfg.output.seed)?;
    let heterogeneity = heterogeneity(&nodes, &model)?;
    Ok(DiagOutcome {
        complexity,
        margin_risk,
        heterogeneity,
    })
}
