//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fedrobust::attacks::{robust_accuracy, AttackSpec};
use fedrobust::data::{parse_idx, serialize_idx, RawDataset};
use fedrobust::fedopt::{
    make_nodes, run_centralized_sgda, run_dist_pgd, run_fedrobust, HyperParams, NoHooks,
};
use fedrobust::lab::*;
use fedrobust::model::{loss_and_grads, Activation, Batch, Head, Labels, ModelParams};
use fedrobust::numerics::{gaussian_matrix, gaussian_sample, Matrix, RngStream, Vector};
use fedrobust::perturb::{sample_node_shift, AffineShift, ShiftBudget};
use fedrobust::transport::{w2_cost, EmpiricalDist};
use fedrobust_cli::commands::{cmd_train, in_pool, prepare_data, train_on, transport_trials};
use fedrobust_cli::config::{Algorithm, RunConfig};
use fedrobust_cli::metrics::metrics_csv;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_secs, || {
        format!("took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64())
    })
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------- 1: gradient fidelity ----------

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn fd_worst(dims: &[usize], act: Activation, head: Head, seed: u64) -> fedrobust::Result<f64> {
    let lam = 0.7;
    let mut p = ModelParams::init(dims, act, head, seed)?;
    for (k, b) in p.biases.iter_mut().enumerate() {
        *b = gaussian_sample(&RngStream::new(seed, 100 + k as u64), b.len(), 0.0, 0.1);
    }
    let (d, rows, out) = (dims[0], 6, *dims.last().unwrap());
    let x = gaussian_matrix(&RngStream::new(seed, 1), rows, d, 1.0);
    let labels = match head {
        Head::SoftmaxXent => Labels::Class((0..rows).map(|j| (j + seed as usize) % out).collect()),
        Head::SquaredError => {
            Labels::Real(gaussian_sample(&RngStream::new(seed, 2), rows, 0.0, 1.0).into_vec())
        }
    };
    let b = Batch::new(x, labels)?;
    let s = sample_node_shift(&RngStream::new(seed, 3), d, 0.3);
    let loss = |p: &ModelParams, s: &AffineShift| loss_and_grads(p, s, &b, lam).map(|g| g.loss);
    let g = loss_and_grads(&p, &s, &b, lam)?;

    let flat = p.to_flat();
    let mut fd_w = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut q = p.clone();
        let mut f = flat.clone();
        f[i] += FD_H;
        q.set_flat(&f)?;
        let up = loss(&q, &s)?;
        f[i] -= 2.0 * FD_H;
        q.set_flat(&f)?;
        fd_w.push((up - loss(&q, &s)?) / (2.0 * FD_H));
    }
    let mut fd_l = Vec::with_capacity(d * d);
    let mut an_l = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            let mut t = s.clone();
            t.lambda[(i, j)] += FD_H;
            let up = loss(&p, &t)?;
            t.lambda[(i, j)] -= 2.0 * FD_H;
            fd_l.push((up - loss(&p, &t)?) / (2.0 * FD_H));
            an_l.push(g.grad_shift.lambda[(i, j)]);
        }
    }
    let mut fd_d = Vec::with_capacity(d);
    for i in 0..d {
        let mut t = s.clone();
        t.delta.as_mut_slice()[i] += FD_H;
        let up = loss(&p, &t)?;
        t.delta.as_mut_slice()[i] -= 2.0 * FD_H;
        fd_d.push((up - loss(&p, &t)?) / (2.0 * FD_H));
    }
    Ok(rel_err(&g.grad_w.to_flat(), &fd_w)
        .max(rel_err(&an_l, &fd_l))
        .max(rel_err(g.grad_shift.delta.as_slice(), &fd_d)))
}

fn criterion_gradients() -> Check {
    let start = Instant::now();
    let kinds: [(&[usize], Activation, Head, &str); 4] = [
        (&[4, 6, 3], Activation::Elu, Head::SoftmaxXent, "elu mlp"),
        (
            &[4, 6, 5, 3],
            Activation::Relu,
            Head::SoftmaxXent,
            "relu mlp",
        ),
        (
            &[5, 4],
            Activation::Elu,
            Head::SoftmaxXent,
            "linear softmax",
        ),
        (
            &[3, 5, 1],
            Activation::Elu,
            Head::SquaredError,
            "squared error",
        ),
    ];
    let mut worst = 0.0f64;
    for (dims, act, head, name) in kinds {
        for seed in 0..20 {
            let err = fd_worst(dims, act, head, seed).map_err(e)?;
            ensure(err <= FD_TOL, || {
                format!("{name} seed {seed}: relative error {err:.3e}")
            })?;
            worst = worst.max(err);
        }
    }
    within(start.elapsed(), 10.0)?;
    Ok(format!("80 triples, worst relative error {worst:.2e}"))
}

// ---------- 2: potential decay ----------

fn lab_hp(tau: usize, iterations: usize) -> HyperParams {
    HyperParams {
        eta1: 0.0,
        eta2: 0.0,
        tau,
        iterations,
        lam: 1.0,
        budget: ShiftBudget {
            eps1: f64::INFINITY,
            eps2: f64::INFINITY,
        },
        batch_size: 1,
        ascent_reps: 1,
        noise: None,
    }
}

fn feasible(
    c: &GameConstants,
    base: HyperParams,
    check: fn(&GameConstants, &HyperParams) -> fedrobust::Result<()>,
) -> Result<HyperParams, String> {
    let (eta1, eta2) = best_feasible_steps(c, &base, check).ok_or("no feasible step sizes")?;
    Ok(HyperParams { eta1, eta2, ..base })
}

fn criterion_decay() -> Check {
    let start = Instant::now();
    let spec = GameSpec {
        n: 4,
        p: 6,
        q: 4,
        a_eig: (1.0, 2.0),
        c_eig: (1.0, 1.1),
        b_scale: 0.3,
        heterogeneity: 0.3,
        linear_scale: 1.0,
    };
    let game = QuadraticGame::random(&spec, 1).map_err(e)?;
    let c = constants(&game).map_err(e)?;
    let hp = feasible(&c, lab_hp(1, 500), decay_feasibility)?;
    let pg = game.prepare().map_err(e)?;
    let tr = trace_run(
        &pg,
        &hp,
        LabAlgorithm::FedRobust,
        &LabStart::random(&game, 1.0, 0),
        &[0],
    )
    .map_err(e)?;
    let p0 = tr.records[0].p;
    let rate = 1.0 - 0.5 * c.mu1 * hp.eta1;
    for r in &tr.records {
        let bound = rate.powi(r.t as i32) * p0 * (1.0 + 1e-9);
        ensure(r.p <= bound, || {
            format!("tau 1: P_{} = {:.3e} exceeds {bound:.3e}", r.t, r.p)
        })?;
    }
    let p500 = tr.records[500].p;
    ensure(p500 <= 1e-8 * p0, || {
        format!("tau 1: P_500/P_0 = {:.3e}", p500 / p0)
    })?;

    let spec4 = GameSpec {
        a_eig: (1.0, 1.1),
        b_scale: 0.1,
        heterogeneity: 0.02,
        ..spec
    };
    let game4 = QuadraticGame::random(&spec4, 2).map_err(e)?;
    let c4 = constants(&game4).map_err(e)?;
    let hp4 = feasible(&c4, lab_hp(4, 5000), decay_feasibility)?;
    let pg4 = game4.prepare().map_err(e)?;
    let tr4 = trace_run(
        &pg4,
        &hp4,
        LabAlgorithm::FedRobust,
        &LabStart::random(&game4, 1.0, 0),
        &[0],
    )
    .map_err(e)?;
    let report = check_decay_bound(&tr4, &c4, &hp4).map_err(e)?;
    ensure(report.holds, || {
        format!(
            "tau 4: bound violated at t = {} (margin {:.3e})",
            report.worst_t, report.margin
        )
    })?;
    let hit = tr4.records.iter().find(|r| r.p < 1e-6).map(|r| r.t);
    ensure(hit.is_some(), || {
        format!("tau 4: P_5000 = {:.3e}", tr4.records.last().unwrap().p)
    })?;
    within(start.elapsed(), 5.0)?;
    Ok(format!(
        "tau 1: P_500/P_0 = {:.2e}; tau 4: P < 1e-6 from t = {}, P_5000 = {:.2e}, floor {:.2e}",
        p500 / p0,
        hit.unwrap(),
        tr4.records.last().unwrap().p,
        report.floor
    ))
}

// ---------- 3: stationarity ----------

fn criterion_stationarity() -> Check {
    let start = Instant::now();
    let mut worst_ratio = 0.0f64;
    for k in 0..50u64 {
        let spec = GameSpec {
            n: 2 + (k as usize % 4),
            p: 6,
            q: 4,
            a_eig: (1.0, 2.0),
            c_eig: (1.0, 1.5),
            b_scale: 0.3,
            heterogeneity: 0.1 + 0.01 * k as f64,
            linear_scale: 1.0,
        };
        let game = QuadraticGame::random(&spec, 1000 + k).map_err(e)?;
        let c = constants(&game).map_err(e)?;
        let hp = feasible(
            &c,
            lab_hp(1 + k as usize % 4, 400),
            stationarity_feasibility,
        )?;
        let pg = game.prepare().map_err(e)?;
        let tr = trace_run(
            &pg,
            &hp,
            LabAlgorithm::FedRobust,
            &LabStart::random(&game, 1.0, k),
            &[k],
        )
        .map_err(e)?;
        let r = check_stationarity_bound(&tr, &c, &hp, 400).map_err(e)?;
        ensure(r.holds, || {
            format!("game {k}: lhs {:.3e} > rhs {:.3e}", r.lhs, r.rhs)
        })?;
        worst_ratio = worst_ratio.max(r.lhs / r.rhs);
    }
    within(start.elapsed(), 30.0)?;
    Ok(format!("50/50 games, largest lhs/rhs {worst_ratio:.3e}"))
}

// ---------- 4: transport ----------

fn criterion_transport() -> Check {
    let start = Instant::now();
    let out = transport_trials(&RunConfig::default()).map_err(e)?;
    ensure(out.reports.len() == 200 && out.held == 200, || {
        out.summary_line()
    })?;
    let mut worst = 0.0f64;
    for k in 0..50u64 {
        let (n, d) = (1 + k as usize % 8, 1 + k as usize % 5);
        let m = gaussian_matrix(&RngStream::new(k, 0), n, d, 1.0);
        let dist = EmpiricalDist::new(
            (0..n)
                .map(|i| Vector::from_vec(m.row(i).to_vec()))
                .collect(),
        )
        .map_err(e)?;
        let delta = gaussian_sample(&RngStream::new(k, 1), d, 0.0, 1.0);
        let shift = AffineShift::new(Matrix::identity(d), delta.clone()).map_err(e)?;
        let cost = w2_cost(&dist, &dist.shifted(&shift).map_err(e)?).map_err(e)?;
        let err = (cost - 0.5 * delta.norm_sq()).abs();
        ensure(err <= 1e-10, || {
            format!("translation trial {k}: error {err:.3e}")
        })?;
        worst = worst.max(err);
    }
    within(start.elapsed(), 20.0)?;
    Ok(format!(
        "{}; translation-only worst error {worst:.1e}",
        out.summary_line()
    ))
}

// ---------- 5: reductions ----------

fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.hidden = vec![16];
    cfg.data.classes = 4;
    cfg.data.dim = 6;
    cfg.data.nodes = 4;
    cfg.data.per_node = 120;
    cfg.data.validation = 60;
    cfg.data.test = 200;
    cfg.train.iterations = 60;
    cfg.train.tau = 3;
    cfg.train.batch_size = 20;
    cfg.output.seed = seed;
    cfg
}

fn criterion_reductions() -> Check {
    for seed in 0..3 {
        let mut robust = small_config(seed);
        robust.algorithm = Algorithm::Fedrobust;
        robust.train.eta2 = Some(0.0);
        let mut avg = robust.clone();
        avg.algorithm = Algorithm::Fedavg;
        avg.train.eta2 = None;
        let data = prepare_data(&robust).map_err(e)?;
        let a = metrics_csv(&train_on(&robust, &data, None).map_err(e)?.rows).map_err(e)?;
        let b = metrics_csv(&train_on(&avg, &data, None).map_err(e)?.rows).map_err(e)?;
        ensure(a == b, || {
            format!("seed {seed}: zero-ascent FedRobust differs from FedAvg")
        })?;

        let mut single = small_config(seed);
        single.data.nodes = 1;
        single.train.tau = 1;
        let data = prepare_data(&single).map_err(e)?;
        let fed = metrics_csv(&train_on(&single, &data, None).map_err(e)?.rows).map_err(e)?;
        let model = ModelParams::init(
            &single.dims(data.dim, data.classes),
            single.model.activation.into(),
            single.head(),
            seed,
        )
        .map_err(e)?;
        let node = make_nodes(data.partition.nodes.clone(), &model, seed)
            .map_err(e)?
            .remove(0);
        let test = &data.partition.test;
        let mut acc =
            |_t: usize, w: &ModelParams| robust_accuracy(w, test, &AttackSpec::none()).map(Some);
        let (_, _, rows) = run_centralized_sgda(
            &node.data,
            node.w_local,
            node.shift,
            node.stream,
            &single.hyper_params(),
            &mut acc,
        )
        .map_err(e)?;
        let central = metrics_csv(&rows).map_err(e)?;
        ensure(fed == central, || {
            format!("seed {seed}: single-node FedRobust differs from centralized SGDA")
        })?;
    }
    Ok("3 seeds, both reductions byte-identical".into())
}

// ---------- 6: robustness ordering ----------

const ORDER_SEEDS: u64 = 5;
const ORDER_SEPARATION: f64 = 2.5;
const ORDER_LAMBDA: f64 = 0.1;
const ORDER_ETA1: f64 = 0.1;
const ORDER_ETA2: f64 = 2.0;
const ORDER_ITERATIONS: usize = 1000;

fn ordering_config(algorithm: Algorithm, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.algorithm = algorithm;
    cfg.model.hidden = vec![64];
    cfg.data.classes = 10;
    cfg.data.nodes = 10;
    cfg.data.per_node = 500;
    cfg.data.sigma = 0.01;
    cfg.data.separation = ORDER_SEPARATION;
    cfg.attack.eps1 = 0.4;
    cfg.attack.eps2 = 1.0;
    cfg.train.lam = ORDER_LAMBDA;
    cfg.train.eta1 = ORDER_ETA1;
    if algorithm == Algorithm::Fedrobust {
        cfg.train.eta2 = Some(ORDER_ETA2);
    }
    cfg.train.iterations = ORDER_ITERATIONS;
    cfg.output.seed = seed;
    cfg
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_ordering() -> Check {
    let start = Instant::now();
    let mut stats = Vec::new();
    for algorithm in [Algorithm::Fedavg, Algorithm::Fedrobust] {
        let (mut clean, mut robust) = (Vec::new(), Vec::new());
        for seed in 0..ORDER_SEEDS {
            let cfg = ordering_config(algorithm, seed);
            let data = prepare_data(&cfg).map_err(e)?;
            let out = train_on(&cfg, &data, None).map_err(e)?;
            clean.push(
                robust_accuracy(&out.model, &data.partition.test, &AttackSpec::none())
                    .map_err(e)?,
            );
            robust.push(
                robust_accuracy(&out.model, &data.partition.test, &cfg.attack.spec()).map_err(e)?,
            );
        }
        stats.push((median(clean), median(robust)));
    }
    let ((avg_clean, avg_robust), (fr_clean, fr_robust)) = (stats[0], stats[1]);
    let summary = format!(
        "median robust FedRobust {:.1}% vs FedAvg {:.1}%, clean {:.1}% vs {:.1}%",
        100.0 * fr_robust,
        100.0 * avg_robust,
        100.0 * fr_clean,
        100.0 * avg_clean
    );
    ensure(fr_robust - avg_robust >= 0.10, || {
        format!("robust gap below 10 points: {summary}")
    })?;
    ensure((fr_clean - avg_clean).abs() <= 0.05, || {
        format!("clean gap above 5 points: {summary}")
    })?;
    within(start.elapsed(), 600.0)?;
    Ok(summary)
}

// ---------- 7: gradient evaluation counts ----------

fn criterion_cost() -> Check {
    let cfg = small_config(0);
    let data = prepare_data(&cfg).map_err(e)?;
    let model = ModelParams::init(
        &cfg.dims(data.dim, data.classes),
        Activation::Elu,
        Head::SoftmaxXent,
        0,
    )
    .map_err(e)?;
    let hp = HyperParams {
        ascent_reps: 2,
        ..cfg.hyper_params()
    };
    let mut nodes = make_nodes(data.partition.nodes.clone(), &model, 0).map_err(e)?;
    let n = nodes.len();
    let fr = run_fedrobust(&mut nodes, &hp, &mut NoHooks)
        .map_err(e)?
        .grad_evals_per_node_iter(n);
    let mut nodes = make_nodes(data.partition.nodes.clone(), &model, 0).map_err(e)?;
    let pgd = run_dist_pgd(&mut nodes, &hp, 0.5, 10, &mut NoHooks)
        .map_err(e)?
        .grad_evals_per_node_iter(n);
    ensure(fr == 3.0 && pgd == 11.0, || {
        format!("FedRobust {fr}, distributed PGD {pgd}")
    })?;
    Ok(format!(
        "FedRobust {fr}, distributed PGD {pgd} gradient evaluations per node-iteration"
    ))
}

// ---------- 8: IDX parser ----------

const MNIST_TRAIN_HIST: [usize; 10] = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949];
const MNIST_TEST_HIST: [usize; 10] = [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009];

fn mnist_dir() -> PathBuf {
    std::env::var_os("FEDROBUST_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn criterion_idx() -> Check {
    let features = Matrix::from_fn(7, 12, |i, k| ((i * 37 + k * 11) % 256) as f64);
    let raw = RawDataset {
        features,
        labels: (0..7).map(|i| i % 10).collect(),
        image_shape: Some((3, 4)),
        source: "idx".into(),
    };
    let (img, lab) = serialize_idx(&raw).map_err(e)?;
    let back = parse_idx(&img, &lab).map_err(e)?;
    let (img2, lab2) = serialize_idx(&back).map_err(e)?;
    ensure(
        img == img2 && lab == lab2 && back.labels == raw.labels,
        || "round trip changed bytes".into(),
    )?;
    let mut bad = img.clone();
    bad[3] = 0x04;
    ensure(parse_idx(&bad, &lab).is_err(), || {
        "bad image magic accepted".into()
    })?;
    ensure(parse_idx(&img, &img).is_err(), || {
        "image file accepted as labels".into()
    })?;
    for cut in 0..img.len() {
        ensure(parse_idx(&img[..cut], &lab).is_err(), || {
            format!("image truncated to {cut} bytes accepted")
        })?;
    }
    for cut in 0..lab.len() {
        ensure(parse_idx(&img, &lab[..cut]).is_err(), || {
            format!("labels truncated to {cut} bytes accepted")
        })?;
    }
    let dir = mnist_dir();
    let files = [
        (
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            60000,
            MNIST_TRAIN_HIST,
        ),
        (
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
            10000,
            MNIST_TEST_HIST,
        ),
    ];
    if !files
        .iter()
        .all(|(i, l, _, _)| dir.join(i).exists() && dir.join(l).exists())
    {
        return Ok(
            "round trip, magic and truncation checks pass; real digit files not present".into(),
        );
    }
    for (i, l, n, hist) in files {
        let img = std::fs::read(dir.join(i)).map_err(e)?;
        let lab = std::fs::read(dir.join(l)).map_err(e)?;
        let raw = parse_idx(&img, &lab).map_err(e)?;
        ensure(raw.len() == n && raw.dim() == 784, || {
            format!("{i}: {} samples of dim {}", raw.len(), raw.dim())
        })?;
        ensure(raw.label_histogram(10) == hist, || {
            format!("{l}: histogram {:?}", raw.label_histogram(10))
        })?;
    }
    Ok("round trip, magic and truncation checks pass; real files 60000/10000 with expected histograms".into())
}

// ---------- 9: determinism ----------

fn criterion_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    let mut outputs = Vec::new();
    for threads in [1usize, 4, 8] {
        let mut cfg = small_config(5);
        cfg.data.nodes = 8;
        let sub = dir.path().join(format!("t{threads}"));
        std::fs::create_dir_all(&sub).map_err(e)?;
        cfg.output.metrics_path = sub.join("metrics.csv");
        cfg.output.checkpoint_path = sub.join("model.flra");
        in_pool(Some(threads), || cmd_train(&cfg, false))
            .map_err(e)?
            .map_err(e)?;
        let csv = std::fs::read(&cfg.output.metrics_path).map_err(e)?;
        let ckpt = std::fs::read(&cfg.output.checkpoint_path).map_err(e)?;
        outputs.push((threads, csv, ckpt));
    }
    for (threads, csv, ckpt) in &outputs[1..] {
        ensure(*csv == outputs[0].1, || {
            format!("metrics at {threads} threads differ from 1 thread")
        })?;
        ensure(*ckpt == outputs[0].2, || {
            format!("checkpoint at {threads} threads differs from 1 thread")
        })?;
    }
    Ok("metrics and checkpoints byte-identical at 1, 4 and 8 threads".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("gradient fidelity", criterion_gradients),
        ("potential decay", criterion_decay),
        ("stationarity bound", criterion_stationarity),
        ("transport bound", criterion_transport),
        ("algorithmic reductions", criterion_reductions),
        ("robustness ordering", criterion_ordering),
        ("gradient evaluation counts", criterion_cost),
        ("idx parser", criterion_idx),
        ("determinism", criterion_determinism),
    ];
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}) [{secs:.1}s]", k + 1),
            Err(why) => {
                println!("criterion {} {name}: FAIL ({why}) [{secs:.1}s]", k + 1);
                failed.push(k + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
