//! TOML run configuration.
//!
//! Every section and key is optional; missing keys take the defaults below.
//! Unknown keys and out-of-range values are rejected with the offending
//! field named.

use std::path::{Path, PathBuf};

use fedrobust::attacks::{AttackKind, AttackSpec, DEFAULT_AFFINE_STEPS, DEFAULT_AFFINE_STEP_SIZE};
use fedrobust::data::SplitSizes;
use fedrobust::fedopt::{GradNoise, HyperParams, DEFAULT_ASCENT_REPS, DEFAULT_PGD_STEPS};
use fedrobust::lab::GameSpec;
use fedrobust::model::{Activation, Head};
use fedrobust::perturb::{ShiftBudget, DEFAULT_NODE_SHIFT_SIGMA};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

/// Candidate penalty weights for the validation sweep.
pub const LAMBDA_GRID: [f64; 6] = [0.1, 0.5, 1.0, 5.0, 10.0, 50.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Fedrobust,
    Fedavg,
    DistFgm,
    DistPgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    #[default]
    Elu,
    Relu,
}

impl From<ActivationName> for Activation {
    fn from(a: ActivationName) -> Self {
        match a {
            ActivationName::Elu => Activation::Elu,
            ActivationName::Relu => Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden layer widths; empty gives a linear classifier.
    pub hidden: Vec<usize>,
    pub activation: ActivationName,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            activation: ActivationName::Elu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub eta1: f64,
    /// Defaults to `1/(2λ)`.
    pub eta2: Option<f64>,
    pub tau: usize,
    pub iterations: usize,
    pub lam: f64,
    pub batch_size: usize,
    pub ascent_reps: usize,
    pub sigma_w: f64,
    pub sigma_psi: f64,
    pub pgd_steps: usize,
    /// Radius for the adversarial-training baselines; defaults to a fixed
    /// fraction of the mean training sample norm.
    pub baseline_eps: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            eta1: 0.05,
            eta2: None,
            tau: 5,
            iterations: 500,
            lam: 1.0,
            batch_size: 50,
            ascent_reps: DEFAULT_ASCENT_REPS,
            sigma_w: 0.0,
            sigma_psi: 0.0,
            pgd_steps: DEFAULT_PGD_STEPS,
            baseline_eps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    /// Node shift scale.
    pub sigma: f64,
    pub nodes: usize,
    pub per_node: usize,
    pub validation: usize,
    pub test: usize,
    /// Map IDX pixel values to `[-1, 1]`.
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            images: None,
            labels: None,
            classes: 10,
            dim: 20,
            separation: 3.0,
            sigma: DEFAULT_NODE_SHIFT_SIGMA,
            nodes: 10,
            per_node: 500,
            validation: 1000,
            test: 1000,
            normalize: true,
        }
    }
}

impl DataSection {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            nodes: self.nodes,
            per_node: self.per_node,
            validation: self.validation,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackName {
    None,
    #[default]
    Affine,
    Fgm,
    Pgd,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub kind: AttackName,
    /// Cap on `‖Λ − I‖_F`.
    pub eps1: f64,
    /// Cap on `‖δ‖`.
    pub eps2: f64,
    /// ℓ2 radius for the per-sample attacks.
    pub eps: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Budget points swept by `eval`: the `Λ` cap for affine attacks, the
    /// radius otherwise.
    pub sweep: Vec<f64>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            kind: AttackName::Affine,
            eps1: 0.4,
            eps2: 1.0,
            eps: 1.0,
            steps: DEFAULT_AFFINE_STEPS,
            step_size: DEFAULT_AFFINE_STEP_SIZE,
            sweep: vec![0.0, 0.1, 0.2, 0.3, 0.4],
        }
    }
}

impl AttackSection {
    /// Attack at budget point `b` of the sweep.
    pub fn spec_at(&self, b: f64) -> AttackSpec {
        let kind = match self.kind {
            AttackName::None => AttackKind::None,
            AttackName::Affine => AttackKind::Affine {
                budget: ShiftBudget {
                    eps1: b,
                    eps2: self.eps2,
                },
            },
            AttackName::Fgm => AttackKind::Fgm { eps: b },
            AttackName::Pgd => AttackKind::Pgd { eps: b },
        };
        AttackSpec {
            kind,
            steps: self.steps,
            step_size: self.step_size,
        }
    }

    /// Attack at the configured budget.
    pub fn spec(&self) -> AttackSpec {
        self.spec_at(if self.kind == AttackName::Affine {
            self.eps1
        } else {
            self.eps
        })
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub eval_path: PathBuf,
    pub lab_path: PathBuf,
    pub seed: u64,
    pub repeats: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            metrics_path: "metrics.csv".into(),
            checkpoint_path: "model.flra".into(),
            eval_path: "eval.csv".into(),
            lab_path: "lab.csv".into(),
            seed: 0,
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabCheck {
    /// Geometric decay of the potential under two-sided PL.
    #[default]
    Decay,
    /// Averaged stationarity under one-sided PL.
    Stationarity,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabSection {
    pub check: LabCheck,
    pub nodes: usize,
    pub p: usize,
    pub q: usize,
    pub a_min: f64,
    pub a_max: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub b_scale: f64,
    pub heterogeneity: f64,
    pub linear_scale: f64,
    pub game_seed: u64,
    pub tau: usize,
    pub iterations: usize,
    /// Both steps default to the feasible pair with the largest `η₁`.
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    pub sigma_w: f64,
    pub sigma_psi: f64,
    /// Seeds averaged over when noise is injected.
    pub seeds: usize,
    pub start_scale: f64,
}

impl Default for LabSection {
    fn default() -> Self {
        Self {
            check: LabCheck::Decay,
            nodes: 4,
            p: 6,
            q: 4,
            a_min: 1.0,
            a_max: 2.0,
            c_min: 1.0,
            c_max: 1.1,
            b_scale: 0.3,
            heterogeneity: 0.3,
            linear_scale: 1.0,
            game_seed: 1,
            tau: 1,
            iterations: 500,
            eta1: None,
            eta2: None,
            sigma_w: 0.0,
            sigma_psi: 0.0,
            seeds: fedrobust::lab::DEFAULT_NOISE_SEEDS,
            start_scale: 1.0,
        }
    }
}

impl LabSection {
    pub fn game_spec(&self) -> GameSpec {
        GameSpec {
            n: self.nodes,
            p: self.p,
            q: self.q,
            a_eig: (self.a_min, self.a_max),
            c_eig: (self.c_min, self.c_max),
            b_scale: self.b_scale,
            heterogeneity: self.heterogeneity,
            linear_scale: self.linear_scale,
        }
    }

    pub fn noise(&self) -> Option<GradNoise> {
        (self.sigma_w > 0.0 || self.sigma_psi > 0.0).then_some(GradNoise {
            sigma_w: self.sigma_w,
            sigma_psi: self.sigma_psi,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSection {
    pub trials: usize,
    pub max_points: usize,
    pub max_dim: usize,
    /// Scale of the random shifts.
    pub sigma: f64,
}

impl Default for TransportSection {
    fn default() -> Self {
        Self {
            trials: 200,
            max_points: 8,
            max_dim: 5,
            sigma: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub attack: AttackSection,
    pub output: OutputSection,
    pub lab: LabSection,
    pub transport: TransportSection,
}

const SECTIONS: [&str; 7] = [
    "model",
    "train",
    "data",
    "attack",
    "output",
    "lab",
    "transport",
];

fn section<T: DeserializeOwned + Default>(table: &mut toml::Table, name: &str) -> CliResult<T> {
    match table.remove(name) {
        None => Ok(T::default()),
        Some(toml::Value::Table(t)) => {
            // deserialize key by key first so a bad value is reported with its name
            for (key, value) in &t {
                let mut single = toml::Table::new();
                single.insert(key.clone(), value.clone());
                if let Err(e) = toml::Value::Table(single).try_into::<T>() {
                    return Err(CliError::config(
                        format!("{name}.{key}"),
                        e.message().trim().to_string(),
                    ));
                }
            }
            toml::Value::Table(t)
                .try_into::<T>()
                .map_err(|e| CliError::config(name, e.message().trim().to_string()))
        }
        Some(_) => Err(CliError::config(name, "expected a table")),
    }
}

fn positive(field: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::config(
            field,
            format!("must be positive, got {v}"),
        ))
    }
}

fn nonnegative(field: &str, v: f64) -> CliResult<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::config(
            field,
            format!("must be finite and nonnegative, got {v}"),
        ))
    }
}

fn at_least_one(field: &str, v: usize) -> CliResult<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(CliError::config(field, "must be at least 1"))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Parse(e.to_string()))?;
        let algorithm = match table.remove("algorithm") {
            None => Algorithm::default(),
            Some(v) => v
                .try_into::<Algorithm>()
                .map_err(|e| CliError::config("algorithm", e.message().trim().to_string()))?,
        };
        let cfg = Self {
            algorithm,
            model: section(&mut table, "model")?,
            train: section(&mut table, "train")?,
            data: section(&mut table, "data")?,
            attack: section(&mut table, "attack")?,
            output: section(&mut table, "output")?,
            lab: section(&mut table, "lab")?,
            transport: section(&mut table, "transport")?,
        };
        if let Some(key) = table.keys().next() {
            return Err(CliError::config(
                key.clone(),
                format!("unknown key; expected `algorithm` or one of {SECTIONS:?}"),
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        let t = &self.train;
        positive("train.eta1", t.eta1)?;
        if let Some(e2) = t.eta2 {
            nonnegative("train.eta2", e2)?;
        }
        positive("train.lam", t.lam)?;
        at_least_one("train.tau", t.tau)?;
        at_least_one("train.batch_size", t.batch_size)?;
        at_least_one("train.ascent_reps", t.ascent_reps)?;
        at_least_one("train.pgd_steps", t.pgd_steps)?;
        nonnegative("train.sigma_w", t.sigma_w)?;
        nonnegative("train.sigma_psi", t.sigma_psi)?;
        if let Some(e) = t.baseline_eps {
            nonnegative("train.baseline_eps", e)?;
        }
        if t.batch_size > self.data.per_node {
            return Err(CliError::config(
                "train.batch_size",
                format!("exceeds data.per_node = {}", self.data.per_node),
            ));
        }
        if let Some(h) = self.model.hidden.iter().position(|&w| w == 0) {
            return Err(CliError::config(
                format!("model.hidden[{h}]"),
                "layer width must be positive",
            ));
        }

        let d = &self.data;
        at_least_one("data.nodes", d.nodes)?;
        at_least_one("data.per_node", d.per_node)?;
        at_least_one("data.test", d.test)?;
        nonnegative("data.sigma", d.sigma)?;
        match d.source {
            DataSource::Synthetic => {
                if d.classes < 2 {
                    return Err(CliError::config(
                        "data.classes",
                        "need at least two classes",
                    ));
                }
                at_least_one("data.dim", d.dim)?;
                nonnegative("data.separation", d.separation)?;
            }
            DataSource::Idx => {
                if d.images.is_none() {
                    return Err(CliError::config(
                        "data.images",
                        "required when data.source = \"idx\"",
                    ));
                }
                if d.labels.is_none() {
                    return Err(CliError::config(
                        "data.labels",
                        "required when data.source = \"idx\"",
                    ));
                }
            }
        }

        let a = &self.attack;
        nonnegative("attack.eps1", a.eps1)?;
        nonnegative("attack.eps2", a.eps2)?;
        nonnegative("attack.eps", a.eps)?;
        if a.steps > 0 {
            positive("attack.step_size", a.step_size)?;
        }
        if a.sweep.is_empty() {
            return Err(CliError::config(
                "attack.sweep",
                "must contain at least one budget point",
            ));
        }
        for (i, &b) in a.sweep.iter().enumerate() {
            nonnegative(&format!("attack.sweep[{i}]"), b)?;
        }
        at_least_one("output.repeats", self.output.repeats)?;

        let l = &self.lab;
        at_least_one("lab.nodes", l.nodes)?;
        at_least_one("lab.p", l.p)?;
        at_least_one("lab.q", l.q)?;
        at_least_one("lab.tau", l.tau)?;
        at_least_one("lab.seeds", l.seeds)?;
        nonnegative("lab.a_min", l.a_min)?;
        if !(l.a_max >= l.a_min) {
            return Err(CliError::config("lab.a_max", "must be at least lab.a_min"));
        }
        positive("lab.c_min", l.c_min)?;
        if !(l.c_max >= l.c_min) {
            return Err(CliError::config("lab.c_max", "must be at least lab.c_min"));
        }
        nonnegative("lab.b_scale", l.b_scale)?;
        nonnegative("lab.heterogeneity", l.heterogeneity)?;
        nonnegative("lab.linear_scale", l.linear_scale)?;
        nonnegative("lab.sigma_w", l.sigma_w)?;
        nonnegative("lab.sigma_psi", l.sigma_psi)?;
        nonnegative("lab.start_scale", l.start_scale)?;
        if let Some(e) = l.eta1 {
            positive("lab.eta1", e)?;
        }
        if let Some(e) = l.eta2 {
            nonnegative("lab.eta2", e)?;
        }

        let tr = &self.transport;
        if !(1..=fedrobust::transport::EXHAUSTIVE_LIMIT).contains(&tr.max_points) {
            return Err(CliError::config(
                "transport.max_points",
                format!("must be in 1..={}", fedrobust::transport::EXHAUSTIVE_LIMIT),
            ));
        }
        at_least_one("transport.max_dim", tr.max_dim)?;
        nonnegative("transport.sigma", tr.sigma)?;
        Ok(())
    }

    /// Layer widths for the given input dimension and class count.
    pub fn dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.model.hidden);
        dims.push(classes);
        dims
    }

    pub fn head(&self) -> Head {
        Head::SoftmaxXent
    }

    pub fn hyper_params(&self) -> HyperParams {
        let t = &self.train;
        let noise = (t.sigma_w > 0.0 || t.sigma_psi > 0.0).then_some(GradNoise {
            sigma_w: t.sigma_w,
            sigma_psi: t.sigma_psi,
        });
        HyperParams {
            eta1: t.eta1,
            eta2: t.eta2.unwrap_or(1.0 / (2.0 * t.lam)),
            tau: t.tau,
            iterations: t.iterations,
            lam: t.lam,
            // training is penalized, not constrained
            budget: ShiftBudget {
                eps1: f64::INFINITY,
                eps2: f64::INFINITY,
            },
            batch_size: t.batch_size,
            ascent_reps: t.ascent_reps,
            noise,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(text: &str) -> String {
        match RunConfig::parse(text) {
            Err(CliError::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_config_uses_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.hyper_params().eta2, 0.5);
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::parse(
            "algorithm = \"dist_pgd\"\n[train]\neta1 = 0.2\neta2 = 0.0\ntau = 3\n[model]\nhidden = []\nactivation = \"relu\"\n",
        )
        .unwrap();
        assert_eq!(c.algorithm, Algorithm::DistPgd);
        assert_eq!((c.train.eta1, c.train.tau), (0.2, 3));
        assert_eq!(c.hyper_params().eta2, 0.0);
        assert_eq!(c.dims(5, 3), vec![5, 3]);
    }

    #[test]
    fn bad_fields_are_named() {
        assert_eq!(field_of("[train]\neta1 = \"fast\""), "train.eta1");
        assert_eq!(field_of("[train]\neta1 = -1.0"), "train.eta1");
        assert_eq!(field_of("[train]\ntau = 0"), "train.tau");
        assert_eq!(field_of("[train]\nwarmup = 3"), "train.warmup");
        assert_eq!(field_of("[data]\nsource = \"idx\""), "data.images");
        assert_eq!(field_of("[model]\nhidden = [3, 0]"), "model.hidden[1]");
        assert_eq!(field_of("algorithm = \"sgd\""), "algorithm");
        assert_eq!(field_of("[extra]\nx = 1"), "extra");
        assert_eq!(field_of("train = 3"), "train");
        assert_eq!(field_of("[attack]\nsweep = []"), "attack.sweep");
        assert_eq!(
            field_of("[transport]\nmax_points = 9"),
            "transport.max_points"
        );
        assert!(matches!(
            RunConfig::parse("[train"),
            Err(CliError::Parse(_))
        ));
    }
}
