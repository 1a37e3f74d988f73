//! Evaluation-time adversaries.
//!
//! The affine attack fits one constrained shift to a whole dataset, matching
//! a device-level distribution shift. FGM and PGD perturb each sample
//! independently inside an ℓ2 ball.

use crate::error::{Error, Result};
use crate::model::{evaluate, input_grad, predict, Batch, Head, Labels, ModelParams, Target};
use crate::numerics::Vector;
use crate::perturb::{apply, project, AffineShift, ShiftBudget};

pub const DEFAULT_AFFINE_STEPS: usize = 100;
pub const DEFAULT_AFFINE_STEP_SIZE: f64 = 0.1;
/// Gradients shorter than this are treated as zero when normalizing.
pub const ZERO_GRAD_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackKind {
    None,
    Affine { budget: ShiftBudget },
    Fgm { eps: f64 },
    Pgd { eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub steps: usize,
    pub step_size: f64,
}

impl AttackSpec {
    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            steps: 0,
            step_size: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && !(self.step_size > 0.0) {
            return Err(Error::InvalidArgument {
                name: "step_size",
                reason: format!("must be positive when steps > 0, got {}", self.step_size),
            });
        }
        match self.kind {
            AttackKind::Fgm { eps } | AttackKind::Pgd { eps } if !(eps >= 0.0) => {
                Err(Error::InvalidArgument {
                    name: "eps",
                    reason: format!("must be nonnegative, got {eps}"),
                })
            }
            _ => Ok(()),
        }
    }
}

/// Projected gradient ascent on the mean loss over `(Λ, δ)`, started at the
/// identity shift.
pub fn affine_attack(
    p: &ModelParams,
    data: &Batch,
    budget: ShiftBudget,
    steps: usize,
    step: f64,
) -> Result<AffineShift> {
    let mut shift = AffineShift::identity(p.input_dim());
    for _ in 0..steps {
        let g = evaluate(p, &shift, data, None, 0.0, false)?.grad_shift;
        shift.axpy(step, &g);
        shift = project(&shift, budget);
        if !shift.is_finite() {
            return Err(Error::NonFinite { iteration: None });
        }
    }
    Ok(shift)
}

fn project_ball(center: &Vector, x: &mut Vector, eps: f64) {
    let mut diff = x.sub(center);
    let n = diff.norm();
    if n > eps {
        diff.scale(eps / n);
        *x = center.add(&diff);
    }
}

/// `x + ε g/‖g‖₂` for the input gradient `g` of the loss.
pub fn fgm_attack(p: &ModelParams, x: &Vector, y: Target, eps: f64) -> Result<Vector> {
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let (_, g) = input_grad(p, x, y)?;
    let n = g.norm();
    if n < ZERO_GRAD_GUARD {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    out.axpy(eps / n, &g);
    project_ball(x, &mut out, eps);
    Ok(out)
}

/// Iterated normalized-gradient ascent on the input with projection onto the
/// ℓ2 ball of radius `eps` around `x`.
pub fn pgd_attack(
    p: &ModelParams,
    x: &Vector,
    y: Target,
    eps: f64,
    steps: usize,
    step: f64,
) -> Result<Vector> {
    let mut cur = x.clone();
    if eps == 0.0 {
        return Ok(cur);
    }
    for _ in 0..steps {
        let (_, g) = input_grad(p, &cur, y)?;
        let n = g.norm();
        if n < ZERO_GRAD_GUARD {
            break;
        }
        cur.axpy(step / n, &g);
        project_ball(x, &mut cur, eps);
    }
    Ok(cur)
}

/// Fraction of `test` classified correctly after the attack in `spec`.
pub fn robust_accuracy(p: &ModelParams, test: &Batch, spec: &AttackSpec) -> Result<f64> {
    if p.head != Head::SoftmaxXent {
        return Err(Error::WrongHead);
    }
    spec.validate()?;
    let Labels::Class(labels) = &test.labels else {
        return Err(Error::WrongHead);
    };
    if test.is_empty() {
        return Err(Error::InvalidArgument {
            name: "test",
            reason: "empty test set".into(),
        });
    }
    let shift = match spec.kind {
        AttackKind::Affine { budget } => {
            Some(affine_attack(p, test, budget, spec.steps, spec.step_size)?)
        }
        _ => None,
    };
    let mut correct = 0usize;
    for (j, &y) in labels.iter().enumerate() {
        let x = test.sample(j);
        let attacked = match spec.kind {
            AttackKind::None => x,
            AttackKind::Affine { .. } => apply(shift.as_ref().unwrap(), &x)?,
            AttackKind::Fgm { eps } => fgm_attack(p, &x, Target::Class(y), eps)?,
            AttackKind::Pgd { eps } => {
                pgd_attack(p, &x, Target::Class(y), eps, spec.steps, spec.step_size)?
            }
        };
        if predict(p, &attacked)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{mean_loss, Activation};
    use crate::numerics::{gaussian_matrix, gaussian_sample, Matrix, RngStream};

    fn toy(seed: u64) -> (ModelParams, Batch) {
        let p = ModelParams::init(&[3, 6, 4], Activation::Elu, Head::SoftmaxXent, seed).unwrap();
        let f = gaussian_matrix(&RngStream::new(seed, 9), 20, 3, 1.0);
        let labels = (0..20).map(|j| j % 4).collect();
        (p, Batch::new(f, Labels::Class(labels)).unwrap())
    }

    #[test]
    fn affine_attack_trivial_cases() {
        let (p, b) = toy(1);
        let budget = ShiftBudget::new(0.5, 0.5).unwrap();
        assert_eq!(
            affine_attack(&p, &b, budget, 0, 0.1).unwrap(),
            AffineShift::identity(3)
        );
        let zero = ShiftBudget::new(0.0, 0.0).unwrap();
        assert_eq!(
            affine_attack(&p, &b, zero, 25, 0.1).unwrap(),
            AffineShift::identity(3)
        );
    }

    #[test]
    fn affine_attack_respects_budget_and_raises_loss() {
        let (p, b) = toy(2);
        let budget = ShiftBudget::new(0.4, 1.0).unwrap();
        let s = affine_attack(
            &p,
            &b,
            budget,
            DEFAULT_AFFINE_STEPS,
            DEFAULT_AFFINE_STEP_SIZE,
        )
        .unwrap();
        assert!(s.lambda_dev_sq().sqrt() <= 0.4 + 1e-12);
        assert!(s.delta.norm() <= 1.0 + 1e-12);
        let shifted = evaluate(&p, &s, &b, None, 0.0, false).unwrap().data_loss;
        assert!(shifted > mean_loss(&p, &b).unwrap());
    }

    #[test]
    fn affine_attack_loss_monotone_in_steps_for_small_steps() {
        let (p, b) = toy(3);
        let budget = ShiftBudget::new(0.3, 0.5).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for steps in [0, 1, 2, 5, 10, 20, 40] {
            let s = affine_attack(&p, &b, budget, steps, 0.02).unwrap();
            let l = evaluate(&p, &s, &b, None, 0.0, false).unwrap().data_loss;
            assert!(l >= prev - 1e-12, "steps {steps}: {l} < {prev}");
            prev = l;
        }
    }

    #[test]
    fn fgm_examples() {
        let (p, _) = toy(4);
        let x = Vector::from_vec(vec![0.3, -0.2, 0.9]);
        assert_eq!(fgm_attack(&p, &x, Target::Class(1), 0.0).unwrap(), x);

        // linear binary model: the input gradient of the loss is ±(w₀ − w₁)
        let mut lin = ModelParams::zeros(&[2, 2], Activation::Elu, Head::SoftmaxXent).unwrap();
        lin.weights[0] = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.0, 0.0]]).unwrap();
        let x = Vector::zeros(2);
        let adv = fgm_attack(&lin, &x, Target::Class(0), 0.5).unwrap();
        // pushing away from class 0 means moving along -(1, -2)
        let dir = Vector::from_vec(vec![-1.0, 2.0]).scaled(0.5 / 5f64.sqrt());
        assert!(adv.sub(&dir).norm() < 1e-12);
    }

    #[test]
    fn fgm_increases_loss_for_small_eps() {
        for seed in 0..100u64 {
            let p =
                ModelParams::init(&[3, 5, 3], Activation::Elu, Head::SoftmaxXent, seed).unwrap();
            let x = gaussian_sample(&RngStream::new(seed, 3), 3, 0.0, 1.0);
            let y = Target::Class((seed % 3) as usize);
            let before = input_grad(&p, &x, y).unwrap().0;
            let after = input_grad(&p, &fgm_attack(&p, &x, y, 1e-3).unwrap(), y)
                .unwrap()
                .0;
            assert!(after >= before, "seed {seed}");
        }
    }

    #[test]
    fn pgd_examples_and_ordering() {
        let (p, _) = toy(5);
        let x = Vector::from_vec(vec![0.1, 0.5, -0.4]);
        let y = Target::Class(2);
        assert_eq!(pgd_attack(&p, &x, y, 0.0, 10, 0.1).unwrap(), x);
        let eps = 0.3;
        let g = input_grad(&p, &x, y).unwrap().1;
        let one = pgd_attack(&p, &x, y, eps, 1, eps * 2.0).unwrap();
        let fgm = fgm_attack(&p, &x, y, eps).unwrap();
        assert!(
            one.sub(&fgm).norm() < 1e-12,
            "{:?} vs {:?} (g {:?})",
            one,
            fgm,
            g
        );

        let mut ordered = 0;
        for seed in 0..100u64 {
            let p = ModelParams::init(&[3, 8, 3], Activation::Elu, Head::SoftmaxXent, 1000 + seed)
                .unwrap();
            let x = gaussian_sample(&RngStream::new(seed, 4), 3, 0.0, 1.0);
            let y = Target::Class((seed % 3) as usize);
            let eps = 0.5;
            let clean = input_grad(&p, &x, y).unwrap().0;
            let lf = input_grad(&p, &fgm_attack(&p, &x, y, eps).unwrap(), y)
                .unwrap()
                .0;
            let lp = input_grad(
                &p,
                &pgd_attack(&p, &x, y, eps, 10, 2.5 * eps / 10.0).unwrap(),
                y,
            )
            .unwrap()
            .0;
            if lp >= lf && lf >= clean {
                ordered += 1;
            }
        }
        assert!(ordered >= 95, "only {ordered}/100 ordered");
    }

    #[test]
    fn robust_accuracy_oracle_and_tie_rule() {
        // logits equal the one-hot input
        let mut oracle = ModelParams::zeros(&[3, 3], Activation::Elu, Head::SoftmaxXent).unwrap();
        oracle.weights[0] = Matrix::identity(3);
        let f = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let b = Batch::new(f.clone(), Labels::Class(vec![0, 1, 2])).unwrap();
        assert_eq!(
            robust_accuracy(&oracle, &b, &AttackSpec::none()).unwrap(),
            1.0
        );

        let constant = ModelParams::zeros(&[3, 10], Activation::Elu, Head::SoftmaxXent).unwrap();
        let f = gaussian_matrix(&RngStream::new(1, 1), 50, 3, 1.0);
        let balanced = Batch::new(f, Labels::Class((0..50).map(|j| j % 10).collect())).unwrap();
        assert!(
            (robust_accuracy(&constant, &balanced, &AttackSpec::none()).unwrap() - 0.1).abs()
                < 1e-15
        );
    }

    #[test]
    fn clean_accuracy_ignores_budget_fields() {
        let (p, b) = toy(6);
        let a = robust_accuracy(&p, &b, &AttackSpec::none()).unwrap();
        let spec = AttackSpec {
            kind: AttackKind::None,
            steps: 7,
            step_size: 3.0,
        };
        assert_eq!(a, robust_accuracy(&p, &b, &spec).unwrap());
    }

    #[test]
    fn per_sample_attacks_respect_radius() {
        let (p, b) = toy(7);
        for j in 0..b.len() {
            let x = b.sample(j);
            let y = b.labels.target(j);
            for eps in [0.01, 0.3, 2.0] {
                assert!(fgm_attack(&p, &x, y, eps).unwrap().sub(&x).norm() <= eps + 1e-12);
                assert!(pgd_attack(&p, &x, y, eps, 10, eps).unwrap().sub(&x).norm() <= eps + 1e-12);
            }
        }
    }

    #[test]
    fn rejects_regression_models() {
        let p = ModelParams::zeros(&[2, 1], Activation::Elu, Head::SquaredError).unwrap();
        let b = Batch::new(Matrix::zeros(1, 2), Labels::Real(vec![0.0])).unwrap();
        assert_eq!(
            robust_accuracy(&p, &b, &AttackSpec::none()),
            Err(Error::WrongHead)
        );
    }
}
