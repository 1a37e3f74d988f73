//! Measurable ingredients of the margin-based generalization analysis, plus
//! gradient heterogeneity on real node data.

use crate::error::{Error, Result};
use crate::fedopt::NodeState;
use crate::model::{evaluate, margin, Batch, Head, Labels, ModelParams};
use crate::numerics::{spectral_norm, SPECTRAL_MAX_ITER, SPECTRAL_TOL};
use crate::perturb::{apply, AffineShift};

/// Average over nodes of the fraction of shifted samples whose margin is at
/// most `gamma`. A margin of exactly zero counts as an error.
pub fn margin_risk(
    p: &ModelParams,
    shifted_sets: &[(Batch, AffineShift)],
    gamma: f64,
) -> Result<f64> {
    if p.head != Head::SoftmaxXent {
        return Err(Error::WrongHead);
    }
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument {
            name: "gamma",
            reason: format!("must be nonnegative, got {gamma}"),
        });
    }
    if shifted_sets.is_empty() {
        return Err(Error::InvalidArgument {
            name: "shifted_sets",
            reason: "no nodes".into(),
        });
    }
    let mut total = 0.0;
    for (batch, shift) in shifted_sets {
        let Labels::Class(labels) = &batch.labels else {
            return Err(Error::WrongHead);
        };
        if batch.is_empty() {
            return Err(Error::InvalidArgument {
                name: "shifted_sets",
                reason: "empty node set".into(),
            });
        }
        let mut caught = 0usize;
        for (j, &y) in labels.iter().enumerate() {
            if margin(p, &apply(shift, &batch.sample(j))?, y)? <= gamma {
                caught += 1;
            }
        }
        total += caught as f64 / batch.len() as f64;
    }
    Ok(total / shifted_sets.len() as f64)
}

/// Norm-based capacity quantities of a layered model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralComplexity {
    /// `∏ᵢ ‖Wᵢ‖_σ`
    pub prod_spec: f64,
    /// `Σᵢ ‖Wᵢ‖²_F / ‖Wᵢ‖²_σ`
    pub fro_ratio_sum: f64,
    /// Smoothness proxy `Σᵢ ∏_{j≤i} ‖Wⱼ‖_σ`.
    pub lip_grad: f64,
    /// `(∏ᵢ ‖Wᵢ‖_σ)^{1/L}`
    pub geo_mean: f64,
}

impl SpectralComplexity {
    /// The product of the first two terms, an unnormalized complexity score.
    pub fn score(&self) -> f64 {
        self.prod_spec * self.fro_ratio_sum
    }

    /// Whether the geometric mean of the layer norms lies in `[1/M, M]`.
    pub fn within_window(&self, m: f64) -> bool {
        self.geo_mean >= 1.0 / m && self.geo_mean <= m
    }
}

pub fn spectral_complexity(p: &ModelParams) -> Result<SpectralComplexity> {
    let mut prod_spec = 1.0;
    let mut fro_ratio_sum = 0.0;
    let mut lip_grad = 0.0;
    for (layer, w) in p.weights.iter().enumerate() {
        let s = spectral_norm(w, SPECTRAL_TOL, SPECTRAL_MAX_ITER)?;
        if s == 0.0 {
            return Err(Error::ZeroLayer { layer });
        }
        prod_spec *= s;
        fro_ratio_sum += w.frobenius_norm_sq() / (s * s);
        lip_grad += prod_spec;
    }
    let geo_mean = prod_spec.powf(1.0 / p.weights.len() as f64);
    Ok(SpectralComplexity {
        prod_spec,
        fro_ratio_sum,
        lip_grad,
        geo_mean,
    })
}

/// Variance of the full-batch local model gradients around their mean, all
/// taken at the identity shift.
pub fn heterogeneity(nodes: &[NodeState<Batch>], w: &ModelParams) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::InvalidArgument {
            name: "nodes",
            reason: "no nodes".into(),
        });
    }
    let mut order: Vec<&NodeState<Batch>> = nodes.iter().collect();
    order.sort_by_key(|n| n.id);
    let identity = AffineShift::identity(w.input_dim());
    let grads = order
        .iter()
        .map(|n| Ok(evaluate(w, &identity, &n.data, None, 0.0, true)?.grad_w))
        .collect::<Result<Vec<_>>>()?;
    let k = grads.len() as f64;
    let mut mean = w.zeros_like();
    grads.iter().for_each(|g| mean.axpy(1.0 / k, g));
    Ok(grads
        .iter()
        .map(|g| {
            let mut d = g.clone();
            d.axpy(-1.0, &mean);
            d.norm_sq()
        })
        .sum::<f64>()
        / k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{robust_accuracy, AttackSpec};
    use crate::model::{forward, Activation};
    use crate::numerics::{gaussian_matrix, Matrix, RngStream, Vector};

    fn blobs(seed: u64, n: usize) -> Batch {
        let noise = gaussian_matrix(&RngStream::new(seed, 0), n, 2, 0.3);
        let labels: Vec<usize> = (0..n).map(|j| j % 2).collect();
        let x = Matrix::from_fn(n, 2, |j, k| {
            noise[(j, k)] + if labels[j] == 1 { 2.0 } else { -2.0 }
        });
        Batch::new(x, Labels::Class(labels)).unwrap()
    }

    fn separator() -> ModelParams {
        let mut p = ModelParams::zeros(&[2, 2], Activation::Relu, Head::SoftmaxXent).unwrap();
        p.weights[0] = Matrix::from_rows(&[vec![-1.0, -1.0], vec![1.0, 1.0]]).unwrap();
        p
    }

    #[test]
    fn perfect_model_has_zero_risk_and_huge_gamma_catches_all() {
        let p = separator();
        let sets = vec![
            (blobs(1, 50), AffineShift::identity(2)),
            (blobs(2, 30), AffineShift::identity(2)),
        ];
        assert_eq!(margin_risk(&p, &sets, 0.0).unwrap(), 0.0);
        assert_eq!(margin_risk(&p, &sets, 1e6).unwrap(), 1.0);
    }

    #[test]
    fn zero_gamma_matches_robust_accuracy() {
        let p = ModelParams::init(&[2, 5, 3], Activation::Elu, Head::SoftmaxXent, 4).unwrap();
        let mut b = blobs(3, 60);
        b.labels = Labels::Class((0..60).map(|j| j % 3).collect());
        let mut shift = AffineShift::identity(2);
        shift.delta = Vector::from_vec(vec![0.3, -0.2]);
        let shifted = Batch::new(
            Matrix::from_fn(60, 2, |j, k| apply(&shift, &b.sample(j)).unwrap()[k]),
            b.labels.clone(),
        )
        .unwrap();
        let risk = margin_risk(&p, &[(b, shift)], 0.0).unwrap();
        let acc = robust_accuracy(&p, &shifted, &AttackSpec::none()).unwrap();
        assert!((risk - (1.0 - acc)).abs() < 1e-12);
    }

    #[test]
    fn risk_is_monotone_in_gamma() {
        let p = ModelParams::init(&[2, 4, 2], Activation::Elu, Head::SoftmaxXent, 5).unwrap();
        let sets = vec![(blobs(6, 80), AffineShift::identity(2))];
        let mut prev = 0.0;
        for k in 0..40 {
            let r = margin_risk(&p, &sets, 0.05 * k as f64).unwrap();
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn regression_head_rejected() {
        let p = ModelParams::zeros(&[2, 1], Activation::Elu, Head::SquaredError).unwrap();
        assert_eq!(
            margin_risk(&p, &[(blobs(1, 4), AffineShift::identity(2))], 0.0),
            Err(Error::WrongHead)
        );
    }

    #[test]
    fn orthogonal_and_scalar_networks() {
        let mut p = ModelParams::zeros(&[3, 3, 3], Activation::Elu, Head::SoftmaxXent).unwrap();
        p.weights[0] = Matrix::identity(3);
        p.weights[1] = Matrix::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
        ])
        .unwrap();
        let c = spectral_complexity(&p).unwrap();
        assert!((c.prod_spec - 1.0).abs() < 1e-9);
        assert!((c.lip_grad - 2.0).abs() < 1e-9);
        assert!((c.fro_ratio_sum - 6.0).abs() < 1e-9);

        let mut s = ModelParams::zeros(&[1, 1], Activation::Elu, Head::SoftmaxXent).unwrap();
        s.weights[0] = Matrix::from_rows(&[vec![-2.5]]).unwrap();
        let c = spectral_complexity(&s).unwrap();
        assert!((c.prod_spec - 2.5).abs() < 1e-12);
        assert!((c.fro_ratio_sum - 1.0).abs() < 1e-12);
        assert!((c.lip_grad - 2.5).abs() < 1e-12);
    }

    #[test]
    fn zero_layer_rejected() {
        let mut p = ModelParams::init(&[3, 4, 2], Activation::Elu, Head::SoftmaxXent, 1).unwrap();
        p.weights[1] = Matrix::zeros(2, 4);
        assert_eq!(spectral_complexity(&p), Err(Error::ZeroLayer { layer: 1 }));
    }

    #[test]
    fn layer_scaling_is_homogeneous() {
        let p = ModelParams::init(&[5, 6, 4, 3], Activation::Elu, Head::SoftmaxXent, 9).unwrap();
        let base = spectral_complexity(&p).unwrap();
        let mut q = p.clone();
        q.weights[1].scale(3.0);
        let scaled = spectral_complexity(&q).unwrap();
        assert!((scaled.prod_spec - 3.0 * base.prod_spec).abs() < 1e-8 * base.prod_spec);
        assert!((scaled.fro_ratio_sum - base.fro_ratio_sum).abs() < 1e-8);
    }

    #[test]
    fn neuron_permutation_preserves_smoothness_proxy() {
        let p = ModelParams::init(&[4, 5, 3], Activation::Elu, Head::SoftmaxXent, 10).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut q = p.clone();
        q.weights[0] = Matrix::from_fn(5, 4, |i, j| p.weights[0][(perm[i], j)]);
        q.weights[1] = Matrix::from_fn(3, 5, |i, j| p.weights[1][(i, perm[j])]);
        q.biases[0] = Vector::from_fn(5, |i| p.biases[0][perm[i]]);
        let x = Vector::from_vec(vec![0.1, -0.4, 0.7, 0.2]);
        assert!(
            forward(&p, &x)
                .unwrap()
                .sub(&forward(&q, &x).unwrap())
                .norm()
                < 1e-12
        );
        let (a, b) = (
            spectral_complexity(&p).unwrap(),
            spectral_complexity(&q).unwrap(),
        );
        assert!((a.lip_grad - b.lip_grad).abs() < 1e-8 * a.lip_grad);
    }

    fn node(id: usize, data: Batch) -> NodeState<Batch> {
        let w = ModelParams::zeros(&[2, 2], Activation::Elu, Head::SoftmaxXent).unwrap();
        NodeState::new(id, data, w, 0).unwrap()
    }

    #[test]
    fn heterogeneity_cases() {
        let w = ModelParams::init(&[2, 3, 2], Activation::Elu, Head::SoftmaxXent, 2).unwrap();
        let same = vec![node(0, blobs(1, 20)), node(1, blobs(1, 20))];
        assert!(heterogeneity(&same, &w).unwrap() < 1e-28);
        assert_eq!(heterogeneity(&[node(0, blobs(1, 20))], &w).unwrap(), 0.0);

        let nodes: Vec<_> = (0..4).map(|i| node(i, blobs(10 + i as u64, 20))).collect();
        let h = heterogeneity(&nodes, &w).unwrap();
        let mut rev = nodes.clone();
        rev.reverse();
        assert_eq!(h, heterogeneity(&rev, &w).unwrap());
        assert!(h > 0.0);
    }

    #[test]
    fn two_opposite_gradients_give_their_squared_norm() {
        // squared error on a linear model: gradients at w = 0 are −x·y
        let w = ModelParams::zeros(&[1, 1], Activation::Elu, Head::SquaredError).unwrap();
        let a = Batch::new(
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
            Labels::Real(vec![2.0]),
        )
        .unwrap();
        let b = Batch::new(
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
            Labels::Real(vec![-2.0]),
        )
        .unwrap();
        let mk = |id, d| NodeState::new(id, d, w.clone(), 0).unwrap();
        let nodes = vec![mk(0, a.clone()), mk(1, b)];
        let g = evaluate(&w, &AffineShift::identity(1), &a, None, 0.0, true)
            .unwrap()
            .grad_w;
        assert!((heterogeneity(&nodes, &w).unwrap() - g.norm_sq()).abs() < 1e-12);
    }
}
