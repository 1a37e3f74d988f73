//! Layered predictors with hand-written reverse mode.
//!
//! Gradients are produced with respect to the parameters and the (shifted)
//! input; the input gradient is pushed through `u = Λx + δ` to get the shift
//! gradient.

use crate::error::{check_dim, Error, Result};
use crate::numerics::{dot, gaussian_matrix, Matrix, Purpose, RngStream, Vector};
use crate::perturb::{penalty, penalty_grad, AffineShift};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn eval(self, t: f64) -> f64 {
        match self {
            Activation::Elu => {
                if t > 0.0 {
                    t
                } else {
                    t.exp_m1()
                }
            }
            Activation::Relu => t.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Activation::Elu => {
                if t > 0.0 {
                    1.0
                } else {
                    t.exp()
                }
            }
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    SoftmaxXent,
    SquaredError,
}

/// Targets of a batch; the variant must match the model head.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Class(Vec<usize>),
    Real(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn target(&self, i: usize) -> Target {
        match self {
            Labels::Class(v) => Target::Class(v[i]),
            Labels::Real(v) => Target::Real(v[i]),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Labels {
        match self {
            Labels::Class(v) => Labels::Class(rows.iter().map(|&r| v[r]).collect()),
            Labels::Real(v) => Labels::Real(rows.iter().map(|&r| v[r]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Real(f64),
}

/// Features (one sample per row) and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Labels,
}

impl Batch {
    pub fn new(features: Matrix, labels: Labels) -> Result<Self> {
        check_dim(features.rows(), labels.len())?;
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> Vector {
        Vector::from_vec(self.features.row(i).to_vec())
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.features.row(r));
        }
        Batch {
            features: Matrix::new(rows.len(), d, data).expect("rows of a valid matrix"),
            labels: self.labels.select(rows),
        }
    }
}

/// Weights and biases of an affine-activation stack whose last layer is
/// linear.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: Vec<usize>,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
    pub activation: Activation,
    pub head: Head,
}

impl ModelParams {
    /// All-zero parameters for the topology `dims` (input first).
    pub fn zeros(dims: &[usize], activation: Activation, head: Head) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument {
                name: "dims",
                reason: format!("need at least two positive layer sizes, got {dims:?}"),
            });
        }
        if head == Head::SquaredError && *dims.last().unwrap() != 1 {
            return Err(Error::InvalidArgument {
                name: "dims",
                reason: "squared-error head needs one output".into(),
            });
        }
        let weights = dims.windows(2).map(|w| Matrix::zeros(w[1], w[0])).collect();
        let biases = dims[1..].iter().map(|&d| Vector::zeros(d)).collect();
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
            activation,
            head,
        })
    }

    /// Gaussian initialization with variance `1/fan_in`, zero biases.
    pub fn init(dims: &[usize], activation: Activation, head: Head, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims, activation, head)?;
        for (l, w) in p.weights.iter_mut().enumerate() {
            let stream = RngStream::derive(seed, Purpose::Init, l as u64, 0);
            *w = gaussian_matrix(&stream, w.rows(), w.cols(), 1.0 / (w.cols() as f64).sqrt());
        }
        Ok(p)
    }

    /// Checks the shape invariants of a hand-assembled model.
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2
            || self.weights.len() != self.dims.len() - 1
            || self.biases.len() != self.weights.len()
        {
            return Err(Error::TopologyMismatch);
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            check_dim(self.dims[l], w.cols())?;
            check_dim(self.dims[l + 1], w.rows())?;
            check_dim(self.dims[l + 1], b.len())?;
            if !w.is_finite() || !b.is_finite() {
                return Err(Error::NonFinite { iteration: None });
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .map(|w| w.rows() * w.cols())
            .sum::<usize>()
            + self.biases.iter().map(Vector::len).sum::<usize>()
    }

    pub fn same_topology(&self, other: &ModelParams) -> bool {
        self.dims == other.dims && self.activation == other.activation && self.head == other.head
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims, self.activation, self.head).expect("valid topology")
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &ModelParams) {
        for (a, b) in self.weights.iter_mut().zip(&x.weights) {
            a.axpy(alpha, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&x.biases) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.weights.iter_mut().for_each(|w| w.scale(alpha));
        self.biases.iter_mut().for_each(|b| b.scale(alpha));
    }

    pub fn norm_sq(&self) -> f64 {
        self.weights
            .iter()
            .map(Matrix::frobenius_norm_sq)
            .sum::<f64>()
            + self.biases.iter().map(Vector::norm_sq).sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite) && self.biases.iter().all(Vector::is_finite)
    }

    /// Parameters in layer order, each layer's weights (row-major) then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.num_params(), flat.len())?;
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Per-sample forward/backward workspace.
struct Tape {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn forward_tape(p: &ModelParams, u: &[f64]) -> Tape {
    let layers = p.num_layers();
    let mut pre = Vec::with_capacity(layers);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
    post.push(u.to_vec());
    for l in 0..layers {
        let w = &p.weights[l];
        let input = &post[l];
        let z: Vec<f64> = (0..w.rows())
            .map(|i| dot(w.row(i), input) + p.biases[l][i])
            .collect();
        let a = if l + 1 < layers {
            z.iter().map(|&t| p.activation.eval(t)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        post.push(a);
    }
    Tape { pre, post }
}

/// Numerically stable `log Σ exp(z)`.
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn head_loss(head: Head, out: &[f64], target: Target) -> Result<(f64, Vec<f64>)> {
    match (head, target) {
        (Head::SoftmaxXent, Target::Class(y)) => {
            if y >= out.len() {
                return Err(Error::InvalidArgument {
                    name: "labels",
                    reason: format!("class {y} out of range"),
                });
            }
            let lse = log_sum_exp(out);
            let mut grad: Vec<f64> = out.iter().map(|&v| (v - lse).exp()).collect();
            grad[y] -= 1.0;
            Ok((lse - out[y], grad))
        }
        (Head::SquaredError, Target::Real(y)) => {
            let r = out[0] - y;
            Ok((0.5 * r * r, vec![r]))
        }
        _ => Err(Error::WrongHead),
    }
}

/// Backward pass for one sample. Adds `scale * ∂loss/∂w` into `grad_w` when
/// given and returns `∂loss/∂u`.
fn backward(
    p: &ModelParams,
    tape: &Tape,
    out_grad: Vec<f64>,
    scale: f64,
    grad_w: Option<&mut ModelParams>,
) -> Vec<f64> {
    let layers = p.num_layers();
    let mut delta = out_grad;
    let mut grad_w = grad_w;
    for l in (0..layers).rev() {
        if let Some(g) = grad_w.as_deref_mut() {
            let input = &tape.post[l];
            let gw = &mut g.weights[l];
            for (i, &di) in delta.iter().enumerate() {
                let s = scale * di;
                if s != 0.0 {
                    for (o, &a) in gw.row_mut(i).iter_mut().zip(input) {
                        *o += s * a;
                    }
                }
                g.biases[l][i] += s;
            }
        }
        let w = &p.weights[l];
        let mut prev = vec![0.0; w.cols()];
        for (i, &di) in delta.iter().enumerate() {
            if di != 0.0 {
                for (o, &wij) in prev.iter_mut().zip(w.row(i)) {
                    *o += wij * di;
                }
            }
        }
        if l > 0 {
            for (o, &z) in prev.iter_mut().zip(&tape.pre[l - 1]) {
                *o *= p.activation.derivative(z);
            }
        }
        delta = prev;
    }
    delta
}

/// Model output: logits for the softmax head, the prediction otherwise.
pub fn forward(p: &ModelParams, x: &Vector) -> Result<Vector> {
    check_dim(p.input_dim(), x.len())?;
    let tape = forward_tape(p, x.as_slice());
    Ok(Vector::from_vec(tape.post.into_iter().last().unwrap()))
}

/// Loss of one sample and its gradient with respect to the input.
pub fn input_grad(p: &ModelParams, x: &Vector, target: Target) -> Result<(f64, Vector)> {
    check_dim(p.input_dim(), x.len())?;
    let tape = forward_tape(p, x.as_slice());
    let (loss, og) = head_loss(p.head, tape.post.last().unwrap(), target)?;
    let g = backward(p, &tape, og, 1.0, None);
    Ok((loss, Vector::from_vec(g)))
}

/// Penalized local objective and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    /// `mean ℓ − penalty`
    pub loss: f64,
    /// `mean ℓ` over the evaluated rows.
    pub data_loss: f64,
    /// `λ‖Λ − I‖²_F + λ‖δ‖²`
    pub penalty: f64,
    /// Gradient of `loss` w.r.t. the model; zero when not requested.
    pub grad_w: ModelParams,
    /// Gradient of `loss` w.r.t. `(Λ, δ)`.
    pub grad_shift: AffineShift,
}

/// Evaluates `mean_j ℓ(f_w(Λx_j + δ), y_j) − λ‖Λ−I‖²_F − λ‖δ‖²` on `rows` of
/// the batch (all rows when `None`).
pub(crate) fn evaluate(
    p: &ModelParams,
    shift: &AffineShift,
    batch: &Batch,
    rows: Option<&[usize]>,
    lam: f64,
    want_w: bool,
) -> Result<LossGrads> {
    let d = p.input_dim();
    check_dim(d, batch.dim())?;
    check_dim(d, shift.dim())?;
    let count = rows.map_or(batch.len(), <[usize]>::len);
    if count == 0 {
        return Err(Error::InvalidArgument {
            name: "batch",
            reason: "empty batch".into(),
        });
    }
    let inv = 1.0 / count as f64;
    let mut grad_w = p.zeros_like();
    let mut grad_shift = AffineShift::zeros(d);
    let mut total = 0.0;
    let mut u = vec![0.0; d];
    let mut visit = |j: usize| -> Result<()> {
        let x = batch.features.row(j);
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = dot(shift.lambda.row(i), x) + shift.delta[i];
        }
        let tape = forward_tape(p, &u);
        let (loss, og) = head_loss(p.head, tape.post.last().unwrap(), batch.labels.target(j))?;
        total += loss;
        let g = backward(p, &tape, og, inv, want_w.then_some(&mut grad_w));
        for (i, &gi) in g.iter().enumerate() {
            let s = inv * gi;
            grad_shift.delta[i] += s;
            if s != 0.0 {
                for (o, &xk) in grad_shift.lambda.row_mut(i).iter_mut().zip(x) {
                    *o += s * xk;
                }
            }
        }
        Ok(())
    };
    match rows {
        Some(r) => r.iter().try_for_each(|&j| visit(j))?,
        None => (0..batch.len()).try_for_each(&mut visit)?,
    }
    let data_loss = total * inv;
    let pen = if lam > 0.0 { penalty(shift, lam) } else { 0.0 };
    if lam > 0.0 {
        grad_shift.axpy(-1.0, &penalty_grad(shift, lam));
    }
    let loss = data_loss - pen;
    if !loss.is_finite() {
        return Err(Error::NonFinite { iteration: None });
    }
    Ok(LossGrads {
        loss,
        data_loss,
        penalty: pen,
        grad_w,
        grad_shift,
    })
}

/// Penalized local loss on the whole batch with gradients w.r.t. the model
/// and the shift.
pub fn loss_and_grads(
    p: &ModelParams,
    shift: &AffineShift,
    batch: &Batch,
    lam: f64,
) -> Result<LossGrads> {
    if !(lam > 0.0) {
        return Err(Error::InvalidArgument {
            name: "lam",
            reason: format!("must be positive, got {lam}"),
        });
    }
    evaluate(p, shift, batch, None, lam, true)
}

/// Mean unpenalized loss of the batch as given.
pub fn mean_loss(p: &ModelParams, batch: &Batch) -> Result<f64> {
    Ok(evaluate(
        p,
        &AffineShift::identity(p.input_dim()),
        batch,
        None,
        0.0,
        false,
    )?
    .data_loss)
}

/// True-class logit minus the best competing logit.
pub fn margin(p: &ModelParams, x: &Vector, y: usize) -> Result<f64> {
    if p.head != Head::SoftmaxXent {
        return Err(Error::WrongHead);
    }
    let logits = forward(p, x)?;
    if y >= logits.len() {
        return Err(Error::InvalidArgument {
            name: "y",
            reason: format!("class {y} out of range"),
        });
    }
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[y] - best_other)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict(p: &ModelParams, x: &Vector) -> Result<usize> {
    let logits = forward(p, x)?;
    let mut best = 0;
    for j in 1..logits.len() {
        if logits[j] > logits[best] {
            best = j;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian_sample;
    use crate::perturb::sample_node_shift;

    fn random_batch(seed: u64, b: usize, d: usize, head: Head, classes: usize) -> Batch {
        let features = gaussian_matrix(&RngStream::new(seed, 1), b, d, 1.0);
        let labels = match head {
            Head::SoftmaxXent => {
                Labels::Class((0..b).map(|i| (i * 7 + seed as usize) % classes).collect())
            }
            Head::SquaredError => {
                Labels::Real(gaussian_sample(&RngStream::new(seed, 2), b, 0.0, 1.0).into_vec())
            }
        };
        Batch::new(features, labels).unwrap()
    }

    /// Independent scalar-by-scalar forward pass.
    fn naive_forward(p: &ModelParams, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in 0..p.num_layers() {
            let w = &p.weights[l];
            let mut z = vec![0.0; w.rows()];
            for i in 0..w.rows() {
                let mut s = p.biases[l][i];
                for j in 0..w.cols() {
                    s += w[(i, j)] * a[j];
                }
                z[i] = s;
            }
            if l + 1 < p.num_layers() {
                for v in z.iter_mut() {
                    *v = if *v > 0.0 {
                        *v
                    } else if p.activation == Activation::Elu {
                        v.exp() - 1.0
                    } else {
                        0.0
                    };
                }
            }
            a = z;
        }
        a
    }

    #[test]
    fn forward_examples() {
        let p = ModelParams::zeros(&[3, 4, 5], Activation::Elu, Head::SoftmaxXent).unwrap();
        assert!(forward(&p, &Vector::from_vec(vec![1.0, -2.0, 3.0]))
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));

        let mut p = ModelParams::zeros(&[2, 1], Activation::Elu, Head::SquaredError).unwrap();
        p.weights[0] = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        p.biases[0] = Vector::from_vec(vec![3.0]);
        assert_eq!(
            forward(&p, &Vector::from_vec(vec![1.0, 1.0]))
                .unwrap()
                .as_slice(),
            &[6.0]
        );

        let p = ModelParams::init(&[4, 6, 3], Activation::Elu, Head::SoftmaxXent, 3).unwrap();
        let x = gaussian_sample(&RngStream::new(4, 0), 4, 0.0, 1.0);
        let fast = forward(&p, &x).unwrap();
        let slow = naive_forward(&p, x.as_slice());
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-13);
        }
        assert!(matches!(
            forward(&p, &Vector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn uniform_softmax_loss_is_log_k() {
        let p = ModelParams::zeros(&[5, 10], Activation::Elu, Head::SoftmaxXent).unwrap();
        let batch = random_batch(1, 8, 5, Head::SoftmaxXent, 10);
        let mut shift = AffineShift::identity(5);
        shift.delta[0] = 0.5;
        let lam = 0.3;
        let r = loss_and_grads(&p, &shift, &batch, lam).unwrap();
        assert!((r.data_loss - 10f64.ln()).abs() < 1e-14);
        assert!((r.loss - (10f64.ln() - lam * 0.25)).abs() < 1e-14);
        assert!((2.302585 - 10f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn identity_shift_has_no_penalty_contribution() {
        let p = ModelParams::init(&[3, 4, 2], Activation::Elu, Head::SoftmaxXent, 9).unwrap();
        let batch = random_batch(2, 6, 3, Head::SoftmaxXent, 2);
        let id = AffineShift::identity(3);
        let a = loss_and_grads(&p, &id, &batch, 0.1).unwrap();
        let b = loss_and_grads(&p, &id, &batch, 100.0).unwrap();
        assert_eq!(a.penalty, 0.0);
        assert_eq!(a.grad_shift, b.grad_shift);
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn loss_rejects_bad_inputs() {
        let p = ModelParams::zeros(&[3, 2], Activation::Elu, Head::SoftmaxXent).unwrap();
        let batch = random_batch(2, 4, 3, Head::SoftmaxXent, 2);
        assert!(loss_and_grads(&p, &AffineShift::identity(3), &batch, 0.0).is_err());
        assert!(matches!(
            loss_and_grads(&p, &AffineShift::identity(4), &batch, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
        let reg = random_batch(2, 4, 3, Head::SquaredError, 1);
        assert_eq!(
            loss_and_grads(&p, &AffineShift::identity(3), &reg, 1.0),
            Err(Error::WrongHead)
        );
    }

    #[test]
    fn stable_on_confident_logits() {
        let mut p = ModelParams::zeros(&[1, 2], Activation::Elu, Head::SoftmaxXent).unwrap();
        p.weights[0] = Matrix::from_rows(&[vec![1000.0], vec![-1000.0]]).unwrap();
        let batch = Batch::new(
            Matrix::from_rows(&[vec![5.0]]).unwrap(),
            Labels::Class(vec![1]),
        )
        .unwrap();
        let r = loss_and_grads(&p, &AffineShift::identity(1), &batch, 1.0).unwrap();
        assert!((r.data_loss - 10_000.0).abs() < 1e-9);
    }

    #[test]
    fn delta_gradient_equals_averaged_input_gradient() {
        let p = ModelParams::init(&[4, 5, 3], Activation::Elu, Head::SoftmaxXent, 21).unwrap();
        let batch = random_batch(5, 7, 4, Head::SoftmaxXent, 3);
        let shift = sample_node_shift(&RngStream::new(6, 0), 4, 0.4);
        let r = evaluate(&p, &shift, &batch, None, 0.0, false).unwrap();
        let mut avg = Vector::zeros(4);
        for j in 0..batch.len() {
            let u = crate::perturb::apply(&shift, &batch.sample(j)).unwrap();
            let (_, g) = input_grad(&p, &u, batch.labels.target(j)).unwrap();
            avg.axpy(1.0 / batch.len() as f64, &g);
        }
        assert!(avg.sub(&r.grad_shift.delta).norm() < 1e-14);
    }

    #[test]
    fn margin_examples() {
        let p = ModelParams::zeros(&[2, 3], Activation::Elu, Head::SoftmaxXent).unwrap();
        assert_eq!(
            margin(&p, &Vector::from_vec(vec![1.0, 2.0]), 1).unwrap(),
            0.0
        );
        let mut p = ModelParams::zeros(&[1, 3], Activation::Elu, Head::SoftmaxXent).unwrap();
        p.biases[0] = Vector::from_vec(vec![3.0, 1.0, 0.0]);
        assert_eq!(margin(&p, &Vector::from_vec(vec![0.0]), 0).unwrap(), 2.0);
        let reg = ModelParams::zeros(&[1, 1], Activation::Elu, Head::SquaredError).unwrap();
        assert_eq!(margin(&reg, &Vector::zeros(1), 0), Err(Error::WrongHead));

        let p = ModelParams::init(&[3, 8, 4], Activation::Relu, Head::SoftmaxXent, 2).unwrap();
        let x = gaussian_sample(&RngStream::new(8, 8), 3, 0.0, 1.0);
        let logits = naive_forward(&p, x.as_slice());
        for y in 0..4 {
            let other = (0..4)
                .filter(|&j| j != y)
                .map(|j| logits[j])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((margin(&p, &x, y).unwrap() - (logits[y] - other)).abs() < 1e-13);
        }
    }

    #[test]
    fn elu_satisfies_smoothness_hypotheses() {
        assert_eq!(Activation::Elu.eval(0.0), 0.0);
        for k in -2000..=2000 {
            let t = k as f64 * 0.005;
            let dv = Activation::Elu.derivative(t);
            assert!(dv.abs() <= 1.0);
        }
    }

    #[test]
    fn flat_round_trip() {
        let p = ModelParams::init(&[3, 4, 2], Activation::Elu, Head::SoftmaxXent, 1).unwrap();
        let mut q = p.zeros_like();
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.to_flat().len(), p.num_params());
    }

    #[test]
    fn predict_breaks_ties_low() {
        let p = ModelParams::zeros(&[2, 4], Activation::Elu, Head::SoftmaxXent).unwrap();
        assert_eq!(predict(&p, &Vector::zeros(2)).unwrap(), 0);
    }
}
