//! Desk-scale differentiable models with hand-written backpropagation.
//!
//! Parameter layouts (row-major weights, biases after weights):
//!
//! * `Quadratic { dim }`: the point `w` itself; the loss lives in the batch.
//! * `LinearSoftmax`: `W (n_classes x in_dim)`, `b (n_classes)`.
//! * `Mlp`: `W1 (hidden x in_dim)`, `b1 (hidden)`, `W2 (n_classes x hidden)`,
//!   `b2 (n_classes)`, with a `tanh` hidden activation.
//!
//! Classification losses are softmax cross-entropy averaged over the batch.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use crate::data::QuadraticProblem;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng::{keyed_rng, TAG_INIT};

/// Standard deviation of the zero-mean Gaussian used by [`init_params`].
pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSpec {
    Quadratic { dim: usize },
    LinearSoftmax { in_dim: usize, n_classes: usize },
    Mlp { in_dim: usize, hidden: usize, n_classes: usize },
}

impl ModelSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            ModelSpec::Quadratic { dim } => dim,
            ModelSpec::LinearSoftmax { in_dim, n_classes } => n_classes * in_dim + n_classes,
            ModelSpec::Mlp {
                in_dim,
                hidden,
                n_classes,
            } => hidden * in_dim + hidden + n_classes * hidden + n_classes,
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, ModelSpec::Quadratic { .. })
    }

    pub fn n_classes(&self) -> Option<usize> {
        match *self {
            ModelSpec::Quadratic { .. } => None,
            ModelSpec::LinearSoftmax { n_classes, .. } | ModelSpec::Mlp { n_classes, .. } => Some(n_classes),
        }
    }
}

/// A mini-batch. For the quadratic family each "sample" is a client
/// objective `F_i`, and the batch loss is the mean over the listed clients.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Samples {
        /// Row-major `labels.len() x in_dim`.
        features: Vec<f64>,
        in_dim: usize,
        labels: Vec<usize>,
    },
    Quadratic {
        problem: Arc<QuadraticProblem>,
        clients: Vec<usize>,
    },
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Samples { labels, .. } => labels.len(),
            Batch::Quadratic { clients, .. } => clients.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = keyed_rng(seed, &[TAG_INIT]);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    ParamVector::new((0..spec.param_count()).map(|_| normal.sample(&mut rng)).collect())
}

fn check_inputs(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::contract(format!(
            "parameter vector has length {}, model expects {}",
            params.len(),
            spec.param_count()
        )));
    }
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    match (spec, batch) {
        (ModelSpec::Quadratic { dim }, Batch::Quadratic { problem, clients }) => {
            if problem.dim() != *dim {
                return Err(Error::contract(format!(
                    "quadratic problem has dim {}, model expects {dim}",
                    problem.dim()
                )));
            }
            if let Some(c) = clients.iter().find(|&&c| c >= problem.n_clients()) {
                return Err(Error::contract(format!("batch names unknown client {c}")));
            }
            Ok(())
        }
        (
            ModelSpec::LinearSoftmax { in_dim, n_classes } | ModelSpec::Mlp { in_dim, n_classes, .. },
            Batch::Samples {
                features,
                in_dim: batch_dim,
                labels,
            },
        ) => {
            if batch_dim != in_dim || features.len() != labels.len() * in_dim {
                return Err(Error::contract(format!(
                    "batch feature width {batch_dim} does not match model input {in_dim}"
                )));
            }
            if let Some(l) = labels.iter().find(|&&l| l >= *n_classes) {
                return Err(Error::contract(format!("label {l} outside [0, {n_classes})")));
            }
            Ok(())
        }
        _ => Err(Error::contract("batch kind does not match model kind")),
    }
}

/// Mean loss of `params` over `batch`.
pub fn forward_loss(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<f64> {
    check_inputs(spec, params, batch)?;
    Ok(eval(spec, params, batch, false).0)
}

/// Analytic gradient of [`forward_loss`] with respect to `params`.
pub fn gradient(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<ParamVector> {
    check_inputs(spec, params, batch)?;
    Ok(eval(spec, params, batch, true).1)
}

pub fn loss_and_gradient(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<(f64, ParamVector)> {
    check_inputs(spec, params, batch)?;
    Ok(eval(spec, params, batch, true))
}

/// Central differences `(f(w + h e_j) - f(w - h e_j)) / 2h` for every coordinate.
pub fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, w: &[f64], h: f64) -> Result<ParamVector> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = w.to_vec();
    let mut out = Vec::with_capacity(w.len());
    for j in 0..w.len() {
        probe[j] = w[j] + h;
        let up = f(&probe);
        probe[j] = w[j] - h;
        let down = f(&probe);
        probe[j] = w[j];
        out.push((up - down) / (2.0 * h));
    }
    Ok(ParamVector::new(out))
}

pub fn finite_diff_gradient(spec: &ModelSpec, params: &[f64], batch: &Batch, h: f64) -> Result<ParamVector> {
    check_inputs(spec, params, batch)?;
    finite_diff(|w| eval(spec, w, batch, false).0, params, h)
}

/// Class scores for a single feature row.
pub fn logits(spec: &ModelSpec, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    match *spec {
        ModelSpec::Quadratic { .. } => Err(Error::contract("quadratic model has no class scores")),
        ModelSpec::LinearSoftmax { in_dim, n_classes } => {
            check_row(params, spec, x, in_dim)?;
            Ok(affine(&params[..n_classes * in_dim], &params[n_classes * in_dim..], x))
        }
        ModelSpec::Mlp {
            in_dim,
            hidden,
            n_classes,
        } => {
            check_row(params, spec, x, in_dim)?;
            let l = MlpLayout::new(in_dim, hidden, n_classes);
            let h: Vec<f64> = affine(&params[l.w1()], &params[l.b1()], x)
                .into_iter()
                .map(f64::tanh)
                .collect();
            Ok(affine(&params[l.w2()], &params[l.b2()], &h))
        }
    }
}

fn check_row(params: &[f64], spec: &ModelSpec, x: &[f64], in_dim: usize) -> Result<()> {
    if params.len() != spec.param_count() || x.len() != in_dim {
        return Err(Error::contract("logits: parameter or feature length mismatch"));
    }
    Ok(())
}

/// `W x + b` for row-major `W`.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(r, &bias)| bias + w[r * n_in..(r + 1) * n_in].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

struct MlpLayout {
    in_dim: usize,
    hidden: usize,
    n_classes: usize,
}

impl MlpLayout {
    fn new(in_dim: usize, hidden: usize, n_classes: usize) -> Self {
        MlpLayout {
            in_dim,
            hidden,
            n_classes,
        }
    }
    fn w1(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.in_dim
    }
    fn b1(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.in_dim;
        s..s + self.hidden
    }
    fn w2(&self) -> std::ops::Range<usize> {
        let s = self.b1().end;
        s..s + self.n_classes * self.hidden
    }
    fn b2(&self) -> std::ops::Range<usize> {
        let s = self.w2().end;
        s..s + self.n_classes
    }
}

/// Softmax cross-entropy of `z` against `label`; overwrites `z` with
/// `softmax(z) - onehot(label)` when `want_grad`.
fn cross_entropy(z: &mut [f64], label: usize, want_grad: bool) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - z[label];
    if want_grad {
        for v in z.iter_mut() {
            *v = (*v - lse).exp();
        }
        z[label] -= 1.0;
    }
    loss
}

fn eval(spec: &ModelSpec, params: &[f64], batch: &Batch, want_grad: bool) -> (f64, ParamVector) {
    let mut grad = ParamVector::zeros(if want_grad { params.len() } else { 0 });
    let n = batch.len() as f64;
    let loss = match (*spec, batch) {
        (ModelSpec::Quadratic { .. }, Batch::Quadratic { problem, clients }) => {
            let mut total = 0.0;
            for &c in clients {
                total += problem.client_loss(c, params);
                if want_grad {
                    for (g, v) in grad.iter_mut().zip(problem.client_gradient(c, params).iter()) {
                        *g += v;
                    }
                }
            }
            total
        }
        (ModelSpec::LinearSoftmax { in_dim, n_classes }, Batch::Samples { features, labels, .. }) => {
            let (w, b) = params.split_at(n_classes * in_dim);
            let mut total = 0.0;
            for (x, &y) in features.chunks_exact(in_dim).zip(labels) {
                let mut z = affine(w, b, x);
                total += cross_entropy(&mut z, y, want_grad);
                if want_grad {
                    let (gw, gb) = grad.split_at_mut(n_classes * in_dim);
                    for (r, dz) in z.iter().enumerate() {
                        gb[r] += dz;
                        for (gwv, xv) in gw[r * in_dim..(r + 1) * in_dim].iter_mut().zip(x) {
                            *gwv += dz * xv;
                        }
                    }
                }
            }
            total
        }
        (
            ModelSpec::Mlp {
                in_dim,
                hidden,
                n_classes,
            },
            Batch::Samples { features, labels, .. },
        ) => {
            let l = MlpLayout::new(in_dim, hidden, n_classes);
            let (w1, b1, w2, b2) = (&params[l.w1()], &params[l.b1()], &params[l.w2()], &params[l.b2()]);
            let mut total = 0.0;
            let mut dh = vec![0.0; hidden];
            for (x, &y) in features.chunks_exact(in_dim).zip(labels) {
                let h: Vec<f64> = affine(w1, b1, x).into_iter().map(f64::tanh).collect();
                let mut z = affine(w2, b2, &h);
                total += cross_entropy(&mut z, y, want_grad);
                if !want_grad {
                    continue;
                }
                dh.iter_mut().for_each(|v| *v = 0.0);
                for (r, dz) in z.iter().enumerate() {
                    grad[l.b2().start + r] += dz;
                    let row = l.w2().start + r * hidden;
                    for j in 0..hidden {
                        grad[row + j] += dz * h[j];
                        dh[j] += dz * w2[r * hidden + j];
                    }
                }
                for j in 0..hidden {
                    let da = dh[j] * (1.0 - h[j] * h[j]);
                    grad[l.b1().start + j] += da;
                    for (k, xv) in x.iter().enumerate() {
                        grad[j * in_dim + k] += da * xv;
                    }
                }
            }
            total
        }
        _ => unreachable!("check_inputs pairs model and batch kinds"),
    };
    if want_grad {
        grad.iter_mut().for_each(|g| *g /= n);
    }
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn isotropic(centers: &[f64]) -> Batch {
        let dim = centers.len();
        let p = QuadraticProblem::new(
            vec![DMatrix::identity(dim, dim)],
            vec![DVector::from_column_slice(centers)],
        )
        .unwrap();
        Batch::Quadratic {
            problem: Arc::new(p),
            clients: vec![0],
        }
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelSpec::Quadratic { dim: 3 }.param_count(), 3);
        assert_eq!(
            ModelSpec::LinearSoftmax {
                in_dim: 2,
                n_classes: 3
            }
            .param_count(),
            9
        );
        assert_eq!(
            ModelSpec::Mlp {
                in_dim: 2,
                hidden: 4,
                n_classes: 2
            }
            .param_count(),
            8 + 4 + 8 + 2
        );
    }

    #[test]
    fn init_is_seeded() {
        let q = ModelSpec::Quadratic { dim: 3 };
        assert_eq!(init_params(&q, 7), init_params(&q, 7));
        assert_eq!(init_params(&q, 7).len(), 3);
        let lin = ModelSpec::LinearSoftmax {
            in_dim: 2,
            n_classes: 3,
        };
        assert_eq!(init_params(&lin, 0).len(), 9);
        assert_ne!(init_params(&lin, 0), init_params(&lin, 1));
        assert!(init_params(&lin, 0).is_finite());
    }

    #[test]
    fn quadratic_loss_and_gradient() {
        let spec = ModelSpec::Quadratic { dim: 2 };
        assert_eq!(forward_loss(&spec, &[0.0, 0.0], &isotropic(&[0.0, 0.0])).unwrap(), 0.0);
        let one = ModelSpec::Quadratic { dim: 1 };
        assert_eq!(forward_loss(&one, &[2.0], &isotropic(&[0.0])).unwrap(), 2.0);
        let g = gradient(&spec, &[3.0, -1.0], &isotropic(&[0.0, 0.0])).unwrap();
        assert_eq!(g.as_slice(), &[3.0, -1.0]);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let spec = ModelSpec::LinearSoftmax {
            in_dim: 2,
            n_classes: 4,
        };
        let batch = Batch::Samples {
            features: vec![1.0, -2.0, 0.5, 3.0, 7.0, 0.0],
            in_dim: 2,
            labels: vec![0, 3, 2],
        };
        let loss = forward_loss(&spec, &[0.0; 12], &batch).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let spec = ModelSpec::Quadratic { dim: 1 };
        let g = finite_diff_gradient(&spec, &[1.0], &isotropic(&[0.0]), 1e-4).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-7);
        let flat = finite_diff(|_| 3.5, &[1.0, -2.0, 0.25], 1e-3).unwrap();
        assert!(flat.iter().all(|&v| v == 0.0));
        assert!(finite_diff(|_| 0.0, &[1.0], 0.0).is_err());
        assert!(finite_diff(|_| 0.0, &[1.0], -1e-3).is_err());
    }

    #[test]
    fn mismatches_are_contract_errors() {
        let spec = ModelSpec::LinearSoftmax {
            in_dim: 2,
            n_classes: 2,
        };
        let batch = Batch::Samples {
            features: vec![1.0, 2.0],
            in_dim: 2,
            labels: vec![1],
        };
        assert!(matches!(forward_loss(&spec, &[0.0; 5], &batch), Err(Error::Contract(_))));
        assert!(gradient(&spec, &[0.0; 6], &isotropic(&[0.0, 0.0])).is_err());
        let bad_label = Batch::Samples {
            features: vec![1.0, 2.0],
            in_dim: 2,
            labels: vec![2],
        };
        assert!(forward_loss(&spec, &[0.0; 6], &bad_label).is_err());
    }
}
