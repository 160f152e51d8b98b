//! The bi-level objective and its gradients.
//!
//! The client objective couples a full-weight personalized model `theta` to
//! the reconstruction of its factorized local model through a proximal term
//! `(lambda/2) ||theta - [[A]]||^2` (weights only; biases are never
//! factorized and carry only the data term). The data term is mean softmax
//! cross-entropy over a mini-batch, differentiated by manual
//! backpropagation. The factor-matrix gradient is the closed form
//! `lambda * (A^(n) V_n - Theta_(n) H_n)`, where `H_n` is the descending
//! Khatri-Rao chain skipping mode `n` and `V_n` the Hadamard product of the
//! other factors' Gram matrices. The sign on the `Theta` term follows the
//! derivation that finite differences confirm.

use crate::error::{Error, Result};
use crate::kruskal::{gram_hadamard_skip, khatri_rao_chain_skip, KruskalFactors};
use crate::layers::{Activation, ModelSpec};
use crate::model::{DenseLayer, PersonalizedModel, TensorizedModel};
use crate::tensor::{unfold, DenseTensor, Matrix};

/// A borrowed mini-batch: shared feature shape plus (features, label) pairs.
#[derive(Debug, Clone)]
pub struct BatchRef<'a> {
    pub feature_shape: &'a [usize],
    pub samples: Vec<(&'a [f64], usize)>,
}

/// Loss split into its data and proximal parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizedLoss {
    pub data_loss: f64,
    pub prox_term: f64,
    pub total: f64,
}

/// Numerically stable softmax cross-entropy; returns the loss in nats and
/// `d loss / d logits`.
fn softmax_ce(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    debug_assert!(label < logits.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    let loss = sum.ln() + max - logits[label];
    for p in &mut probs {
        *p /= sum;
    }
    probs[label] -= 1.0;
    (loss, probs)
}

/// Squared Frobenius distance between the personalized weights and the
/// composed tensors, layer by layer (biases excluded).
pub fn prox_sq_norm(theta: &PersonalizedModel, composed: &[DenseTensor]) -> Result<f64> {
    if theta.layers.len() != composed.len() {
        return Err(Error::shape("prox_sq_norm", "layer count"));
    }
    let mut acc = 0.0;
    for (layer, comp) in theta.layers.iter().zip(composed) {
        let w = layer.weight_tensor();
        if w.shape() != comp.shape() {
            return Err(Error::shape(
                "prox_sq_norm",
                format!("{:?} vs {:?}", w.shape(), comp.shape()),
            ));
        }
        for (a, b) in w.data().iter().zip(comp.data()) {
            let d = a - b;
            acc += d * d;
        }
    }
    Ok(acc)
}

/// Composes every layer of a tensorized model.
pub fn compose_layers(factors: &TensorizedModel) -> Vec<DenseTensor> {
    factors.layers.iter().map(|l| l.compose()).collect()
}

fn mean_data_loss(
    theta: &PersonalizedModel,
    spec: &ModelSpec,
    batch: &BatchRef<'_>,
) -> Result<f64> {
    if batch.samples.is_empty() {
        return Err(Error::shape("personalized_loss", "empty batch"));
    }
    let mut acc = 0.0;
    for &(x, y) in &batch.samples {
        let input = DenseTensor::new(batch.feature_shape.to_vec(), x.to_vec())?;
        let logits = theta.forward(spec, &input)?;
        if y >= logits.len() {
            return Err(Error::shape(
                "personalized_loss",
                format!("label {y} with {} classes", logits.len()),
            ));
        }
        acc += softmax_ce(&logits, y).0;
    }
    Ok(acc / batch.samples.len() as f64)
}

/// Mini-batch personalized objective with pre-composed tensors (hot path;
/// the factors are frozen while the personalized model trains).
pub fn personalized_loss_composed(
    theta: &PersonalizedModel,
    spec: &ModelSpec,
    composed: &[DenseTensor],
    batch: &BatchRef<'_>,
    lambda: f64,
) -> Result<RegularizedLoss> {
    if lambda <= 0.0 {
        return Err(Error::InvalidConfig("lambda must be > 0".into()));
    }
    let data_loss = mean_data_loss(theta, spec, batch)?;
    let prox_term = 0.5 * lambda * prox_sq_norm(theta, composed)?;
    Ok(RegularizedLoss {
        data_loss,
        prox_term,
        total: data_loss + prox_term,
    })
}

/// Mini-batch personalized objective: mean cross-entropy plus
/// `(lambda/2) ||theta - [[A]]||^2`.
pub fn personalized_loss(
    theta: &PersonalizedModel,
    spec: &ModelSpec,
    factors: &TensorizedModel,
    batch: &BatchRef<'_>,
    lambda: f64,
) -> Result<RegularizedLoss> {
    personalized_loss_composed(theta, spec, &compose_layers(factors), batch, lambda)
}

fn zeros_like(theta: &PersonalizedModel) -> PersonalizedModel {
    let layers = theta
        .layers
        .iter()
        .map(|l| match l {
            DenseLayer::Linear { w, b } => DenseLayer::Linear {
                w: Matrix::zeros(w.rows(), w.cols()),
                b: vec![0.0; b.len()],
            },
            DenseLayer::Conv { w } => DenseLayer::Conv {
                w: DenseTensor::zeros(w.shape().to_vec()),
            },
        })
        .collect();
    PersonalizedModel { layers }
}

struct LayerTrace {
    input: DenseTensor,
    pre: DenseTensor,
}

fn forward_trace(
    theta: &PersonalizedModel,
    spec: &ModelSpec,
    input: DenseTensor,
) -> Result<(Vec<f64>, Vec<LayerTrace>)> {
    let mut traces = Vec::with_capacity(theta.layers.len());
    let mut cur = input;
    for (layer, lspec) in theta.layers.iter().zip(&spec.layers) {
        let pre = match layer {
            DenseLayer::Linear { w, b } => {
                if cur.len() != w.cols() {
                    return Err(Error::shape("personalized_grad", "layer input length"));
                }
                let mut y = w.matvec(cur.data())?;
                for (yi, bi) in y.iter_mut().zip(b) {
                    *yi += bi;
                }
                DenseTensor::new(vec![w.rows()], y)?
            }
            DenseLayer::Conv { w } => {
                crate::layers::dense_conv_forward(w, &cur, cur.shape()[0], cur.shape()[1])?
            }
        };
        let mut post = pre.clone();
        if lspec.activation == Activation::Relu {
            crate::model::relu_in_place(post.data_mut());
        }
        traces.push(LayerTrace { input: cur, pre });
        cur = post;
    }
    Ok((cur.into_data(), traces))
}

/// Gradient of the mini-batch objective with pre-composed tensors.
pub fn personalized_grad_composed(
    theta: &PersonalizedModel,
    spec: &ModelSpec,
    composed: &[DenseTensor],
    batch: &BatchRef<'_>,
    lambda: f64,
) -> Result<PersonalizedModel> {
    if lambda <= 0.0 {
        return Err(Error::InvalidConfig("lambda must be > 0".into()));
    }
    if batch.samples.is_empty() {
        return Err(Error::shape("personalized_grad", "empty batch"));
    }
    let mut grad = zeros_like(theta);
    let inv_b = 1.0 / batch.samples.len() as f64;

    for &(x, y) in &batch.samples {
        let input = DenseTensor::new(batch.feature_shape.to_vec(), x.to_vec())?;
        let (logits, traces) = forward_trace(theta, spec, input)?;
        if y >= logits.len() {
            return Err(Error::shape(
                "personalized_grad",
                format!("label {y} with {} classes", logits.len()),
            ));
        }
        let (_, mut dout) = softmax_ce(&logits, y);

        for l in (0..theta.layers.len()).rev() {
            let trace = &traces[l];
            // Chain through the activation.
            let mut dpre = dout;
            if spec.layers[l].activation == Activation::Relu {
                for (d, &p) in dpre.iter_mut().zip(trace.pre.data()) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            match (&theta.layers[l], &mut grad.layers[l]) {
                (DenseLayer::Linear { w, .. }, DenseLayer::Linear { w: gw, b: gb }) => {
                    let xin = trace.input.data();
                    for (i, &d) in dpre.iter().enumerate() {
                        gb[i] += inv_b * d;
                        if d == 0.0 {
                            continue;
                        }
                        let grow = gw.row_mut(i);
                        let c = inv_b * d;
                        for (g, &xv) in grow.iter_mut().zip(xin) {
                            *g += c * xv;
                        }
                    }
                    if l > 0 {
                        dout = w.matvec_t(&dpre)?;
                    } else {
                        dout = Vec::new();
                    }
                }
                (DenseLayer::Conv { w }, DenseLayer::Conv { w: gw }) => {
                    let (ip, iq) = (trace.input.shape()[0], trace.input.shape()[1]);
                    let (id, is, it) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                    let (op, oq) = (ip - id + 1, iq - id + 1);
                    let xin = &trace.input;
                    // dW[u,v,s,t] += dpre[i,j,t] * x[i+u, j+v, s]
                    for u in 0..id {
                        for v in 0..id {
                            for s in 0..is {
                                for t in 0..it {
                                    let mut acc = 0.0;
                                    for i in 0..op {
                                        for j in 0..oq {
                                            acc += dpre[(i * oq + j) * it + t]
                                                * xin.get(&[i + u, j + v, s]);
                                        }
                                    }
                                    let old = gw.get(&[u, v, s, t]);
                                    gw.set(&[u, v, s, t], old + inv_b * acc);
                                }
                            }
                        }
                    }
                    if l > 0 {
                        // dX[p,q,s] = sum_{u,v,t valid} W[u,v,s,t] * dpre[p-u, q-v, t]
                        let mut dx = vec![0.0; ip * iq * is];
                        for p in 0..ip {
                            for q in 0..iq {
                                for s in 0..is {
                                    let mut acc = 0.0;
                                    for u in 0..id {
                                        if p < u || p - u >= op {
                                            continue;
                                        }
                                        for v in 0..id {
                                            if q < v || q - v >= oq {
                                                continue;
                                            }
                                            for t in 0..it {
                                                acc += w.get(&[u, v, s, t])
                                                    * dpre[((p - u) * oq + (q - v)) * it + t];
                                            }
                                        }
                                    }
                                    dx[(p * iq + q) * is + s] = acc;
                                }
                            }
                        }
                        dout = dx;
                    } else {
                        dout = Vec::new();
                    }
                }
                _ => unreachable!("gradient container mirrors theta"),
            }
        }
    }

    // Proximal part: lambda * (theta - [[A]]) on weights only.
    for (layer, (gl, comp)) in theta
        .layers
        .iter()
        .zip(grad.layers.iter_mut().zip(composed))
    {
        match (layer, gl) {
            (DenseLayer::Linear { w, .. }, DenseLayer::Linear { w: gw, .. }) => {
                if w.rows() != comp.shape()[0] || w.cols() != comp.shape()[1] {
                    return Err(Error::shape("personalized_grad", "prox layer shape"));
                }
                for ((g, &t), &c) in gw.data_mut().iter_mut().zip(w.data()).zip(comp.data()) {
                    *g += lambda * (t - c);
                }
            }
            (DenseLayer::Conv { w }, DenseLayer::Conv { w: gw }) => {
                if w.shape() != comp.shape() {
                    return Err(Error::shape("personalized_grad", "prox layer shape"));
                }
                for ((g, &t), &c) in gw.data_mut().iter_mut().zip(w.data()).zip(comp.data()) {
                    *g += lambda * (t - c);
                }
            }
            _ => unreachable!(),
        }
    }
    Ok(grad)
}

/// Gradient of the mini-batch objective by manual backpropagation plus the
/// proximal pull toward the composed factors.
pub fn personalized_grad(
    theta: &PersonalizedModel,
    spec: &ModelSpec,
    factors: &TensorizedModel,
    batch: &BatchRef<'_>,
    lambda: f64,
) -> Result<PersonalizedModel> {
    personalized_grad_composed(theta, spec, &compose_layers(factors), batch, lambda)
}

/// Squared Frobenius norm of a gradient-shaped model.
pub fn grad_sq_norm(grad: &PersonalizedModel) -> f64 {
    grad.layers
        .iter()
        .map(|l| match l {
            DenseLayer::Linear { w, b } => {
                w.frobenius_sq() + b.iter().map(|v| v * v).sum::<f64>()
            }
            DenseLayer::Conv { w } => w.data().iter().map(|v| v * v).sum(),
        })
        .sum()
}

/// Stopping criterion: true iff `||grad F~||^2 <= nu`.
pub fn grad_check_criterion(
    theta: &PersonalizedModel,
    spec: &ModelSpec,
    factors: &TensorizedModel,
    batch: &BatchRef<'_>,
    lambda: f64,
    nu: f64,
) -> Result<bool> {
    let grad = personalized_grad(theta, spec, factors, batch, lambda)?;
    Ok(grad_sq_norm(&grad) <= nu)
}

/// Closed-form factor gradient from a pre-unfolded weight tensor:
/// `lambda * (A^(n) V_n - Theta_(n) H_n)`.
pub fn factor_gradient_from_unfolded(
    theta_unfolded: &Matrix,
    factors: &KruskalFactors,
    mode: usize,
    lambda: f64,
) -> Result<Matrix> {
    if mode >= factors.ndim() {
        return Err(Error::ModeOutOfRange {
            mode,
            ndim: factors.ndim(),
        });
    }
    let chain = khatri_rao_chain_skip(&factors.factors, mode)?;
    let theta_h = theta_unfolded.matmul(&chain)?;
    let v = gram_hadamard_skip(&factors.factors, mode)?;
    let mut grad = factors.factors[mode].matmul(&v)?;
    grad.add_scaled(-1.0, &theta_h)?;
    grad.scale(lambda);
    Ok(grad)
}

/// Gradient of `(lambda/2) ||theta - [[A]]||^2` with respect to factor
/// matrix `A^(n)`.
pub fn factor_gradient(
    theta_layer: &DenseTensor,
    factors: &KruskalFactors,
    mode: usize,
    lambda: f64,
) -> Result<Matrix> {
    if theta_layer.shape() != factors.target_shape.as_slice() {
        return Err(Error::shape(
            "factor_gradient",
            format!(
                "theta {:?} vs factors {:?}",
                theta_layer.shape(),
                factors.target_shape
            ),
        ));
    }
    if mode >= factors.ndim() {
        return Err(Error::ModeOutOfRange {
            mode,
            ndim: factors.ndim(),
        });
    }
    let theta_unf = unfold(theta_layer, mode)?;
    factor_gradient_from_unfolded(&theta_unf, factors, mode, lambda)
}

/// Local objective at a fixed personalized solution:
/// `data_loss + (lambda/2) ||theta~ - [[A]]||^2`. The data term is constant
/// in the factors, which makes this the finite-difference oracle for
/// [`factor_gradient`].
pub fn local_objective_at_theta(
    theta_tilde: &PersonalizedModel,
    factors: &TensorizedModel,
    lambda: f64,
    data_loss_at_theta: f64,
) -> Result<f64> {
    let composed = compose_layers(factors);
    Ok(data_loss_at_theta + 0.5 * lambda * prox_sq_norm(theta_tilde, &composed)?)
}
