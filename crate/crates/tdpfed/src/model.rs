//! Whole-model containers: the tensorized (factorized) model exchanged with
//! the server and its full-weight personalized counterpart.
//!
//! Forwards return logits. The softmax head is applied by the loss and never
//! by the forward itself; `predict` takes an argmax with ties broken toward
//! the lowest class index.

use crate::error::{Error, Result};
use crate::kruskal::kruskal_reconstruct;
use crate::layers::{
    dense_conv_forward, Activation, LayerKind, ModelSpec, TensorizedConv, TensorizedLinear,
};
use crate::tensor::{DenseTensor, Matrix};
use rand::Rng;

/// One factorized layer.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorizedLayer {
    Linear(TensorizedLinear),
    Conv(TensorizedConv),
}

impl TensorizedLayer {
    pub fn factor_count(&self) -> usize {
        match self {
            TensorizedLayer::Linear(_) => 2,
            TensorizedLayer::Conv(_) => 4,
        }
    }

    pub fn factor(&self, n: usize) -> &Matrix {
        match self {
            TensorizedLayer::Linear(l) => [&l.a1, &l.a2][n],
            TensorizedLayer::Conv(c) => [&c.a1, &c.a2, &c.a3, &c.a4][n],
        }
    }

    pub fn factor_mut(&mut self, n: usize) -> &mut Matrix {
        match self {
            TensorizedLayer::Linear(l) => [&mut l.a1, &mut l.a2][n],
            TensorizedLayer::Conv(c) => [&mut c.a1, &mut c.a2, &mut c.a3, &mut c.a4][n],
        }
    }

    pub fn bias(&self) -> &[f64] {
        match self {
            TensorizedLayer::Linear(l) => &l.bias,
            TensorizedLayer::Conv(_) => &[],
        }
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        match self {
            TensorizedLayer::Linear(l) => &mut l.bias,
            TensorizedLayer::Conv(_) => &mut [],
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            TensorizedLayer::Linear(l) => l.rank(),
            TensorizedLayer::Conv(c) => c.rank(),
        }
    }

    pub fn to_kruskal(&self) -> crate::kruskal::KruskalFactors {
        match self {
            TensorizedLayer::Linear(l) => l.to_kruskal(),
            TensorizedLayer::Conv(c) => c.to_kruskal(),
        }
    }

    /// Reconstructs the dense weight tensor of this layer.
    pub fn compose(&self) -> DenseTensor {
        kruskal_reconstruct(&self.to_kruskal())
    }

    /// Uplink reals: factor entries plus bias.
    pub fn payload_reals(&self) -> usize {
        let factors: usize = (0..self.factor_count())
            .map(|n| self.factor(n).data().len())
            .sum();
        factors + self.bias().len()
    }
}

/// The factor-matrix model transmitted between client and server.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorizedModel {
    pub layers: Vec<TensorizedLayer>,
}

impl TensorizedModel {
    /// Forward pass returning logits.
    pub fn forward(&self, spec: &ModelSpec, input: &DenseTensor) -> Result<Vec<f64>> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::shape("TensorizedModel::forward", "layer count"));
        }
        let mut cur = input.clone();
        for (layer, lspec) in self.layers.iter().zip(&spec.layers) {
            let mut out = match layer {
                TensorizedLayer::Linear(l) => {
                    if cur.len() != l.i_in() {
                        return Err(Error::shape(
                            "TensorizedModel::forward",
                            format!("flattened input {} vs layer input {}", cur.len(), l.i_in()),
                        ));
                    }
                    DenseTensor::new(vec![l.i_out()], l.forward(cur.data())?)?
                }
                TensorizedLayer::Conv(c) => c.forward(&cur)?,
            };
            if lspec.activation == Activation::Relu {
                relu_in_place(out.data_mut());
            }
            cur = out;
        }
        Ok(cur.into_data())
    }

    /// Uplink reals for the whole model.
    pub fn payload_reals(&self) -> usize {
        self.layers.iter().map(|l| l.payload_reals()).sum()
    }

    /// Dense reals of the composed model (weights plus biases).
    pub fn composed_reals(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let w: usize = (0..l.factor_count()).map(|n| l.factor(n).rows()).product();
                w + l.bias().len()
            })
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            (0..l.factor_count()).all(|n| l.factor(n).data().iter().all(|v| v.is_finite()))
                && l.bias().iter().all(|v| v.is_finite())
        })
    }
}

/// One dense layer of the personalized model.
#[derive(Debug, Clone, PartialEq)]
pub enum DenseLayer {
    Linear { w: Matrix, b: Vec<f64> },
    Conv { w: DenseTensor },
}

impl DenseLayer {
    /// Dense weight as a tensor (the prox term and factor gradients unfold it).
    pub fn weight_tensor(&self) -> DenseTensor {
        match self {
            DenseLayer::Linear { w, .. } => w.to_tensor(),
            DenseLayer::Conv { w } => w.clone(),
        }
    }
}

/// Full-weight model each client keeps locally; never transmitted.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizedModel {
    pub layers: Vec<DenseLayer>,
}

impl PersonalizedModel {
    /// Forward pass returning logits.
    pub fn forward(&self, spec: &ModelSpec, input: &DenseTensor) -> Result<Vec<f64>> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::shape("PersonalizedModel::forward", "layer count"));
        }
        let mut cur = input.clone();
        for (layer, lspec) in self.layers.iter().zip(&spec.layers) {
            let mut out = match layer {
                DenseLayer::Linear { w, b } => {
                    if cur.len() != w.cols() {
                        return Err(Error::shape(
                            "PersonalizedModel::forward",
                            format!("flattened input {} vs layer input {}", cur.len(), w.cols()),
                        ));
                    }
                    let mut y = w.matvec(cur.data())?;
                    for (yi, bi) in y.iter_mut().zip(b) {
                        *yi += bi;
                    }
                    DenseTensor::new(vec![w.rows()], y)?
                }
                DenseLayer::Conv { w } => {
                    if cur.ndim() != 3 {
                        return Err(Error::shape(
                            "PersonalizedModel::forward",
                            "conv layer expects a 3-mode input".to_string(),
                        ));
                    }
                    dense_conv_forward(w, &cur, cur.shape()[0], cur.shape()[1])?
                }
            };
            if lspec.activation == Activation::Relu {
                relu_in_place(out.data_mut());
            }
            cur = out;
        }
        Ok(cur.into_data())
    }

    /// Seeded init: weights uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), zero
    /// biases.
    pub fn init(spec: &ModelSpec, rng: &mut impl Rng) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Linear { i_out, i_in } => {
                    let bound = 1.0 / (i_in as f64).sqrt();
                    let data = (0..i_out * i_in)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    DenseLayer::Linear {
                        w: Matrix::new(i_out, i_in, data).expect("positive extents"),
                        b: vec![0.0; i_out],
                    }
                }
                LayerKind::Conv { i_d, i_s, i_t } => {
                    let fan_in = (i_d * i_d * i_s) as f64;
                    let bound = 1.0 / fan_in.sqrt();
                    let len = i_d * i_d * i_s * i_t;
                    let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
                    DenseLayer::Conv {
                        w: DenseTensor::new(vec![i_d, i_d, i_s, i_t], data)
                            .expect("positive extents"),
                    }
                }
            })
            .collect();
        Self { layers }
    }

    /// Builds a dense model from composed weight tensors and the tensorized
    /// biases; used to evaluate the broadcast global model.
    pub fn from_composed(composed: &[DenseTensor], biases: &[Vec<f64>]) -> Result<Self> {
        if composed.len() != biases.len() {
            return Err(Error::shape("PersonalizedModel::from_composed", "layer count"));
        }
        let layers = composed
            .iter()
            .zip(biases)
            .map(|(w, b)| match w.ndim() {
                2 => Ok(DenseLayer::Linear {
                    w: Matrix::from_tensor(w)?,
                    b: b.clone(),
                }),
                4 => Ok(DenseLayer::Conv { w: w.clone() }),
                n => Err(Error::shape(
                    "PersonalizedModel::from_composed",
                    format!("{n}-mode weight"),
                )),
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| match l {
            DenseLayer::Linear { w, b } => {
                w.data().iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite())
            }
            DenseLayer::Conv { w } => w.data().iter().all(|v| v.is_finite()),
        })
    }
}

pub fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Argmax with ties broken by the lowest class index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
