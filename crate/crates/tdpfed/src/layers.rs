//! CP-factorized linear and convolutional layers, plus compression-rate
//! planning for choosing ranks.
//!
//! Convolutions are stride-1 and "valid" (no padding): output position
//! `(i, j)` reads the input window starting at row `i`, column `j`, i.e. the
//! centered window of the direct formulation shifted by `(I_d - 1) / 2`. The
//! dense reference path uses exactly the same shift, so the staged and dense
//! forwards agree to rounding error.

use crate::error::{Error, Result};
use crate::kruskal::{kruskal_reconstruct, KruskalFactors};
use crate::tensor::{DenseTensor, Matrix};

/// Per-layer activation. `Softmax` marks the classification head; forwards
/// return logits and the loss / prediction side applies it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
    None,
}

/// Dense shape of a layer, without rank or activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear { i_out: usize, i_in: usize },
    Conv { i_d: usize, i_s: usize, i_t: usize },
}

impl LayerKind {
    /// Dense weight parameter count (biases excluded, as in the CR formulas).
    pub fn dense_weight_params(&self) -> usize {
        match *self {
            LayerKind::Linear { i_out, i_in } => i_out * i_in,
            LayerKind::Conv { i_d, i_s, i_t } => i_d * i_d * i_s * i_t,
        }
    }

    /// Factored weight parameters per unit of rank: the CR denominator.
    pub fn factored_params_per_rank(&self) -> usize {
        match *self {
            LayerKind::Linear { i_out, i_in } => i_out + i_in,
            LayerKind::Conv { i_d, i_s, i_t } => 2 * i_d + i_s + i_t,
        }
    }

    /// Bias length carried alongside the weights (conv layers have none).
    pub fn bias_len(&self) -> usize {
        match *self {
            LayerKind::Linear { i_out, .. } => i_out,
            LayerKind::Conv { .. } => 0,
        }
    }

    /// Weight tensor extents, one per mode.
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Linear { i_out, i_in } => vec![i_out, i_in],
            LayerKind::Conv { i_d, i_s, i_t } => vec![i_d, i_d, i_s, i_t],
        }
    }
}

/// One layer of a model plan: dense shape + CP rank + activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub rank: usize,
    pub activation: Activation,
}

/// Ordered layer specs for a whole model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("model has no layers".into()));
        }
        for spec in &layers {
            if spec.rank == 0 {
                return Err(Error::InvalidConfig("layer rank must be >= 1".into()));
            }
            if let LayerKind::Conv { i_d, .. } = spec.kind {
                if i_d % 2 == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "conv window {i_d} must be odd"
                    )));
                }
            }
        }
        // Composition checks that are input-independent: linear chains and
        // conv channel counts.
        for w in layers.windows(2) {
            match (w[0].kind, w[1].kind) {
                (LayerKind::Linear { i_out, .. }, LayerKind::Linear { i_in, .. }) => {
                    if i_out != i_in {
                        return Err(Error::InvalidConfig(format!(
                            "layer output {i_out} does not feed layer input {i_in}"
                        )));
                    }
                }
                (LayerKind::Conv { i_t, .. }, LayerKind::Conv { i_s, .. }) => {
                    if i_t != i_s {
                        return Err(Error::InvalidConfig(format!(
                            "conv output channels {i_t} do not feed conv input channels {i_s}"
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(Self { layers })
    }
}

/// CP-factorized fully connected layer: `y = A1 (A2^T x) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorizedLinear {
    pub a1: Matrix,
    pub a2: Matrix,
    pub bias: Vec<f64>,
}

impl TensorizedLinear {
    pub fn new(a1: Matrix, a2: Matrix, bias: Vec<f64>) -> Result<Self> {
        if a1.cols() != a2.cols() {
            return Err(Error::shape(
                "TensorizedLinear::new",
                format!("rank mismatch: {} vs {}", a1.cols(), a2.cols()),
            ));
        }
        if bias.len() != a1.rows() {
            return Err(Error::shape(
                "TensorizedLinear::new",
                format!("bias length {} vs {} outputs", bias.len(), a1.rows()),
            ));
        }
        Ok(Self { a1, a2, bias })
    }

    pub fn rank(&self) -> usize {
        self.a1.cols()
    }

    pub fn i_out(&self) -> usize {
        self.a1.rows()
    }

    pub fn i_in(&self) -> usize {
        self.a2.rows()
    }

    /// Factor-first forward; the dense `W = A1 A2^T` is never materialized.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.a2.matvec_t(x)?;
        let mut y = self.a1.matvec(&z)?;
        for (yi, bi) in y.iter_mut().zip(&self.bias) {
            *yi += bi;
        }
        Ok(y)
    }

    pub fn to_kruskal(&self) -> KruskalFactors {
        KruskalFactors::new(
            vec![self.a1.clone(), self.a2.clone()],
            vec![self.a1.rows(), self.a2.rows()],
        )
        .expect("validated at construction")
    }
}

/// CP-factorized convolution: spatial factors `a1`, `a2` (`I_d x R`), input
/// channel factor `a3` (`I_S x R`), output channel factor `a4` (`I_T x R`).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorizedConv {
    pub a1: Matrix,
    pub a2: Matrix,
    pub a3: Matrix,
    pub a4: Matrix,
}

impl TensorizedConv {
    pub fn new(a1: Matrix, a2: Matrix, a3: Matrix, a4: Matrix) -> Result<Self> {
        let r = a1.cols();
        if a2.cols() != r || a3.cols() != r || a4.cols() != r {
            return Err(Error::shape(
                "TensorizedConv::new",
                "all four factors must share one rank".to_string(),
            ));
        }
        if a1.rows() != a2.rows() {
            return Err(Error::shape(
                "TensorizedConv::new",
                format!("spatial factors disagree: {} vs {}", a1.rows(), a2.rows()),
            ));
        }
        if a1.rows() % 2 == 0 {
            return Err(Error::shape(
                "TensorizedConv::new",
                format!("window {} must be odd", a1.rows()),
            ));
        }
        Ok(Self { a1, a2, a3, a4 })
    }

    pub fn rank(&self) -> usize {
        self.a1.cols()
    }

    pub fn window(&self) -> usize {
        self.a1.rows()
    }

    pub fn in_channels(&self) -> usize {
        self.a3.rows()
    }

    pub fn out_channels(&self) -> usize {
        self.a4.rows()
    }

    fn check_input(&self, x: &DenseTensor) -> Result<(usize, usize)> {
        if x.ndim() != 3 || x.shape()[2] != self.in_channels() {
            return Err(Error::shape(
                "TensorizedConv::forward",
                format!(
                    "input shape {:?}, expected (P, Q, {})",
                    x.shape(),
                    self.in_channels()
                ),
            ));
        }
        let (p, q) = (x.shape()[0], x.shape()[1]);
        if p < self.window() || q < self.window() {
            return Err(Error::shape(
                "TensorizedConv::forward",
                format!("input {}x{} smaller than window {}", p, q, self.window()),
            ));
        }
        Ok((p, q))
    }

    /// Staged forward: channel mix, width convolution, height convolution,
    /// output mix. Intermediates are allocated explicitly.
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let (ip, iq) = self.check_input(x)?;
        let id = self.window();
        let is = self.in_channels();
        let it = self.out_channels();
        let r = self.rank();
        let (op, oq) = (ip - id + 1, iq - id + 1);

        // Stage 1: ys[p, q, r] = sum_s a3[s, r] * x[p, q, s]
        let mut ys = DenseTensor::zeros(vec![ip, iq, r]);
        {
            let xd = x.data();
            let yd = ys.data_mut();
            for pq in 0..ip * iq {
                let xrow = &xd[pq * is..(pq + 1) * is];
                let yrow = &mut yd[pq * r..(pq + 1) * r];
                for (s, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (yv, &a) in yrow.iter_mut().zip(self.a3.row(s)) {
                        *yv += xv * a;
                    }
                }
            }
        }

        // Stage 2: ysj[p, j, r] = sum_v a2[v, r] * ys[p, j + v, r]
        let mut ysj = DenseTensor::zeros(vec![ip, oq, r]);
        {
            let src = ys.data();
            let dst = ysj.data_mut();
            for p in 0..ip {
                for j in 0..oq {
                    let out = &mut dst[(p * oq + j) * r..(p * oq + j + 1) * r];
                    for v in 0..id {
                        let inp = &src[(p * iq + j + v) * r..(p * iq + j + v + 1) * r];
                        for (o, (&a, &iv)) in out.iter_mut().zip(self.a2.row(v).iter().zip(inp)) {
                            *o += a * iv;
                        }
                    }
                }
            }
        }

        // Stage 3: ysji[i, j, r] = sum_u a1[u, r] * ysj[i + u, j, r]
        let mut ysji = DenseTensor::zeros(vec![op, oq, r]);
        {
            let src = ysj.data();
            let dst = ysji.data_mut();
            for i in 0..op {
                for j in 0..oq {
                    let out = &mut dst[(i * oq + j) * r..(i * oq + j + 1) * r];
                    for u in 0..id {
                        let inp = &src[((i + u) * oq + j) * r..((i + u) * oq + j + 1) * r];
                        for (o, (&a, &iv)) in out.iter_mut().zip(self.a1.row(u).iter().zip(inp)) {
                            *o += a * iv;
                        }
                    }
                }
            }
        }

        // Stage 4: y[i, j, t] = sum_r a4[t, r] * ysji[i, j, r]
        let mut y = DenseTensor::zeros(vec![op, oq, it]);
        {
            let src = ysji.data();
            let dst = y.data_mut();
            for ij in 0..op * oq {
                let inp = &src[ij * r..(ij + 1) * r];
                let out = &mut dst[ij * it..(ij + 1) * it];
                for (t, o) in out.iter_mut().enumerate() {
                    *o = crate::tensor::dot(self.a4.row(t), inp);
                }
            }
        }
        Ok(y)
    }

    /// Materializes the dense kernel and applies the direct quadruple-sum
    /// convolution; reference oracle only.
    pub fn forward_dense(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let (ip, iq) = self.check_input(x)?;
        let w = kruskal_reconstruct(&self.to_kruskal());
        dense_conv_forward(&w, x, ip, iq)
    }

    pub fn to_kruskal(&self) -> KruskalFactors {
        KruskalFactors::new(
            vec![
                self.a1.clone(),
                self.a2.clone(),
                self.a3.clone(),
                self.a4.clone(),
            ],
            vec![
                self.a1.rows(),
                self.a2.rows(),
                self.a3.rows(),
                self.a4.rows(),
            ],
        )
        .expect("validated at construction")
    }
}

/// Direct valid convolution with a dense kernel `w` of shape
/// `(I_d, I_d, I_S, I_T)`; shared by the dense oracle and the dense model
/// forward.
pub fn dense_conv_forward(
    w: &DenseTensor,
    x: &DenseTensor,
    ip: usize,
    iq: usize,
) -> Result<DenseTensor> {
    let (id, is, it) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    if w.ndim() != 4 || w.shape()[1] != id {
        return Err(Error::shape(
            "dense_conv_forward",
            format!("kernel shape {:?}", w.shape()),
        ));
    }
    if x.ndim() != 3 || x.shape()[2] != is {
        return Err(Error::shape(
            "dense_conv_forward",
            format!("input shape {:?}, expected (P, Q, {is})", x.shape()),
        ));
    }
    if ip < id || iq < id {
        return Err(Error::shape(
            "dense_conv_forward",
            format!("input {ip}x{iq} smaller than window {id}"),
        ));
    }
    let (op, oq) = (ip - id + 1, iq - id + 1);
    let mut y = DenseTensor::zeros(vec![op, oq, it]);
    for i in 0..op {
        for j in 0..oq {
            for t in 0..it {
                let mut acc = 0.0;
                for u in 0..id {
                    for v in 0..id {
                        for s in 0..is {
                            acc += w.get(&[u, v, s, t]) * x.get(&[i + u, j + v, s]);
                        }
                    }
                }
                y.set(&[i, j, t], acc);
            }
        }
    }
    Ok(y)
}

/// Compression rate of a fully connected layer.
pub fn compression_rate_linear(i_out: usize, i_in: usize, r: usize) -> f64 {
    (i_out * i_in) as f64 / (r * (i_out + i_in)) as f64
}

/// Compression rate of a convolutional layer.
pub fn compression_rate_conv(i_d: usize, i_s: usize, i_t: usize, r: usize) -> f64 {
    (i_d * i_d * i_s * i_t) as f64 / (r * (2 * i_d + i_s + i_t)) as f64
}

/// Compression rate of an arbitrary layer shape at rank `r`.
pub fn compression_rate(kind: &LayerKind, r: usize) -> f64 {
    kind.dense_weight_params() as f64 / (r * kind.factored_params_per_rank()) as f64
}

/// Rank whose compression rate is closest to `target_cr`: the real-valued
/// solution of `CR(R) = target_cr` rounded to the nearest integer, floored
/// at 1. This reproduces the published DNN/VGG8 rank tables for targets 1.5
/// and 2.0.
pub fn rank_for_target_cr(kind: &LayerKind, target_cr: f64) -> usize {
    assert!(target_cr > 0.0, "target compression rate must be positive");
    let exact =
        kind.dense_weight_params() as f64 / (target_cr * kind.factored_params_per_rank() as f64);
    (exact.round() as usize).max(1)
}

/// One row of a rank plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRow {
    pub layer: &'static str,
    pub kind: LayerKind,
    pub rank: usize,
    pub achieved_cr: f64,
}

/// Built-in model shapes for rank planning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetModel {
    Dnn,
    Vgg8,
}

impl PresetModel {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "dnn" => Some(PresetModel::Dnn),
            "vgg8" => Some(PresetModel::Vgg8),
            _ => None,
        }
    }

    /// Layer names and dense shapes of the preset.
    pub fn layer_shapes(&self) -> Vec<(&'static str, LayerKind)> {
        match self {
            PresetModel::Dnn => vec![
                ("fc 1", LayerKind::Linear { i_out: 100, i_in: 784 }),
                ("fc 2", LayerKind::Linear { i_out: 10, i_in: 100 }),
            ],
            PresetModel::Vgg8 => vec![
                ("conv 1", LayerKind::Conv { i_d: 3, i_s: 3, i_t: 32 }),
                ("conv 2", LayerKind::Conv { i_d: 3, i_s: 32, i_t: 64 }),
                ("conv 3", LayerKind::Conv { i_d: 3, i_s: 64, i_t: 128 }),
                ("conv 4", LayerKind::Conv { i_d: 3, i_s: 128, i_t: 256 }),
                ("conv 5", LayerKind::Conv { i_d: 3, i_s: 256, i_t: 256 }),
                ("fc 1", LayerKind::Linear { i_out: 256, i_in: 256 }),
                ("fc 2", LayerKind::Linear { i_out: 256, i_in: 256 }),
                ("fc 3", LayerKind::Linear { i_out: 10, i_in: 256 }),
            ],
        }
    }
}

/// Rank plan for a preset model at a target compression rate.
pub fn plan_ranks(model: PresetModel, target_cr: f64) -> Vec<PlanRow> {
    model
        .layer_shapes()
        .into_iter()
        .map(|(layer, kind)| {
            let rank = rank_for_target_cr(&kind, target_cr);
            PlanRow {
                layer,
                kind,
                rank,
                achieved_cr: compression_rate(&kind, rank),
            }
        })
        .collect()
}

/// The paper's two-layer MNIST DNN (784 -> 100 relu -> 10 softmax) with
/// ranks chosen for `target_cr`.
pub fn dnn_model_spec(target_cr: f64) -> ModelSpec {
    let plan = plan_ranks(PresetModel::Dnn, target_cr);
    ModelSpec::new(vec![
        LayerSpec {
            kind: plan[0].kind,
            rank: plan[0].rank,
            activation: Activation::Relu,
        },
        LayerSpec {
            kind: plan[1].kind,
            rank: plan[1].rank,
            activation: Activation::Softmax,
        },
    ])
    .expect("static spec is valid")
}
