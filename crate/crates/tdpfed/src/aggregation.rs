//! Server-side fusion of client factor matrices.
//!
//! AFM averages factor matrices mode by mode; ACT reconstructs every
//! client's full tensor, averages the tensors, then re-factorizes the
//! average with a seeded ALS fit (the factor recovery after tensor
//! averaging is otherwise unspecified). Reduction order is fixed to
//! ascending client id for bit-reproducibility.

use crate::error::{Error, Result};
use crate::kruskal::cp_als;
use crate::layers::{TensorizedConv, TensorizedLinear};
use crate::model::{TensorizedLayer, TensorizedModel};
use crate::tensor::DenseTensor;

/// One client's returned model plus its aggregation weight basis
/// (mini-batch size for AFM, shard size for ACT).
#[derive(Debug, Clone)]
pub struct ClientContribution<'a> {
    pub client_id: usize,
    pub model: &'a TensorizedModel,
    pub weight: f64,
}

/// Previous-round global factors plus the participating clients.
#[derive(Debug, Clone)]
pub struct AggregationInput<'a> {
    pub global: &'a TensorizedModel,
    pub clients: Vec<ClientContribution<'a>>,
}

impl<'a> AggregationInput<'a> {
    fn validate(&self, beta: f64) -> Result<Vec<usize>> {
        if beta <= 0.0 {
            return Err(Error::InvalidConfig("beta must be > 0".into()));
        }
        if self.clients.is_empty() {
            return Err(Error::InvalidConfig("aggregation needs >= 1 client".into()));
        }
        if self.clients.iter().any(|c| c.weight <= 0.0) {
            return Err(Error::InvalidConfig("aggregation weights must be > 0".into()));
        }
        for c in &self.clients {
            if c.model.layers.len() != self.global.layers.len() {
                return Err(Error::shape("aggregation", "client layer count"));
            }
            for (cl, gl) in c.model.layers.iter().zip(&self.global.layers) {
                if cl.factor_count() != gl.factor_count() || cl.bias().len() != gl.bias().len() {
                    return Err(Error::shape("aggregation", "client layer structure"));
                }
                for n in 0..cl.factor_count() {
                    let (a, b) = (cl.factor(n), gl.factor(n));
                    if a.rows() != b.rows() || a.cols() != b.cols() {
                        return Err(Error::shape(
                            "aggregation",
                            format!("factor {n}: {}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
                        ));
                    }
                }
            }
        }
        // Fixed reduction order: ascending client id.
        let mut order: Vec<usize> = (0..self.clients.len()).collect();
        order.sort_by_key(|&i| self.clients[i].client_id);
        Ok(order)
    }
}

fn normalized_weights(input: &AggregationInput<'_>, order: &[usize]) -> Vec<f64> {
    let total: f64 = order.iter().map(|&i| input.clients[i].weight).sum();
    order.iter().map(|&i| input.clients[i].weight / total).collect()
}

/// Aggregating Factor Matrix:
/// `A_{t+1}^(n) = (1 - beta) A_t^(n) + beta * sum_k w_k A_{k}^(n)`,
/// biases averaged with the same weights.
pub fn afm(input: &AggregationInput<'_>, beta: f64) -> Result<TensorizedModel> {
    let order = input.validate(beta)?;
    let weights = normalized_weights(input, &order);
    let mut out = input.global.clone();
    for layer in &mut out.layers {
        for n in 0..layer.factor_count() {
            layer.factor_mut(n).scale(1.0 - beta);
        }
        for b in layer.bias_mut() {
            *b *= 1.0 - beta;
        }
    }
    for (&i, &w) in order.iter().zip(&weights) {
        let scale = beta * w;
        let client = input.clients[i].model;
        for (ol, cl) in out.layers.iter_mut().zip(&client.layers) {
            for n in 0..ol.factor_count() {
                ol.factor_mut(n).add_scaled(scale, cl.factor(n))?;
            }
            for (ob, &cb) in ol.bias_mut().iter_mut().zip(cl.bias()) {
                *ob += scale * cb;
            }
        }
    }
    Ok(out)
}

/// Aggregating Composed Tensor: reconstruct per client, average the full
/// tensors, then recover broadcast factors with a seeded ALS refit at each
/// layer's rank. Returns the averaged tensors alongside the refit model.
pub fn act(
    input: &AggregationInput<'_>,
    beta: f64,
    als_iters: usize,
    seed: u64,
) -> Result<(Vec<DenseTensor>, TensorizedModel)> {
    let order = input.validate(beta)?;
    let weights = normalized_weights(input, &order);

    let mut omegas = Vec::with_capacity(input.global.layers.len());
    for (l, gl) in input.global.layers.iter().enumerate() {
        let mut omega = gl.compose();
        omega.scale(1.0 - beta);
        for (&i, &w) in order.iter().zip(&weights) {
            let composed = input.clients[i].model.layers[l].compose();
            omega.add_scaled(beta * w, &composed)?;
        }
        omegas.push(omega);
    }

    let mut layers = Vec::with_capacity(omegas.len());
    for (l, (omega, gl)) in omegas.iter().zip(&input.global.layers).enumerate() {
        let rank = gl.rank();
        let fit = cp_als(omega, rank, als_iters, seed.wrapping_add(l as u64))?;

        // Biases are never factorized; average them with the same weights.
        let mut bias: Vec<f64> = gl.bias().iter().map(|&b| (1.0 - beta) * b).collect();
        for (&i, &w) in order.iter().zip(&weights) {
            for (ob, &cb) in bias.iter_mut().zip(input.clients[i].model.layers[l].bias()) {
                *ob += beta * w * cb;
            }
        }

        let mut factors = fit.factors.into_iter();
        let layer = match gl {
            TensorizedLayer::Linear(_) => TensorizedLayer::Linear(TensorizedLinear::new(
                factors.next().unwrap(),
                factors.next().unwrap(),
                bias,
            )?),
            TensorizedLayer::Conv(_) => TensorizedLayer::Conv(TensorizedConv::new(
                factors.next().unwrap(),
                factors.next().unwrap(),
                factors.next().unwrap(),
                factors.next().unwrap(),
            )?),
        };
        layers.push(layer);
    }
    Ok((omegas, TensorizedModel { layers }))
}

/// The broadcast: factor matrices plus the composed full tensors, with
/// payload accounting at 8 bytes per real. The uplink counts factors (and
/// biases) only; the downlink adds the composed tensors.
#[derive(Debug, Clone)]
pub struct BroadcastPayload {
    pub factors: TensorizedModel,
    pub composed: Vec<DenseTensor>,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

pub fn make_broadcast(factors: &TensorizedModel) -> BroadcastPayload {
    let composed: Vec<DenseTensor> = factors.layers.iter().map(|l| l.compose()).collect();
    let uplink_reals = factors.payload_reals() as u64;
    let composed_reals: u64 = composed.iter().map(|t| t.len() as u64).sum();
    BroadcastPayload {
        factors: factors.clone(),
        composed,
        uplink_bytes: uplink_reals * 8,
        downlink_bytes: (uplink_reals + composed_reals) * 8,
    }
}
