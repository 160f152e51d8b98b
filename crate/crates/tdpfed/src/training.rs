//! Client-side procedure: per local round, `s` optimizer steps on the
//! personalized model with the factors frozen, then `s'` alternating sweeps
//! over the factor matrices under the fixed personalized solution.
//!
//! The personalized model and its optimizer state warm-start across global
//! rounds; the broadcast replaces only the factors, and the factor
//! optimizer restarts from fresh statistics each round.

use crate::data::{sample_batch, Dataset};
use crate::error::Result;
use crate::layers::ModelSpec;
use crate::model::{DenseLayer, PersonalizedModel, TensorizedModel};
use crate::objective::{
    compose_layers, factor_gradient_from_unfolded, grad_sq_norm, personalized_grad_composed,
    personalized_loss_composed, prox_sq_norm, BatchRef,
};
use crate::optim::Optimizer;
use crate::tensor::{unfold, DenseTensor, Matrix};
use rand_chacha::ChaCha8Rng;

/// Per-client hyperparameters of one local update round.
#[derive(Debug, Clone, Copy)]
pub struct LocalHyper {
    pub lambda: f64,
    pub tau: usize,
    pub s: usize,
    pub s_prime: usize,
    pub eta: f64,
    pub eta_p: f64,
    pub batch_size: usize,
}

/// Everything a client owns: shards, both models, optimizer states and its
/// private RNG stream.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub train_shard: Vec<usize>,
    pub test_shard: Vec<usize>,
    pub theta: PersonalizedModel,
    pub factors: TensorizedModel,
    pub personalized_opt: Optimizer,
    pub factor_opt: Optimizer,
    pub rng: ChaCha8Rng,
}

/// What a client reports back after a round.
#[derive(Debug, Clone)]
pub struct ClientUpdateOutcome {
    pub factors: TensorizedModel,
    /// Mean of the mini-batch objective at the start of each local round.
    pub train_loss_mean: f64,
    /// `||theta~ - [[A]]||_F` after the round.
    pub prox_gap: f64,
    /// Squared gradient norm at the last personalized step (the stopping
    /// criterion quantity; logged, never gating).
    pub grad_sq_last: f64,
    /// Actual mini-batch size used (the aggregation weight basis).
    pub batch_size: usize,
    /// Set when the shard was smaller than the batch size.
    pub sampled_with_replacement: bool,
}

/// Optimizer parameter-group index for layer `l`'s mode-`n` factor.
fn factor_group(l: usize, n: usize) -> usize {
    l * 5 + n
}

fn step_personalized(
    theta: &mut PersonalizedModel,
    grad: &PersonalizedModel,
    opt: &mut Optimizer,
) {
    for (l, (layer, glayer)) in theta.layers.iter_mut().zip(&grad.layers).enumerate() {
        match (layer, glayer) {
            (DenseLayer::Linear { w, b }, DenseLayer::Linear { w: gw, b: gb }) => {
                opt.step(2 * l, w.data_mut(), gw.data());
                opt.step(2 * l + 1, b, gb);
            }
            (DenseLayer::Conv { w }, DenseLayer::Conv { w: gw }) => {
                opt.step(2 * l, w.data_mut(), gw.data());
            }
            _ => unreachable!("gradient mirrors theta"),
        }
    }
}

fn train_personalized_composed(
    c: &mut ClientState,
    spec: &ModelSpec,
    composed: &[DenseTensor],
    batch: &BatchRef<'_>,
    lambda: f64,
    s: usize,
) -> Result<f64> {
    let mut grad_sq = 0.0;
    for _ in 0..s {
        let grad = personalized_grad_composed(&c.theta, spec, composed, batch, lambda)?;
        grad_sq = grad_sq_norm(&grad);
        step_personalized(&mut c.theta, &grad, &mut c.personalized_opt);
    }
    Ok(grad_sq)
}

/// Runs exactly `s` optimizer steps on the personalized objective with the
/// factors frozen; returns the squared gradient norm at the last step.
pub fn train_personalized(
    c: &mut ClientState,
    spec: &ModelSpec,
    batch: &BatchRef<'_>,
    lambda: f64,
    s: usize,
    eta_p: f64,
) -> Result<f64> {
    c.personalized_opt.lr = eta_p;
    let composed = compose_layers(&c.factors);
    train_personalized_composed(c, spec, &composed, batch, lambda, s)
}

fn theta_unfoldings(theta: &PersonalizedModel, factors: &TensorizedModel) -> Result<Vec<Vec<Matrix>>> {
    theta
        .layers
        .iter()
        .zip(&factors.layers)
        .map(|(tl, fl)| {
            let w = tl.weight_tensor();
            (0..fl.factor_count()).map(|n| unfold(&w, n)).collect()
        })
        .collect()
}

fn train_factors_unfolded(
    c: &mut ClientState,
    unfoldings: &[Vec<Matrix>],
    lambda: f64,
    s_prime: usize,
) -> Result<()> {
    for _ in 0..s_prime {
        for l in 0..c.factors.layers.len() {
            let n_modes = c.factors.layers[l].factor_count();
            for n in 0..n_modes {
                // Alternating: the gradient sees the factors already updated
                // earlier in this sweep.
                let kf = c.factors.layers[l].to_kruskal();
                let grad = factor_gradient_from_unfolded(&unfoldings[l][n], &kf, n, lambda)?;
                c.factor_opt.step(
                    factor_group(l, n),
                    c.factors.layers[l].factor_mut(n).data_mut(),
                    grad.data(),
                );
            }
        }
    }
    Ok(())
}

/// `s'` alternating sweeps over the factor matrices: layers in order, modes
/// ascending, each mode taking one optimizer step at the current (partially
/// updated) factors. Biases are never factorized and stay untouched.
pub fn train_factors(
    c: &mut ClientState,
    lambda: f64,
    s_prime: usize,
    eta: f64,
) -> Result<()> {
    c.factor_opt.lr = eta;
    let unfoldings = theta_unfoldings(&c.theta, &c.factors)?;
    train_factors_unfolded(c, &unfoldings, lambda, s_prime)
}

/// One full client round: adopt the broadcast factors, then `tau` local
/// rounds of (sample batch, train personalized, train factors). The
/// personalized model warm-starts; the factor optimizer restarts.
pub fn client_update(
    c: &mut ClientState,
    spec: &ModelSpec,
    dataset: &Dataset,
    broadcast: &TensorizedModel,
    hyper: &LocalHyper,
) -> Result<ClientUpdateOutcome> {
    c.factors = broadcast.clone();
    c.factor_opt.reset();
    c.personalized_opt.lr = hyper.eta_p;
    c.factor_opt.lr = hyper.eta;

    let mut loss_sum = 0.0;
    let mut grad_sq_last = 0.0;
    let mut with_replacement = false;
    for _ in 0..hyper.tau {
        let (batch_idx, repl) = sample_batch(&c.train_shard, hyper.batch_size, &mut c.rng)?;
        with_replacement |= repl;
        let batch = dataset.batch(&batch_idx);

        let composed = compose_layers(&c.factors);
        let loss = personalized_loss_composed(&c.theta, spec, &composed, &batch, hyper.lambda)?;
        loss_sum += loss.total;

        grad_sq_last =
            train_personalized_composed(c, spec, &composed, &batch, hyper.lambda, hyper.s)?;

        let unfoldings = theta_unfoldings(&c.theta, &c.factors)?;
        train_factors_unfolded(c, &unfoldings, hyper.lambda, hyper.s_prime)?;
    }
    let prox_gap = prox_sq_norm(&c.theta, &compose_layers(&c.factors))?.sqrt();
    Ok(ClientUpdateOutcome {
        factors: c.factors.clone(),
        train_loss_mean: if hyper.tau > 0 {
            loss_sum / hyper.tau as f64
        } else {
            0.0
        },
        prox_gap,
        grad_sq_last,
        batch_size: hyper.batch_size.min(c.train_shard.len().max(hyper.batch_size)),
        sampled_with_replacement: with_replacement,
    })
}
