//! Finite-difference verification of the analytic gradients.
//!
//! The numeric side differentiates the objective through
//! [`kruskal_reconstruct`] directly, a code path independent of the
//! Khatri-Rao-chain form being checked.

use crate::error::Result;
use crate::kruskal::{kruskal_reconstruct, KruskalFactors};
use crate::layers::{Activation, LayerKind, LayerSpec, ModelSpec};
use crate::model::{DenseLayer, PersonalizedModel, TensorizedModel};
use crate::objective::{factor_gradient, personalized_grad, personalized_loss, BatchRef};
use crate::tensor::{DenseTensor, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pass threshold on the max relative error of any coordinate.
pub const GRADCHECK_TOL: f64 = 1e-5;

const FD_STEP: f64 = 1e-6;

/// One verified case.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: String,
    pub max_rel_err: f64,
    /// Coordinates exceeding [`GRADCHECK_TOL`], as `(description, rel_err)`.
    pub failures: Vec<(String, f64)>,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOL
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn shape_for_modes(modes: usize) -> Vec<usize> {
    match modes {
        1 => vec![5],
        2 => vec![3, 4],
        3 => vec![3, 2, 2],
        _ => {
            let mut s = vec![2, 3, 2, 2];
            s.extend(std::iter::repeat(2).take(modes.saturating_sub(4)));
            s
        }
    }
}

/// Checks the closed-form factor gradient against central finite
/// differences of `(lambda/2) ||theta - [[A]]||^2` for one (modes, rank)
/// case. `sign` multiplies the analytic gradient: 1.0 for a real check,
/// -1.0 as a mutation hook that must make the check fail.
pub fn check_factor_gradient(
    modes: usize,
    rank: usize,
    seed: u64,
    sign: f64,
) -> Result<GradCheckCase> {
    let shape = shape_for_modes(modes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = KruskalFactors::new(
        shape
            .iter()
            .map(|&e| {
                Matrix::new(
                    e,
                    rank,
                    (0..e * rank).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .expect("positive extents")
            })
            .collect(),
        shape.clone(),
    )?;
    let len: usize = shape.iter().product();
    let theta = DenseTensor::new(
        shape.clone(),
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let lambda = 2.5;

    let objective = |f: &KruskalFactors| {
        let rec = kruskal_reconstruct(f);
        let mut acc = 0.0;
        for (a, b) in theta.data().iter().zip(rec.data()) {
            acc += (a - b) * (a - b);
        }
        0.5 * lambda * acc
    };

    let mut max_err = 0.0f64;
    let mut failures = Vec::new();
    for mode in 0..shape.len() {
        let grad = factor_gradient(&theta, &factors, mode, lambda)?;
        for i in 0..factors.factors[mode].rows() {
            for r in 0..rank {
                let mut fp = factors.clone();
                let base = fp.factors[mode].get(i, r);
                fp.factors[mode].set(i, r, base + FD_STEP);
                let up = objective(&fp);
                fp.factors[mode].set(i, r, base - FD_STEP);
                let dn = objective(&fp);
                let numeric = (up - dn) / (2.0 * FD_STEP);
                let err = rel_err(sign * grad.get(i, r), numeric);
                if err >= GRADCHECK_TOL {
                    failures.push((format!("mode {mode} entry ({i},{r})"), err));
                }
                max_err = max_err.max(err);
            }
        }
    }
    Ok(GradCheckCase {
        name: format!("factor_gradient N={modes} R={rank}"),
        max_rel_err: max_err,
        failures,
    })
}

/// Checks manual backpropagation on a small two-layer MLP against central
/// finite differences of the full mini-batch objective.
pub fn check_backprop(seed: u64, sign: f64) -> Result<GradCheckCase> {
    let spec = ModelSpec::new(vec![
        LayerSpec {
            kind: LayerKind::Linear { i_out: 3, i_in: 3 },
            rank: 2,
            activation: Activation::Relu,
        },
        LayerSpec {
            kind: LayerKind::Linear { i_out: 2, i_in: 3 },
            rank: 2,
            activation: Activation::Softmax,
        },
    ])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_matrix = |rows: usize, cols: usize| {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .expect("positive extents")
    };
    let theta = PersonalizedModel {
        layers: vec![
            DenseLayer::Linear { w: rand_matrix(3, 3), b: vec![0.1, -0.2, 0.05] },
            DenseLayer::Linear { w: rand_matrix(2, 3), b: vec![0.0, 0.3] },
        ],
    };
    let factors = TensorizedModel {
        layers: vec![
            crate::model::TensorizedLayer::Linear(
                crate::layers::TensorizedLinear::new(
                    rand_matrix(3, 2),
                    rand_matrix(3, 2),
                    vec![0.0; 3],
                )?,
            ),
            crate::model::TensorizedLayer::Linear(
                crate::layers::TensorizedLinear::new(
                    rand_matrix(2, 2),
                    rand_matrix(3, 2),
                    vec![0.0; 2],
                )?,
            ),
        ],
    };
    let xs: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ys = [0usize, 1, 1, 0];
    let shape = [3usize];
    let batch = BatchRef {
        feature_shape: &shape,
        samples: xs.iter().map(|x| x.as_slice()).zip(ys.iter().copied()).collect(),
    };
    let lambda = 0.7;

    let grad = personalized_grad(&theta, &spec, &factors, &batch, lambda)?;

    let mut flat_grad = Vec::new();
    for l in &grad.layers {
        if let DenseLayer::Linear { w, b } = l {
            flat_grad.extend_from_slice(w.data());
            flat_grad.extend_from_slice(b);
        }
    }
    let mut max_err = 0.0f64;
    let mut failures = Vec::new();
    let mut idx = 0usize;
    for l in 0..theta.layers.len() {
        let (w_len, b_len) = match &theta.layers[l] {
            DenseLayer::Linear { w, b } => (w.data().len(), b.len()),
            DenseLayer::Conv { w } => (w.data().len(), 0),
        };
        for local in 0..w_len + b_len {
            let mut perturbed = theta.clone();
            let slot = |m: &mut PersonalizedModel, v: f64| {
                if let DenseLayer::Linear { w, b } = &mut m.layers[l] {
                    if local < w_len {
                        w.data_mut()[local] = v;
                    } else {
                        b[local - w_len] = v;
                    }
                }
            };
            let base = {
                let DenseLayer::Linear { w, b } = &theta.layers[l] else { unreachable!() };
                if local < w_len { w.data()[local] } else { b[local - w_len] }
            };
            slot(&mut perturbed, base + FD_STEP);
            let up = personalized_loss(&perturbed, &spec, &factors, &batch, lambda)?.total;
            slot(&mut perturbed, base - FD_STEP);
            let dn = personalized_loss(&perturbed, &spec, &factors, &batch, lambda)?.total;
            let numeric = (up - dn) / (2.0 * FD_STEP);
            let err = rel_err(sign * flat_grad[idx], numeric);
            if err >= GRADCHECK_TOL {
                failures.push((format!("layer {l} param {local}"), err));
            }
            max_err = max_err.max(err);
            idx += 1;
        }
    }
    Ok(GradCheckCase {
        name: "backprop MLP 3-3-2".into(),
        max_rel_err: max_err,
        failures,
    })
}

/// The full verification suite: factor gradients over the given mode counts
/// and ranks, plus the backprop check.
pub fn run_suite(
    modes_list: &[usize],
    ranks: &[usize],
    seed: u64,
    sign: f64,
) -> Result<Vec<GradCheckCase>> {
    let mut cases = Vec::new();
    for (i, &modes) in modes_list.iter().enumerate() {
        for (j, &rank) in ranks.iter().enumerate() {
            let case_seed = seed.wrapping_add((i * ranks.len() + j) as u64);
            cases.push(check_factor_gradient(modes, rank, case_seed, sign)?);
        }
    }
    cases.push(check_backprop(seed.wrapping_add(1000), sign)?);
    Ok(cases)
}
