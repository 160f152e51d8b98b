//! First-order optimizers over flat parameter slices.
//!
//! The personalized model trains with Nesterov-accelerated SGD and the
//! factor matrices with Adam; plain SGD exists for the closed-form tests.
//! State is kept per registered parameter group, addressed by a stable
//! index chosen by the caller.

/// Optimizer family plus its fixed hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Nesterov { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn nesterov() -> Self {
        OptimizerKind::Nesterov { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct ParamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

/// Per-parameter-group optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    states: Vec<ParamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        assert!(lr >= 0.0, "step size must be non-negative");
        Self {
            kind,
            lr,
            states: Vec::new(),
        }
    }

    /// One update of parameter group `idx` in place.
    pub fn step(&mut self, idx: usize, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        if self.states.len() <= idx {
            self.states.resize_with(idx + 1, ParamState::default);
        }
        let state = &mut self.states[idx];
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Nesterov { momentum } => {
                if state.m.len() != params.len() {
                    state.m = vec![0.0; params.len()];
                }
                for ((p, &g), buf) in params.iter_mut().zip(grad).zip(&mut state.m) {
                    *buf = momentum * *buf + g;
                    *p -= self.lr * (g + momentum * *buf);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if state.m.len() != params.len() {
                    state.m = vec![0.0; params.len()];
                    state.v = vec![0.0; params.len()];
                }
                state.t += 1;
                let bc1 = 1.0 - beta1.powi(state.t as i32);
                let bc2 = 1.0 - beta2.powi(state.t as i32);
                for (((p, &g), m), v) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(&mut state.m)
                    .zip(&mut state.v)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }

    /// Drops all moment buffers (fresh statistics for a fresh point).
    pub fn reset(&mut self) {
        self.states.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_is_scaled_gradient() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let mut p = vec![1.0, -2.0];
        opt.step(0, &mut p, &[0.5, 1.0]);
        assert_eq!(p, vec![1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn adam_first_step_matches_bias_corrected_formula() {
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.01);
        let g = 0.37;
        let mut p = vec![0.0];
        opt.step(0, &mut p, &[g]);
        let expect = -0.01 * g / (g.abs() + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15, "{} vs {expect}", p[0]);
    }

    #[test]
    fn nesterov_matches_hand_unrolled_recursion() {
        let (lr, mu) = (0.1, 0.9);
        let mut opt = Optimizer::new(OptimizerKind::nesterov(), lr);
        let (g1, g2) = (0.8, -0.3);
        let mut p = vec![1.0];
        opt.step(0, &mut p, &[g1]);
        // v1 = g1; p1 = p0 - lr*(g1 + mu*v1) = p0 - lr*(1+mu)*g1
        let p1 = 1.0 - lr * (1.0 + mu) * g1;
        assert!((p[0] - p1).abs() < 1e-15);
        opt.step(0, &mut p, &[g2]);
        // v2 = mu*g1 + g2; p2 = p1 - lr*(g2 + mu*v2)
        let v2 = mu * g1 + g2;
        let p2 = p1 - lr * (g2 + mu * v2);
        assert!((p[0] - p2).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::nesterov(), OptimizerKind::adam()] {
            let mut opt = Optimizer::new(kind, 0.0);
            let mut p = vec![1.0, 2.0];
            opt.step(0, &mut p, &[3.0, -4.0]);
            assert_eq!(p, vec![1.0, 2.0]);
        }
    }

    #[test]
    fn reset_clears_momentum() {
        let mut opt = Optimizer::new(OptimizerKind::nesterov(), 0.1);
        let mut p = vec![0.0];
        opt.step(0, &mut p, &[1.0]);
        opt.reset();
        let mut q = vec![0.0];
        opt.step(0, &mut q, &[1.0]);
        assert_eq!(p, q);
    }

    #[test]
    fn groups_are_independent() {
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1);
        let mut a = vec![0.0];
        let mut b = vec![0.0];
        opt.step(0, &mut a, &[1.0]);
        opt.step(1, &mut b, &[1.0]);
        assert_eq!(a, b);
    }
}
