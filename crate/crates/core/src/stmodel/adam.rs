use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::model::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64) {
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for (((p, g), m), v) in tensors {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stmodel::ModelConfig;

    fn small() -> ModelParams {
        ModelParams::init(
            &ModelConfig {
                hidden: 2,
                ..ModelConfig::default()
            },
            9,
        )
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = small();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &before.zeros_like(), &mut st, 1e-3);
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = small();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.temporal_b[[0, 0]] = 0.37;
        g.temporal_b[[0, 1]] = -5.0;
        let mut st = AdamState::new(&p);
        let lr = 1e-4;
        adam_step(&mut p, &g, &mut st, lr);
        let d0 = p.temporal_b[[0, 0]] - before.temporal_b[[0, 0]];
        let d1 = p.temporal_b[[0, 1]] - before.temporal_b[[0, 1]];
        // |Δ| = lr·|g| / (|g| + ε)
        assert!((d0 + lr * 0.37 / (0.37 + EPSILON)).abs() < 1e-15);
        assert!((d1 - lr * 5.0 / (5.0 + EPSILON)).abs() < 1e-15);
    }

    #[test]
    fn repeated_gradient_does_not_grow_step() {
        let mut p = small();
        let mut g = p.zeros_like();
        g.mu_head.b2[[0, 0]] = 2.5;
        let mut st = AdamState::new(&p);
        let x0 = p.mu_head.b2[[0, 0]];
        adam_step(&mut p, &g, &mut st, 1e-3);
        let x1 = p.mu_head.b2[[0, 0]];
        adam_step(&mut p, &g, &mut st, 1e-3);
        let x2 = p.mu_head.b2[[0, 0]];
        assert!((x2 - x1).abs() <= (x1 - x0).abs() * (1.0 + 1e-6));
    }
}
