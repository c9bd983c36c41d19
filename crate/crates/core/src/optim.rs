//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Applies one Adam update in place. The gradient is checked for non-finite
/// values before anything is modified.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Numerical(format!("gradient of {name}")));
    }
    let shapes_match = params
        .tensors()
        .iter()
        .zip(grads.tensors())
        .zip(state.m.tensors())
        .all(|((p, g), m)| p.1 == g.1 && p.1 == m.1);
    if !shapes_match {
        return Err(Error::Shape("parameter, gradient and moment shapes differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((_, p), (_, _, g)), (_, m)), (_, v)) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        for i in 0..p.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar(w: f64) -> ModelParams {
        let mut p = ModelParams::zeros(1, 1, 1);
        p.item_emb[[0, 0]] = w;
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(1.0);
        let mut state = OptimizerState::new(&p);
        let g = scalar(2.0); // d/dw w^2 at w = 1
        adam_step(&mut p, &g, &mut state, 0.001).unwrap();
        // m_hat = 2, v_hat = 4, so the step is lr * 2 / (2 + 1e-8)
        let expected = 1.0 - 0.001 * 2.0 / (2.0 + 1e-8);
        assert_abs_diff_eq!(p.item_emb[[0, 0]], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(p.item_emb[[0, 0]], 0.999, epsilon = 1e-9);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = ModelParams::zeros(2, 3, 2);
        p.user_emb.fill(0.25);
        let before = p.clone();
        let mut state = OptimizerState::new(&p);
        let zero = p.zeros_like();
        adam_step(&mut p, &zero, &mut state, 0.001).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = scalar(1.0);
        let mut state = OptimizerState::new(&p);
        let g = scalar(f64::NAN);
        assert!(matches!(
            adam_step(&mut p, &g, &mut state, 0.001),
            Err(Error::Numerical(_))
        ));
        assert_eq!(p, scalar(1.0));
        assert_eq!(state.step, 0);
    }
}
