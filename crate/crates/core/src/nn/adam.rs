//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub first_moment: Vec<f64>,
    #[serde(skip)]
    pub second_moment: Vec<f64>,
}

impl AdamState {
    /// Fresh state for `n` parameters with the usual defaults
    /// (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut ModelParams, grad: &[f64], state: &mut AdamState) -> Result<()> {
    let n = params.len();
    if grad.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(Error::dim(format!(
            "adam: {} params, {} grads, {} moments",
            n,
            grad.len(),
            state.first_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (((p, &g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetConfig;

    fn three_params(values: [f64; 3]) -> ModelParams {
        // smallest layout; only the first three entries are exercised
        let layout = NetConfig::new(1, 1, 1).unwrap().layout();
        let mut v = vec![0.0; layout.total()];
        v[..3].copy_from_slice(&values);
        ModelParams::from_vec(layout, v).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = three_params([0.5, -1.0, 2.0]);
        let before = p.clone();
        let mut st = AdamState::new(p.len(), 1e-4);
        let zeros = vec![0.0; p.len()];
        adam_step(&mut p, &zeros, &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m_hat = g, v_hat = g^2 after one step, so the update is
        // -lr * g / (|g| + eps); values computed by hand at lr = 1e-3.
        let mut p = three_params([1.0, 2.0, 3.0]);
        let mut g = vec![0.0; p.len()];
        g[..3].copy_from_slice(&[0.5, -2.0, 1e-9]);
        let mut st = AdamState::new(p.len(), 1e-3);
        adam_step(&mut p, &g, &mut st).unwrap();
        let expect = [
            1.0 - 1e-3 * 0.5 / (0.5 + 1e-8),
            2.0 + 1e-3 * 2.0 / (2.0 + 1e-8),
            3.0 - 1e-3 * 1e-9 / (1e-9 + 1e-8),
        ];
        let frozen = [0.99900000002, 2.000999999995, 2.9999090909090909];
        for i in 0..3 {
            assert!((p.values()[i] - expect[i]).abs() < 1e-12);
            assert!((p.values()[i] - frozen[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_length_checked() {
        let p0 = three_params([0.1, 0.2, 0.3]);
        let g: Vec<f64> = (0..p0.len()).map(|i| (i as f64).sin()).collect();
        let (mut a, mut b) = (p0.clone(), p0.clone());
        let (mut sa, mut sb) = (AdamState::new(p0.len(), 1e-4), AdamState::new(p0.len(), 1e-4));
        adam_step(&mut a, &g, &mut sa).unwrap();
        adam_step(&mut b, &g, &mut sb).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(adam_step(&mut a, &g[1..], &mut sa).is_err());
    }
}
