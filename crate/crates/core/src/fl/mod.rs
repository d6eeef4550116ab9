//! Federated orchestration: EM-weighted personalized aggregation, local
//! training, the averaging server and the baseline strategies.
//!
//! Each round the server broadcasts the global model; every BS decides how
//! much of it to take (`pi`), mixes it into its personalized model, trains
//! locally, and the server averages the trained models into the next global
//! model. The EM weight is the batch mean of the posterior probability that
//! the global model explains the local evaluation data better than the
//! personalized one.

mod client;
mod federation;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelParams;

pub use client::{compute_pi, local_train, ClientState, LocalData, Prox, TrainStats, PI_EVAL_CAP};
pub use federation::{
    BsRound, Federation, PowerAudit, RoundMetrics, Schedule, Strategy, CHECKPOINT_FORMAT_VERSION,
};

/// Parameters of the EM weight computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Temperature of the posterior.
    pub kappa: f64,
    /// Mini-batch size used when averaging posteriors.
    pub eval_batch: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            eval_batch: 64,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be positive, got {}", self.kappa)));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Posterior probability that the global model fits better:
/// `exp(-k lg) / (exp(-k lg) + exp(-k ll))`, evaluated as a sigmoid of the
/// loss gap so that large gaps neither overflow nor produce NaN.
pub fn e_step(loss_global: f64, loss_local: f64, em: &EmConfig) -> Result<f64> {
    if !loss_global.is_finite() || !loss_local.is_finite() {
        return Err(Error::Numerical(format!(
            "e-step needs finite losses, got {loss_global} and {loss_local}"
        )));
    }
    let x = em.kappa * (loss_local - loss_global);
    Ok(if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    })
}

/// Aggregation weight: the mean of the per-batch posteriors.
pub fn m_step(lambdas: &[f64]) -> Result<f64> {
    if lambdas.is_empty() {
        return Err(Error::Empty("posterior list"));
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::domain(format!("posterior {l} outside [0, 1]")));
    }
    Ok((lambdas.iter().sum::<f64>() / lambdas.len() as f64).clamp(0.0, 1.0))
}

/// `(1 - pi) * local + pi * global`, elementwise.
pub fn mix_models(local: &ModelParams, global: &ModelParams, pi: f64) -> Result<ModelParams> {
    local.check_same_layout(global)?;
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::domain(format!("mixing weight {pi} outside [0, 1]")));
    }
    let mut out = local.clone();
    for (o, g) in out.values_mut().iter_mut().zip(global.values()) {
        *o = (1.0 - pi) * *o + pi * g;
    }
    Ok(out)
}

/// Weighted mean of client models; weights are normalized internally.
pub fn fedavg_aggregate(clients: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = *clients.first().ok_or(Error::Empty("client list"))?;
    if weights.len() != clients.len() {
        return Err(Error::dim(format!("{} weights for {} clients", weights.len(), clients.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::domain("aggregation weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::domain("aggregation weights are all zero"));
    }
    // Accumulated as offsets from the first client so that identical
    // clients reproduce it exactly.
    let mut out = first.clone();
    for (c, w) in clients.iter().zip(weights).skip(1) {
        first.check_same_layout(c)?;
        let w = w / total;
        for ((o, v), f) in out.values_mut().iter_mut().zip(c.values()).zip(first.values()) {
            *o += w * (v - f);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetConfig;
    use proptest::prelude::*;

    fn em(kappa: f64) -> EmConfig {
        EmConfig { kappa, eval_batch: 4 }
    }

    fn filled(v: f64) -> ModelParams {
        let layout = NetConfig::new(1, 1, 2).unwrap().layout();
        let n = layout.total();
        ModelParams::from_vec(layout, vec![v; n]).unwrap()
    }

    #[test]
    fn e_step_examples() {
        assert_eq!(e_step(3.0, 3.0, &em(1.0)).unwrap(), 0.5);
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((e_step(1.0, 2.0, &em(1.0)).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.731059).abs() < 1e-6);
        let tiny = e_step(1001.0, 1.0, &em(1.0)).unwrap();
        assert!(tiny < 1e-300 && tiny.is_finite());
        assert_eq!(e_step(1.0, 1001.0, &em(1.0)).unwrap(), 1.0);
        assert!(matches!(e_step(f64::NAN, 1.0, &em(1.0)), Err(Error::Numerical(_))));
    }

    #[test]
    fn m_step_examples() {
        assert_eq!(m_step(&[0.5, 0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(m_step(&[0.0, 1.0]).unwrap(), 0.5);
        assert!((m_step(&[0.2, 0.4, 0.9]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(m_step(&[]), Err(Error::Empty(_))));
        assert!(m_step(&[1.5]).is_err());
    }

    #[test]
    fn mix_examples() {
        let local = filled(0.0);
        let global = filled(2.0);
        assert_eq!(mix_models(&local, &global, 0.0).unwrap(), local);
        assert_eq!(mix_models(&local, &global, 1.0).unwrap(), global);
        assert!(mix_models(&local, &global, 0.5).unwrap().values().iter().all(|&v| v == 1.0));
        assert!(mix_models(&local, &global, 1.1).is_err());
        let other = ModelParams::zeros(NetConfig::new(2, 1, 2).unwrap().layout());
        assert!(mix_models(&local, &other, 0.5).is_err());
    }

    #[test]
    fn fedavg_examples() {
        let a = filled(0.0);
        let b = filled(2.0);
        assert_eq!(fedavg_aggregate(&[&b, &b], &[1.0, 1.0]).unwrap(), b);
        let odd = filled(0.1);
        assert_eq!(fedavg_aggregate(&[&odd, &odd, &odd], &[36.0, 36.0, 36.0]).unwrap(), odd);
        assert!(fedavg_aggregate(&[&a, &b], &[1.0, 1.0]).unwrap().values().iter().all(|&v| v == 1.0));
        let c = filled(4.0);
        assert!(fedavg_aggregate(&[&a, &c], &[1.0, 3.0]).unwrap().values().iter().all(|&v| v == 3.0));
        assert!(fedavg_aggregate(&[&a, &c], &[0.0, 0.0]).is_err());
        assert!(fedavg_aggregate(&[&a], &[1.0, 1.0]).is_err());
        assert!(fedavg_aggregate(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn e_step_is_monotone_and_sharpens_with_kappa(
            lg in -50.0f64..50.0, ll in -50.0f64..50.0, d in 0.01f64..5.0, k in 0.1f64..3.0,
        ) {
            let base = e_step(lg, ll, &em(k)).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            prop_assert!(e_step(lg + d, ll, &em(k)).unwrap() <= base);
            prop_assert!(e_step(lg, ll + d, &em(k)).unwrap() >= base);
            if (lg - ll).abs() > 1e-3 && k * (lg - ll).abs() < 15.0 {
                let sharper = e_step(lg, ll, &em(k * 1.5)).unwrap();
                prop_assert!((sharper - 0.5).abs() > (base - 0.5).abs());
            }
        }

        #[test]
        fn mixing_a_fixed_point_is_identity(v in -3.0f64..3.0, pi in 0.0f64..=1.0) {
            let p = filled(v);
            let mixed = mix_models(&p, &p, pi).unwrap();
            for x in mixed.values() {
                prop_assert!((x - v).abs() <= 1e-15 * (1.0 + v.abs()));
            }
        }

        #[test]
        fn fedavg_stays_within_client_bounds(
            a in -5.0f64..5.0, b in -5.0f64..5.0, wa in 0.0f64..10.0, wb in 0.01f64..10.0,
        ) {
            let out = fedavg_aggregate(&[&filled(a), &filled(b)], &[wa, wb]).unwrap();
            let (lo, hi) = (a.min(b), a.max(b));
            for x in out.values() {
                prop_assert!(*x >= lo - 1e-12 && *x <= hi + 1e-12);
            }
        }
    }
}
