//! Per-BS state, the EM weight and local training.

use crate::channel::RngStream;
use crate::error::{Error, Result};
use crate::metrics::{ChannelSample, Scenario};
use crate::nn::{adam_step, batch_objective, AdamState, Interference, LocalSample, ModelParams, NetConfig, Objective};

use super::{e_step, m_step, EmConfig};

/// Largest number of evaluation samples used for the EM weight.
pub const PI_EVAL_CAP: usize = 1024;

/// A BS's prepared samples and the interference its peers currently cause
/// on each of them.
#[derive(Debug, Clone)]
pub struct LocalData {
    pub obj: Objective,
    pub train: Vec<LocalSample>,
    pub eval: Vec<LocalSample>,
    pub train_inter: Vec<Interference>,
    pub eval_inter: Vec<Interference>,
}

impl LocalData {
    /// Prepares BS `m`'s samples; interference starts at zero.
    pub fn from_samples(
        scn: &Scenario,
        cfg: &NetConfig,
        m: usize,
        train: &[ChannelSample],
        eval: &[ChannelSample],
    ) -> Result<Self> {
        let obj = Objective::for_cell(scn, m)?;
        let prep = |s: &[ChannelSample]| -> Result<Vec<LocalSample>> {
            s.iter()
                .map(|x| {
                    if x.bs != m {
                        return Err(Error::domain(format!("sample of BS {} given to BS {m}", x.bs)));
                    }
                    LocalSample::from_sample(scn, cfg, x)
                })
                .collect()
        };
        let train = prep(train)?;
        let eval = prep(eval)?;
        let none = Interference::none(obj.n_users);
        Ok(Self {
            train_inter: vec![none.clone(); train.len()],
            eval_inter: vec![none; eval.len()],
            obj,
            train,
            eval,
        })
    }
}

/// One federated client.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub bs: usize,
    /// Personalized model.
    pub params: ModelParams,
    pub adam: AdamState,
    /// Most recent aggregation weight.
    pub pi: f64,
    pub rho: f64,
    pub data: LocalData,
}

/// Proximal pull toward an anchor model: adds `lambda/2 * |w - anchor|^2`
/// to the loss and repeats each mini-batch step `inner_steps` times.
#[derive(Debug, Clone, Copy)]
pub struct Prox<'a> {
    pub anchor: &'a ModelParams,
    pub lambda: f64,
    pub inner_steps: usize,
}

/// Outcome of a local training call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    /// Mean rate loss (without any proximal term) over the last epoch.
    pub mean_loss: f64,
    pub steps: usize,
    /// Beamformers produced during training and how many broke the budget.
    pub checked: usize,
    pub over_budget: usize,
}

/// EM weight of the global model for this client: per evaluation batch the
/// posterior that the global model fits better, averaged over batches.
/// Uses at most [`PI_EVAL_CAP`] evaluation samples, shuffled by `rng`.
pub fn compute_pi(
    client: &ClientState,
    cfg: &NetConfig,
    global: &ModelParams,
    em: &EmConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    em.validate()?;
    client.params.check_same_layout(global)?;
    let data = &client.data;
    let n = data.eval.len().min(PI_EVAL_CAP);
    if n < em.eval_batch {
        return Err(Error::InsufficientData(format!(
            "BS {} has {} evaluation samples, fewer than one batch of {}",
            client.bs,
            data.eval.len(),
            em.eval_batch
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let lambdas = idx
        .chunks(em.eval_batch)
        .map(|batch| {
            let lg = batch_objective(global, cfg, &data.obj, &data.eval, &data.eval_inter, batch, false)?.loss;
            let ll = batch_objective(&client.params, cfg, &data.obj, &data.eval, &data.eval_inter, batch, false)?.loss;
            e_step(lg, ll, em)
        })
        .collect::<Result<Vec<_>>>()?;
    m_step(&lambdas)
}

/// Rate loss, proximal loss and gradient of both on one mini-batch.
pub(crate) fn step_objective(
    params: &ModelParams,
    cfg: &NetConfig,
    data: &LocalData,
    batch: &[usize],
    prox: Option<&Prox>,
) -> Result<(f64, f64, Vec<f64>, usize)> {
    let mut lg = batch_objective(params, cfg, &data.obj, &data.train, &data.train_inter, batch, true)?;
    let mut total = lg.loss;
    if let Some(p) = prox {
        params.check_same_layout(p.anchor)?;
        let mut sq = 0.0;
        for ((g, w), a) in lg.grad.iter_mut().zip(params.values()).zip(p.anchor.values()) {
            let d = w - a;
            sq += d * d;
            *g += p.lambda * d;
        }
        total += 0.5 * p.lambda * sq;
    }
    Ok((lg.loss, total, lg.grad, lg.over_budget))
}

/// Runs `epochs` shuffled passes over the client's training set with Adam.
pub fn local_train(
    client: &mut ClientState,
    cfg: &NetConfig,
    epochs: usize,
    batch_size: usize,
    prox: Option<Prox>,
    rng: &mut RngStream,
) -> Result<TrainStats> {
    if epochs == 0 || batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be at least 1".into()));
    }
    if let Some(p) = &prox {
        if !(p.lambda >= 0.0 && p.lambda.is_finite()) || p.inner_steps == 0 {
            return Err(Error::Config("proximal weight must be >= 0 with at least one inner step".into()));
        }
    }
    let n = client.data.train.len();
    if n == 0 {
        return Err(Error::Empty("training set"));
    }
    let inner = prox.as_ref().map_or(1, |p| p.inner_steps);
    let mut stats = TrainStats {
        mean_loss: 0.0,
        steps: 0,
        checked: 0,
        over_budget: 0,
    };
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut idx);
        let mut epoch_loss = 0.0;
        for batch in idx.chunks(batch_size) {
            for step in 0..inner {
                let (loss, _, grad, over) = step_objective(&client.params, cfg, &client.data, batch, prox.as_ref())?;
                if step == 0 {
                    epoch_loss += loss * batch.len() as f64;
                }
                stats.checked += batch.len();
                stats.over_budget += over;
                adam_step(&mut client.params, &grad, &mut client.adam)?;
                stats.steps += 1;
            }
        }
        stats.mean_loss = epoch_loss / n as f64;
    }
    if !client.params.is_finite() {
        return Err(Error::Numerical(format!("BS {} parameters diverged", client.bs)));
    }
    Ok(stats)
}
