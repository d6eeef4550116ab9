//! The round loop shared by every strategy, plus checkpointing.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ComplexMatrix, RngStream};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    beamformers_for, init_params, read_adam, read_params, utility_and_grad, write_adam, write_params, AdamState,
    Interference, ModelParams, NetConfig, POWER_TOLERANCE,
};

use super::client::{compute_pi, local_train, ClientState, LocalData, Prox};
use super::{fedavg_aggregate, mix_models, EmConfig};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const INIT_STREAM: u64 = 0x1417;
const TRAIN_STREAM: u64 = 0x7a17;
const PI_STREAM: u64 = 0x9117;
const FORWARD_CHUNK: usize = 256;

/// How clients combine the global model with their own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Strategy {
    /// EM-weighted mixing of the global model into each personalized model.
    EmPfl,
    /// Mixing with a constant weight.
    FixedPfl { pi: f64 },
    /// Every BS deploys the averaged model.
    FedAvg,
    /// Averages all but the last `head_layers` layers; heads stay local.
    FedPer { head_layers: usize },
    /// Local training with a proximal pull toward the global model.
    PFedMe { lambda: f64, inner_steps: usize },
    /// No communication at all.
    LocalOnly,
}

impl Strategy {
    pub const NAMES: [&'static str; 6] = ["em_pfl", "fixed_pfl", "fedavg", "fedper", "pfedme", "local_only"];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::EmPfl => "em_pfl",
            Strategy::FixedPfl { .. } => "fixed_pfl",
            Strategy::FedAvg => "fedavg",
            Strategy::FedPer { .. } => "fedper",
            Strategy::PFedMe { .. } => "pfedme",
            Strategy::LocalOnly => "local_only",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Strategy::FixedPfl { pi } if !(0.0..=1.0).contains(&pi) => {
                Err(Error::Config(format!("pi_fixed must lie in [0, 1], got {pi}")))
            }
            Strategy::PFedMe { lambda, inner_steps } if !(lambda >= 0.0 && lambda.is_finite()) || inner_steps == 0 => {
                Err(Error::Config("pfedme needs lambda >= 0 and inner_steps >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a strategy name with default hyperparameters.
impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "em_pfl" => Strategy::EmPfl,
            "fixed_pfl" => Strategy::FixedPfl { pi: 0.5 },
            "fedavg" => Strategy::FedAvg,
            "fedper" => Strategy::FedPer { head_layers: 1 },
            "pfedme" => Strategy::PFedMe {
                lambda: 15.0,
                inner_steps: 5,
            },
            "local_only" => Strategy::LocalOnly,
            _ => {
                return Err(Error::Config(format!(
                    "unknown strategy '{s}' (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }
}

/// Training hyperparameters of a federation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub hidden: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub em: EmConfig,
    pub seed: u64,
    /// Worker threads for client-parallel work; results do not depend on it.
    #[serde(skip, default = "one")]
    pub threads: usize,
}

fn one() -> usize {
    1
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.local_epochs == 0 || self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config(
                "hidden, local_epochs, batch_size and threads must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        self.em.validate()
    }
}

/// One BS's record for one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsRound {
    pub pi: f64,
    /// Mean training loss over the last local epoch.
    pub loss: f64,
    pub comm_rate: f64,
    pub radar_rate: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub per_bs: Vec<BsRound>,
    /// Sum of the per-BS utilities.
    pub system_utility: f64,
    pub duration_secs: f64,
}

impl RoundMetrics {
    /// Largest minus smallest aggregation weight.
    pub fn pi_spread(&self) -> f64 {
        let (lo, hi) = self
            .per_bs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| (lo.min(b.pi), hi.max(b.pi)));
        hi - lo
    }
}

/// Running count of power-budget checks over every beamformer produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PowerAudit {
    pub checked: u64,
    pub violations: u64,
    pub max_power: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointState {
    format_version: u32,
    rounds_done: usize,
    strategy: Strategy,
    schedule: Schedule,
    pis: Vec<f64>,
    audit: PowerAudit,
}

/// A server plus its clients over one dataset.
pub struct Federation<'d> {
    dataset: &'d Dataset,
    cfg: NetConfig,
    strategy: Strategy,
    schedule: Schedule,
    global: ModelParams,
    clients: Vec<ClientState>,
    rounds_done: usize,
    audit: PowerAudit,
    pool: rayon::ThreadPool,
}

impl<'d> Federation<'d> {
    /// All clients and the server start from the same initialization.
    pub fn new(dataset: &'d Dataset, strategy: Strategy, schedule: Schedule) -> Result<Self> {
        strategy.validate()?;
        schedule.validate()?;
        let scn = &dataset.scenario;
        scn.validate()?;
        let cfg = NetConfig::new(scn.n_t, scn.k_max(), schedule.hidden)?;
        let global = init_params(&cfg, &mut RngStream::derive(schedule.seed, &[INIT_STREAM]));
        let clients = (0..scn.n_cells())
            .map(|m| {
                Ok(ClientState {
                    bs: m,
                    params: global.clone(),
                    adam: AdamState::new(global.len(), schedule.lr),
                    pi: 0.0,
                    rho: scn.cells[m].rho,
                    data: LocalData::from_samples(scn, &cfg, m, dataset.train(m), dataset.eval(m))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(schedule.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let mut fed = Self {
            dataset,
            cfg,
            strategy,
            schedule,
            global,
            clients,
            rounds_done: 0,
            audit: PowerAudit::default(),
            pool,
        };
        fed.deploy()?;
        Ok(fed)
    }

    pub fn net_config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn rounds_done(&self) -> usize {
        self.rounds_done
    }

    pub fn audit(&self) -> PowerAudit {
        self.audit
    }

    /// Parameters shared through the server; the rest stay with the client.
    fn shared_len(&self) -> usize {
        match self.strategy {
            Strategy::FedAvg => self.global.len(),
            Strategy::FedPer { head_layers } => self.global.layout().trailing_span(head_layers).start,
            _ => 0,
        }
    }

    /// Runs one full round: broadcast, weighting, mixing, local training,
    /// aggregation, then deployment and evaluation of the personalized
    /// models.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let start = Instant::now();
        let t = self.rounds_done as u64;
        let (cfg, strategy, sched) = (self.cfg, self.strategy, self.schedule);
        let global = &self.global;
        let shared_fraction = self.shared_len() as f64 / global.len() as f64;
        let clients = &mut self.clients;
        let outcomes = self.pool.install(|| {
            clients
                .par_iter_mut()
                .map(|c| {
                    let m = c.bs as u64;
                    let pi = match strategy {
                        Strategy::EmPfl => {
                            compute_pi(c, &cfg, global, &sched.em, &mut RngStream::derive(sched.seed, &[PI_STREAM, m, t]))?
                        }
                        Strategy::FixedPfl { pi } => pi,
                        Strategy::FedAvg | Strategy::FedPer { .. } => shared_fraction,
                        Strategy::PFedMe { .. } | Strategy::LocalOnly => 0.0,
                    };
                    if matches!(strategy, Strategy::EmPfl | Strategy::FixedPfl { .. }) {
                        c.params = mix_models(&c.params, global, pi)?;
                    }
                    c.pi = pi;
                    let prox = match strategy {
                        Strategy::PFedMe { lambda, inner_steps } => Some(Prox {
                            anchor: global,
                            lambda,
                            inner_steps,
                        }),
                        _ => None,
                    };
                    let mut rng = RngStream::derive(sched.seed, &[TRAIN_STREAM, m, t]);
                    local_train(c, &cfg, sched.local_epochs, sched.batch_size, prox, &mut rng)
                })
                .collect::<Vec<_>>()
        });
        let stats = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
        for s in &stats {
            self.audit.checked += s.checked as u64;
            self.audit.violations += s.over_budget as u64;
        }

        let weights: Vec<f64> = self.clients.iter().map(|c| c.data.train.len() as f64).collect();
        let trained: Vec<&ModelParams> = self.clients.iter().map(|c| &c.params).collect();
        self.global = fedavg_aggregate(&trained, &weights)?;
        let shared = self.shared_len();
        for c in &mut self.clients {
            c.params.values_mut()[..shared].copy_from_slice(&self.global.values()[..shared]);
        }
        self.rounds_done += 1;

        let eval = self.deploy()?;
        let per_bs: Vec<BsRound> = eval
            .into_iter()
            .zip(&stats)
            .zip(&self.clients)
            .map(|(((comm_rate, radar_rate, utility), s), c)| BsRound {
                pi: c.pi,
                loss: s.mean_loss,
                comm_rate,
                radar_rate,
                utility,
            })
            .collect();
        let system_utility = per_bs.iter().map(|b| b.utility).sum();
        let metrics = RoundMetrics {
            round: self.rounds_done - 1,
            per_bs,
            system_utility,
            duration_secs: start.elapsed().as_secs_f64(),
        };
        let finite = metrics
            .per_bs
            .iter()
            .all(|b| [b.pi, b.loss, b.comm_rate, b.radar_rate, b.utility].iter().all(|v| v.is_finite()));
        if !finite || !system_utility.is_finite() {
            return Err(Error::Numerical(format!("non-finite metrics in round {}", metrics.round)));
        }
        Ok(metrics)
    }

    /// Computes every BS's deployed beamformers on all samples, refreshes the
    /// interference each client sees, audits the power budget and returns
    /// mean (comm rate, radar rate, utility) per BS on the evaluation split.
    fn deploy(&mut self) -> Result<Vec<(f64, f64, f64)>> {
        let data = self.dataset;
        let scn = &data.scenario;
        let cfg = self.cfg;
        let n = data.n_samples();
        let n_train = data.train_count;
        let clients = &self.clients;
        let beams: Vec<Vec<ComplexMatrix>> = self.pool.install(|| {
            clients
                .par_iter()
                .map(|c| {
                    let mut out = Vec::with_capacity(n);
                    for (part, offset) in [(&c.data.train, 0), (&c.data.eval, n_train)] {
                        let idx: Vec<usize> = (0..part.len()).collect();
                        for chunk in idx.chunks(FORWARD_CHUNK) {
                            out.extend(beamformers_for(&c.params, &cfg, &c.data.obj, part, chunk)?);
                        }
                        debug_assert_eq!(out.len(), offset + part.len());
                    }
                    Ok(out)
                })
                .collect::<Vec<Result<_>>>()
        })
        .into_iter()
        .collect::<Result<_>>()?;

        for bs_beams in &beams {
            for w in bs_beams {
                let p = w.frobenius_norm_sq();
                self.audit.checked += 1;
                self.audit.max_power = self.audit.max_power.max(p);
                if p > scn.p_t + POWER_TOLERANCE {
                    self.audit.violations += 1;
                }
            }
        }

        let clients = &mut self.clients;
        let beams = &beams;
        let results = self.pool.install(|| {
            clients
                .par_iter_mut()
                .map(|c| {
                    let m = c.bs;
                    let mut set: Vec<ComplexMatrix> = beams.iter().map(|b| b[0].clone()).collect();
                    let mut inter = Vec::with_capacity(n);
                    for s in 0..n {
                        for (slot, b) in set.iter_mut().zip(beams) {
                            slot.clone_from(&b[s]);
                        }
                        inter.push(Interference::from_peers(scn, &data.per_bs[m][s], &set)?);
                    }
                    c.data.eval_inter = inter.split_off(n_train);
                    c.data.train_inter = inter;
                    let (mut comm, mut radar, mut util) = (0.0, 0.0, 0.0);
                    for (e, (sample, i)) in c.data.eval.iter().zip(&c.data.eval_inter).enumerate() {
                        let r = utility_and_grad(&c.data.obj, sample, i, beams[m][n_train + e].as_slice(), None);
                        comm += r.comm_rate;
                        radar += r.radar_rate;
                        util += r.utility;
                    }
                    let k = c.data.eval.len() as f64;
                    Ok((comm / k, radar / k, util / k))
                })
                .collect::<Vec<Result<_>>>()
        });
        results.into_iter().collect()
    }

    /// Writes `global.bin`, `bs<m>.bin`, `bs<m>.opt.bin` and `state.json`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_params(&dir.join("global.bin"), &self.cfg, &self.global)?;
        for c in &self.clients {
            write_params(&dir.join(format!("bs{}.bin", c.bs)), &self.cfg, &c.params)?;
            write_adam(&dir.join(format!("bs{}.opt.bin", c.bs)), &self.cfg, &c.adam)?;
        }
        let state = CheckpointState {
            format_version: CHECKPOINT_FORMAT_VERSION,
            rounds_done: self.rounds_done,
            strategy: self.strategy,
            schedule: self.schedule,
            pis: self.clients.iter().map(|c| c.pi).collect(),
            audit: self.audit,
        };
        fs::write(dir.join("state.json"), serde_json::to_vec_pretty(&state)?)?;
        Ok(())
    }

    /// Rebuilds a federation from a checkpoint written by
    /// [`Federation::save_checkpoint`] for the same dataset and settings.
    pub fn resume(dataset: &'d Dataset, strategy: Strategy, schedule: Schedule, dir: &Path) -> Result<Self> {
        let state: CheckpointState = serde_json::from_slice(&fs::read(dir.join("state.json"))?)
            .map_err(|e| Error::format(format!("checkpoint state: {e}")))?;
        if state.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version {
                found: state.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let same_schedule = Schedule { threads: 1, ..state.schedule } == Schedule { threads: 1, ..schedule };
        if state.strategy != strategy || !same_schedule {
            return Err(Error::Config("checkpoint was written with different settings".into()));
        }
        let mut fed = Self::new(dataset, strategy, schedule)?;
        if state.pis.len() != fed.clients.len() {
            return Err(Error::format("checkpoint has a different number of BSs"));
        }
        let load = |path: &Path, cfg: &NetConfig| -> Result<ModelParams> {
            let (c, p) = read_params(path)?;
            if &c != cfg {
                return Err(Error::format(format!("{} has a different network shape", path.display())));
            }
            Ok(p)
        };
        fed.global = load(&dir.join("global.bin"), &fed.cfg)?;
        for (c, pi) in fed.clients.iter_mut().zip(&state.pis) {
            c.params = load(&dir.join(format!("bs{}.bin", c.bs)), &fed.cfg)?;
            c.adam = read_adam(&dir.join(format!("bs{}.opt.bin", c.bs)))?;
            if c.adam.first_moment.len() != c.params.len() {
                return Err(Error::format("optimizer state does not match the model"));
            }
            c.pi = *pi;
        }
        fed.rounds_done = state.rounds_done;
        fed.deploy()?;
        fed.audit = state.audit;
        Ok(fed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_dataset;
    use crate::metrics::tests::small_scenario;

    fn toy_data() -> Dataset {
        let mut scn = small_scenario(&[1, 2, 2], &[0.2, 0.6, 0.8], 2);
        scn.n_r = 2;
        generate_dataset(&scn, 40, 11).unwrap()
    }

    fn sched(threads: usize) -> Schedule {
        Schedule {
            hidden: 8,
            local_epochs: 2,
            batch_size: 8,
            lr: 1e-3,
            em: EmConfig { kappa: 1.0, eval_batch: 2 },
            seed: 5,
            threads,
        }
    }

    fn run(data: &Dataset, strategy: Strategy, rounds: usize, threads: usize) -> (Vec<RoundMetrics>, Federation<'_>) {
        let mut fed = Federation::new(data, strategy, sched(threads)).unwrap();
        let m = (0..rounds).map(|_| fed.run_round().unwrap()).collect();
        (m, fed)
    }

    fn strip(m: &[RoundMetrics]) -> Vec<(usize, Vec<BsRound>, f64)> {
        m.iter().map(|r| (r.round, r.per_bs.clone(), r.system_utility)).collect()
    }

    #[test]
    fn strategy_names_round_trip() {
        for name in Strategy::NAMES {
            let s: Strategy = name.parse().unwrap();
            assert_eq!(s.name(), name);
            s.validate().unwrap();
        }
        assert!(matches!("fedsgd".parse::<Strategy>(), Err(Error::Config(_))));
        assert!(Strategy::FixedPfl { pi: 1.5 }.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_round_keeps_models_and_gives_half() {
        let data = toy_data();
        let mut fed = Federation::new(&data, Strategy::EmPfl, sched(1)).unwrap();
        for c in &mut fed.clients {
            c.adam.lr = 0.0;
        }
        let init = fed.global.clone();
        let m = fed.run_round().unwrap();
        assert!(m.per_bs.iter().all(|b| b.pi == 0.5));
        assert!(fed.clients.iter().all(|c| c.params == init));
        assert_eq!(fed.global, init);
    }

    #[test]
    fn ten_rounds_are_finite_and_within_budget() {
        let data = toy_data();
        let (m, fed) = run(&data, Strategy::EmPfl, 10, 1);
        assert_eq!(m.len(), 10);
        for (t, r) in m.iter().enumerate() {
            assert_eq!(r.round, t);
            assert_eq!(r.per_bs.len(), 3);
            assert!(r.per_bs.iter().all(|b| (0.0..=1.0).contains(&b.pi)));
            let sum: f64 = r.per_bs.iter().map(|b| b.utility).sum();
            assert_eq!(sum, r.system_utility);
        }
        let audit = fed.audit();
        assert_eq!(audit.violations, 0);
        assert!(audit.max_power <= 1.0 + POWER_TOLERANCE);
        // Training: 2 epochs x 36 samples per BS per round; deployment: 40
        // samples per BS at construction and after every round.
        assert_eq!(audit.checked, 10 * 3 * 72 + 11 * 3 * 40);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let data = toy_data();
        let (a, _) = run(&data, Strategy::EmPfl, 3, 1);
        let (b, _) = run(&data, Strategy::EmPfl, 3, 3);
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn fixed_zero_matches_local_only() {
        let data = toy_data();
        let (a, fa) = run(&data, Strategy::FixedPfl { pi: 0.0 }, 3, 1);
        let (b, fb) = run(&data, Strategy::LocalOnly, 3, 1);
        assert_eq!(strip(&a), strip(&b));
        for (x, y) in fa.clients.iter().zip(&fb.clients) {
            assert_eq!(x.params, y.params);
        }
    }

    #[test]
    fn unweighted_pfedme_matches_local_only() {
        let data = toy_data();
        let (a, _) = run(&data, Strategy::PFedMe { lambda: 0.0, inner_steps: 1 }, 3, 1);
        let (b, _) = run(&data, Strategy::LocalOnly, 3, 1);
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn headless_fedper_is_fedavg() {
        let data = toy_data();
        let (a, fa) = run(&data, Strategy::FedPer { head_layers: 0 }, 3, 1);
        let (b, _) = run(&data, Strategy::FedAvg, 3, 1);
        assert_eq!(strip(&a), strip(&b));
        assert!(a.iter().all(|r| r.per_bs.iter().all(|x| x.pi == 1.0)));
        assert!(fa.clients.iter().all(|c| c.params == fa.global));
    }

    #[test]
    fn fedper_heads_stay_local() {
        let data = toy_data();
        let mut fed = Federation::new(&data, Strategy::FedPer { head_layers: 1 }, sched(1)).unwrap();
        fed.run_round().unwrap();
        let head = fed.global.layout().trailing_span(1);
        let before: Vec<Vec<f64>> = fed.clients.iter().map(|c| c.params.values()[head.clone()].to_vec()).collect();
        // Local training alone moves the head; aggregation must not touch it.
        let mut trained = fed.clients.clone();
        fed.run_round().unwrap();
        for c in &mut trained {
            c.params.values_mut()[..head.start].copy_from_slice(&fed.global.values()[..head.start]);
        }
        for (i, c) in fed.clients.iter().enumerate() {
            assert_eq!(&c.params.values()[..head.start], &fed.global.values()[..head.start]);
            assert_ne!(c.params.values()[head.clone()], before[i][..]);
            assert_ne!(c.params.values()[head.clone()], fed.global.values()[head.clone()]);
        }
        let expect = head.start as f64 / fed.global.len() as f64;
        assert!(fed.clients.iter().all(|c| c.pi == expect));
    }

    #[test]
    fn resumed_run_reproduces_the_remaining_rounds() {
        let data = toy_data();
        let (full, _) = run(&data, Strategy::EmPfl, 4, 1);
        let dir = tempfile::tempdir().unwrap();
        let (first, fed) = run(&data, Strategy::EmPfl, 2, 1);
        fed.save_checkpoint(dir.path()).unwrap();
        drop(fed);
        let mut fed = Federation::resume(&data, Strategy::EmPfl, sched(2), dir.path()).unwrap();
        assert_eq!(fed.rounds_done(), 2);
        let rest: Vec<_> = (0..2).map(|_| fed.run_round().unwrap()).collect();
        let joined: Vec<_> = first.into_iter().chain(rest).collect();
        assert_eq!(strip(&joined), strip(&full));
        assert!(Federation::resume(&data, Strategy::FedAvg, sched(1), dir.path()).is_err());
    }
}
