//! Network output to beamformer, power projection, and the per-BS
//! scalarized loss with its gradient.

use std::f64::consts::LN_2;

use ndarray::{Array2, ArrayView1};
use num_complex::Complex64;

use super::mlp::{backward, forward_raw};
use super::{ModelParams, NetConfig};
use crate::channel::ComplexMatrix;
use crate::error::{Error, Result};
use crate::metrics::{self, BeamformerSet, BsMetrics, ChannelSample, Scenario};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Cell constants entering the loss of one BS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub rho: f64,
    pub n_users: usize,
    pub n_t: usize,
    pub n_r: usize,
    pub p_t: f64,
    pub sigma_c_sq: f64,
    pub sigma_s_sq: f64,
}

impl Objective {
    pub fn for_cell(scn: &Scenario, m: usize) -> Result<Self> {
        let cell = scn.cells.get(m).ok_or(Error::IndexOutOfRange {
            what: "bs",
            index: m,
            limit: scn.n_cells(),
        })?;
        Ok(Self {
            rho: cell.rho,
            n_users: cell.n_users,
            n_t: scn.n_t,
            n_r: scn.n_r,
            p_t: scn.p_t,
            sigma_c_sq: scn.sigma_c_sq,
            sigma_s_sq: scn.sigma_s_sq,
        })
    }
}

/// Network inputs and the channel terms a BS needs to score its own beams.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSample {
    /// Direct user channels, zero-padded to `k_max`, laid out `(n, k, re/im)`.
    pub comm_in: Vec<f64>,
    /// Effective sensing channel `G^H v`, laid out `(n, re/im)`.
    pub sens_in: Vec<f64>,
    /// Direct user channels, user-major: `direct[k * n_t + n]`.
    pub direct: Vec<Complex64>,
    pub radar_gain: Vec<Complex64>,
}

impl LocalSample {
    pub fn from_sample(scn: &Scenario, cfg: &NetConfig, sample: &ChannelSample) -> Result<Self> {
        sample.validate(scn)?;
        let k_m = scn.users(sample.bs);
        if cfg.n_t != scn.n_t || k_m > cfg.k_max {
            return Err(Error::dim("network configuration does not fit the scenario"));
        }
        let n_t = scn.n_t;
        let mut comm_in = vec![0.0; cfg.comm_in_dim()];
        let mut direct = Vec::with_capacity(k_m * n_t);
        for (k, h) in sample.comm_direct.iter().enumerate() {
            for n in 0..n_t {
                let z = h.get(n, 0);
                comm_in[(n * cfg.k_max + k) * 2] = z.re;
                comm_in[(n * cfg.k_max + k) * 2 + 1] = z.im;
                direct.push(z);
            }
        }
        let g = metrics::radar_gain_vector(scn, sample)?;
        let radar_gain: Vec<Complex64> = g.as_slice().to_vec();
        let sens_in = radar_gain.iter().flat_map(|z| [z.re, z.im]).collect();
        Ok(Self {
            comm_in,
            sens_in,
            direct,
            radar_gain,
        })
    }
}

/// Inter-cell interference seen by one BS for one sample, with the other
/// BSs' beamformers held fixed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Interference {
    /// Per user of this cell.
    pub comm: Vec<f64>,
    /// After MRC combining.
    pub radar: f64,
}

impl Interference {
    pub fn none(n_users: usize) -> Self {
        Self {
            comm: vec![0.0; n_users],
            radar: 0.0,
        }
    }

    /// Interference at BS `sample.bs` from the beams in `w`; the entry of
    /// `w` belonging to this BS is ignored.
    pub fn from_peers(scn: &Scenario, sample: &ChannelSample, w: &BeamformerSet) -> Result<Self> {
        let m = sample.bs;
        let comm = (0..scn.users(m))
            .map(|k| metrics::comm_interference(scn, sample, w, m, k))
            .collect::<Result<Vec<_>>>()?;
        let radar = metrics::radar_interference(scn, sample, w, m)?;
        Ok(Self { comm, radar })
    }
}

/// Rates and utility of beamformer `w` (`n_t x n_users`, row-major). When
/// `grad` is given it receives `dU/dRe(w) + i dU/dIm(w)` entrywise.
pub fn utility_and_grad(
    obj: &Objective,
    s: &LocalSample,
    inter: &Interference,
    w: &[Complex64],
    mut grad: Option<&mut [Complex64]>,
) -> BsMetrics {
    let (n_t, k_m) = (obj.n_t, obj.n_users);
    debug_assert_eq!(w.len(), n_t * k_m);
    if let Some(g) = grad.as_deref_mut() {
        g.fill(ZERO);
    }

    // gains[j] = h^H w_j for the current user's channel h
    let mut gains = vec![ZERO; k_m];
    let mut comm_rate = 0.0;
    for k in 0..k_m {
        let h = &s.direct[k * n_t..(k + 1) * n_t];
        for (j, gain) in gains.iter_mut().enumerate() {
            *gain = (0..n_t).map(|n| h[n].conj() * w[n * k_m + j]).sum();
        }
        let all: f64 = gains.iter().map(|a| a.norm_sqr()).sum();
        let total = all + inter.comm[k] + obj.sigma_c_sq;
        let without = total - gains[k].norm_sqr();
        comm_rate += (total.ln() - without.ln()) / LN_2;
        if let Some(g) = grad.as_deref_mut() {
            for (j, &a) in gains.iter().enumerate() {
                let coeff = if j == k { 1.0 / total } else { 1.0 / total - 1.0 / without };
                let c = a * (2.0 * obj.rho * coeff / LN_2);
                for n in 0..n_t {
                    g[n * k_m + j] += h[n] * c;
                }
            }
        }
    }

    let mut echo = 0.0;
    for (j, gain) in gains.iter_mut().enumerate() {
        *gain = (0..n_t).map(|n| s.radar_gain[n].conj() * w[n * k_m + j]).sum();
        echo += gain.norm_sqr();
    }
    let scale = obj.n_r as f64 / (inter.radar + obj.sigma_s_sq);
    let sinr = scale * echo;
    let radar_rate = sinr.ln_1p() / LN_2;
    if let Some(g) = grad {
        let c0 = 2.0 * (1.0 - obj.rho) * scale / ((1.0 + sinr) * LN_2);
        for (j, &b) in gains.iter().enumerate() {
            let c = b * c0;
            for n in 0..n_t {
                g[n * k_m + j] += s.radar_gain[n] * c;
            }
        }
    }

    BsMetrics {
        comm_rate,
        radar_rate,
        utility: obj.rho * comm_rate + (1.0 - obj.rho) * radar_rate,
    }
}

/// Scales a nonzero beamformer onto the power budget `||W||_F^2 = p_t`.
pub fn project_power(w_raw: &ComplexMatrix, p_t: f64) -> ComplexMatrix {
    let norm = w_raw.frobenius_norm();
    if norm > 0.0 {
        w_raw.scale_real(p_t.sqrt() / norm)
    } else {
        w_raw.clone()
    }
}

fn project_slice(raw: &mut [Complex64], p_t: f64) {
    let norm = raw.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 {
        let s = p_t.sqrt() / norm;
        for z in raw.iter_mut() {
            *z *= s;
        }
    }
}

/// Pulls a gradient with respect to the projected beamformer back to the
/// raw one. At `w_raw = 0` the projection is constant and the result is zero.
pub fn project_power_backward(w_raw: &[Complex64], p_t: f64, grad_w: &[Complex64]) -> Vec<Complex64> {
    let norm_sq: f64 = w_raw.iter().map(|z| z.norm_sqr()).sum();
    if norm_sq <= 0.0 {
        return vec![ZERO; w_raw.len()];
    }
    let norm = norm_sq.sqrt();
    let radial: f64 = w_raw.iter().zip(grad_w).map(|(x, g)| x.re * g.re + x.im * g.im).sum::<f64>() / norm_sq;
    let s = p_t.sqrt() / norm;
    w_raw.iter().zip(grad_w).map(|(x, g)| (g - x * radial) * s).collect()
}

fn inputs(cfg: &NetConfig, samples: &[LocalSample], idx: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut comm = Array2::zeros((idx.len(), cfg.comm_in_dim()));
    let mut sens = Array2::zeros((idx.len(), cfg.sens_in_dim()));
    for (r, &i) in idx.iter().enumerate() {
        let s = samples.get(i).ok_or(Error::IndexOutOfRange {
            what: "sample",
            index: i,
            limit: samples.len(),
        })?;
        if s.comm_in.len() != cfg.comm_in_dim() || s.sens_in.len() != cfg.sens_in_dim() {
            return Err(Error::dim("sample features do not fit the network"));
        }
        comm.row_mut(r).assign(&ArrayView1::from(&s.comm_in));
        sens.row_mut(r).assign(&ArrayView1::from(&s.sens_in));
    }
    Ok((comm, sens))
}

/// Raw output row to an `n_t x n_users` complex matrix (row-major), dropping
/// padded user columns.
fn raw_beam(cfg: &NetConfig, row: ArrayView1<f64>, n_users: usize) -> Vec<Complex64> {
    let mut w = Vec::with_capacity(cfg.n_t * n_users);
    for n in 0..cfg.n_t {
        for k in 0..n_users {
            let base = (n * cfg.k_max + k) * 2;
            w.push(Complex64::new(row[base], row[base + 1]));
        }
    }
    w
}

fn check_obj(cfg: &NetConfig, obj: &Objective) -> Result<()> {
    if obj.n_t != cfg.n_t || obj.n_users > cfg.k_max || obj.n_users == 0 {
        return Err(Error::dim(format!(
            "cell with {} users and {} antennas does not fit network ({} antennas, k_max {})",
            obj.n_users, obj.n_t, cfg.n_t, cfg.k_max
        )));
    }
    Ok(())
}

/// Projected beamformers for the selected samples.
pub fn beamformers_for(
    params: &ModelParams,
    cfg: &NetConfig,
    obj: &Objective,
    samples: &[LocalSample],
    idx: &[usize],
) -> Result<Vec<ComplexMatrix>> {
    check_obj(cfg, obj)?;
    let (comm, sens) = inputs(cfg, samples, idx)?;
    let acts = forward_raw(params, cfg, comm, sens)?;
    acts.out
        .rows()
        .into_iter()
        .map(|row| {
            let mut w = raw_beam(cfg, row, obj.n_users);
            project_slice(&mut w, obj.p_t);
            ComplexMatrix::from_vec(cfg.n_t, obj.n_users, w)
        })
        .collect()
}

/// Beamformer for one prepared sample.
pub fn forward_features(
    params: &ModelParams,
    cfg: &NetConfig,
    sample: &LocalSample,
    k_m: usize,
    p_t: f64,
) -> Result<ComplexMatrix> {
    if k_m == 0 || k_m > cfg.k_max {
        return Err(Error::dim(format!("user count {k_m} outside 1..={}", cfg.k_max)));
    }
    let (comm, sens) = inputs(cfg, std::slice::from_ref(sample), &[0])?;
    let acts = forward_raw(params, cfg, comm, sens)?;
    let raw = ComplexMatrix::from_vec(cfg.n_t, k_m, raw_beam(cfg, acts.out.row(0), k_m))?;
    Ok(project_power(&raw, p_t))
}

/// Beamformer of BS `sample.bs` for one channel sample.
pub fn forward(params: &ModelParams, cfg: &NetConfig, scn: &Scenario, sample: &ChannelSample) -> Result<ComplexMatrix> {
    let local = LocalSample::from_sample(scn, cfg, sample)?;
    forward_features(params, cfg, &local, scn.users(sample.bs), scn.p_t)
}

/// Slack allowed above the power budget for rounding.
pub const POWER_TOLERANCE: f64 = 1e-9;

/// Mean loss over a batch, its parameter gradient, the largest beamformer
/// power produced, and how many beamformers exceeded the budget.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub max_power: f64,
    pub over_budget: usize,
}

/// Mean of `-utility` over the selected samples and, when `with_grad`, its
/// exact gradient.
pub(crate) fn batch_objective(
    params: &ModelParams,
    cfg: &NetConfig,
    obj: &Objective,
    samples: &[LocalSample],
    interference: &[Interference],
    idx: &[usize],
    with_grad: bool,
) -> Result<LossGrad> {
    if idx.is_empty() {
        return Err(Error::Empty("batch"));
    }
    check_obj(cfg, obj)?;
    let (comm, sens) = inputs(cfg, samples, idx)?;
    let acts = forward_raw(params, cfg, comm, sens)?;
    let batch = idx.len() as f64;
    let mut d_out = Array2::zeros(if with_grad { acts.out.dim() } else { (0, 0) });
    let mut loss = 0.0;
    let mut max_power = 0.0f64;
    let mut over_budget = 0;
    let mut grad_w = vec![ZERO; cfg.n_t * obj.n_users];
    for (r, &i) in idx.iter().enumerate() {
        let inter = interference.get(i).ok_or(Error::IndexOutOfRange {
            what: "interference",
            index: i,
            limit: interference.len(),
        })?;
        if inter.comm.len() != obj.n_users {
            return Err(Error::dim("interference table does not match the user count"));
        }
        let raw = raw_beam(cfg, acts.out.row(r), obj.n_users);
        let mut w = raw.clone();
        project_slice(&mut w, obj.p_t);
        let power: f64 = w.iter().map(|z| z.norm_sqr()).sum();
        max_power = max_power.max(power);
        if power > obj.p_t + POWER_TOLERANCE {
            over_budget += 1;
        }
        let m = utility_and_grad(obj, &samples[i], inter, &w, with_grad.then_some(&mut grad_w[..]));
        loss -= m.utility / batch;
        if with_grad {
            for g in grad_w.iter_mut() {
                *g *= -1.0 / batch;
            }
            let d_raw = project_power_backward(&raw, obj.p_t, &grad_w);
            let mut row = d_out.row_mut(r);
            for n in 0..cfg.n_t {
                for k in 0..obj.n_users {
                    let base = (n * cfg.k_max + k) * 2;
                    let g = d_raw[n * obj.n_users + k];
                    row[base] = g.re;
                    row[base + 1] = g.im;
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    let grad = if with_grad {
        backward(params, cfg, &acts, d_out.view())
    } else {
        Vec::new()
    };
    Ok(LossGrad {
        loss,
        grad,
        max_power,
        over_budget,
    })
}

/// Loss and gradient on prepared samples; `idx` selects the batch.
pub fn loss_and_grad_local(
    params: &ModelParams,
    cfg: &NetConfig,
    obj: &Objective,
    samples: &[LocalSample],
    interference: &[Interference],
    idx: &[usize],
) -> Result<LossGrad> {
    batch_objective(params, cfg, obj, samples, interference, idx, true)
}

/// Loss and gradient of BS `m` on a batch of channel samples.
/// `peers[b]` holds every BS's beamformer for sample `b`; the entry for `m`
/// is ignored and the others are treated as constants.
pub fn loss_and_grad(
    params: &ModelParams,
    cfg: &NetConfig,
    scn: &Scenario,
    batch: &[ChannelSample],
    m: usize,
    peers: &[Vec<ComplexMatrix>],
) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if peers.len() != batch.len() {
        return Err(Error::dim("need one peer beamformer set per sample"));
    }
    let obj = Objective::for_cell(scn, m)?;
    let mut locals = Vec::with_capacity(batch.len());
    let mut inter = Vec::with_capacity(batch.len());
    for (s, w) in batch.iter().zip(peers) {
        if s.bs != m {
            return Err(Error::dim(format!("sample of bs {} in batch of bs {m}", s.bs)));
        }
        locals.push(LocalSample::from_sample(scn, cfg, s)?);
        inter.push(Interference::from_peers(scn, s, w)?);
    }
    let idx: Vec<usize> = (0..batch.len()).collect();
    loss_and_grad_local(params, cfg, &obj, &locals, &inter, &idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::RngStream;
    use crate::metrics::tests::{c, random_beams, random_sample, small_scenario};
    use crate::nn::init_params;

    #[test]
    fn projection_examples() {
        let zero = ComplexMatrix::zeros(2, 2);
        assert_eq!(project_power(&zero, 1.0), zero);
        let w = ComplexMatrix::from_vec(1, 2, vec![c(2.0, 0.0), c(0.0, 0.0)]).unwrap();
        assert!((project_power(&w, 1.0).frobenius_norm_sq() - 1.0).abs() < 1e-15);
        let ten = ComplexMatrix::from_vec(1, 2, vec![c(6.0, 0.0), c(0.0, 8.0)]).unwrap();
        let p = project_power(&ten, 1.0);
        assert!((p.get(0, 0).re - 0.6).abs() < 1e-15 && (p.get(0, 1).im - 0.8).abs() < 1e-15);
        let small = ComplexMatrix::from_vec(1, 1, vec![c(0.1, 0.0)]).unwrap();
        assert!((project_power(&small, 4.0).frobenius_norm_sq() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(12, 0);
        let raw: Vec<Complex64> = (0..6).map(|_| rng.complex_normal()).collect();
        let probe: Vec<Complex64> = (0..6).map(|_| rng.complex_normal()).collect();
        let f = |x: &[Complex64]| -> f64 {
            let mut w = x.to_vec();
            project_slice(&mut w, 2.0);
            w.iter().zip(&probe).map(|(a, b)| a.re * b.re + a.im * b.im).sum()
        };
        let g = project_power_backward(&raw, 2.0, &probe);
        let h = 1e-5;
        for i in 0..raw.len() {
            for part in 0..2 {
                let bump = if part == 0 { c(h, 0.0) } else { c(0.0, h) };
                let mut up = raw.clone();
                up[i] += bump;
                let mut dn = raw.clone();
                dn[i] -= bump;
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                let an = if part == 0 { g[i].re } else { g[i].im };
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-4), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn utility_matches_metrics_module() {
        let scn = small_scenario(&[2, 3, 1], &[0.3, 0.6, 0.9], 3);
        let cfg = NetConfig::new(3, 3, 4).unwrap();
        let mut rng = RngStream::new(40, 0);
        for m in 0..3 {
            let sample = random_sample(&scn, m, &mut rng);
            let w = random_beams(&scn, &mut rng);
            let local = LocalSample::from_sample(&scn, &cfg, &sample).unwrap();
            let inter = Interference::from_peers(&scn, &sample, &w).unwrap();
            let obj = Objective::for_cell(&scn, m).unwrap();
            let got = utility_and_grad(&obj, &local, &inter, w[m].as_slice(), None);
            let expect = metrics::bs_metrics(&scn, &sample, &w, m).unwrap();
            assert!((got.comm_rate - expect.comm_rate).abs() < 1e-10);
            assert!((got.radar_rate - expect.radar_rate).abs() < 1e-10);
            assert!((got.utility - expect.utility).abs() < 1e-10);
        }
    }

    #[test]
    fn utility_gradient_matches_finite_differences() {
        let scn = small_scenario(&[3, 2], &[0.4, 0.7], 3);
        let cfg = NetConfig::new(3, 3, 2).unwrap();
        let mut rng = RngStream::new(41, 0);
        let sample = random_sample(&scn, 0, &mut rng);
        let w = random_beams(&scn, &mut rng);
        let local = LocalSample::from_sample(&scn, &cfg, &sample).unwrap();
        let inter = Interference::from_peers(&scn, &sample, &w).unwrap();
        let obj = Objective::for_cell(&scn, 0).unwrap();
        let base: Vec<Complex64> = w[0].as_slice().to_vec();
        let mut grad = vec![ZERO; base.len()];
        utility_and_grad(&obj, &local, &inter, &base, Some(&mut grad));
        let h = 1e-6;
        for i in 0..base.len() {
            for part in 0..2 {
                let bump = if part == 0 { c(h, 0.0) } else { c(0.0, h) };
                let mut up = base.clone();
                up[i] += bump;
                let mut dn = base.clone();
                dn[i] -= bump;
                let fd = (utility_and_grad(&obj, &local, &inter, &up, None).utility
                    - utility_and_grad(&obj, &local, &inter, &dn, None).utility)
                    / (2.0 * h);
                let an = if part == 0 { grad[i].re } else { grad[i].im };
                assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1e-3), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn zero_params_give_zero_beams_and_zero_loss() {
        let scn = small_scenario(&[2, 2], &[0.5, 0.5], 2);
        let cfg = NetConfig::new(2, 2, 3).unwrap();
        let params = ModelParams::zeros(cfg.layout());
        let mut rng = RngStream::new(42, 0);
        let sample = random_sample(&scn, 0, &mut rng);
        let w = forward(&params, &cfg, &scn, &sample).unwrap();
        assert_eq!(w.frobenius_norm_sq(), 0.0);
        let peers = vec![random_beams(&scn, &mut rng)];
        let out = loss_and_grad(&params, &cfg, &scn, &[sample], 0, &peers).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.grad.len(), params.len());
    }

    #[test]
    fn forward_respects_power_budget() {
        let scn = small_scenario(&[1, 3], &[0.5, 0.5], 4);
        let cfg = NetConfig::new(4, 3, 8).unwrap();
        let mut rng = RngStream::new(43, 0);
        let params = init_params(&cfg, &mut rng);
        for m in 0..2 {
            let sample = random_sample(&scn, m, &mut rng);
            let w = forward(&params, &cfg, &scn, &sample).unwrap();
            assert_eq!((w.rows(), w.cols()), (4, scn.users(m)));
            assert!(w.frobenius_norm_sq() <= scn.p_t + 1e-9);
            assert!((w.frobenius_norm_sq() - scn.p_t).abs() < 1e-12);
        }
    }

    #[test]
    fn single_user_loss_reduces_to_log_snr() {
        let scn = small_scenario(&[1], &[1.0], 2);
        let cfg = NetConfig::new(2, 1, 4).unwrap();
        let mut rng = RngStream::new(44, 0);
        let params = init_params(&cfg, &mut rng);
        let batch: Vec<_> = (0..3).map(|_| random_sample(&scn, 0, &mut rng)).collect();
        let peers: Vec<_> = batch.iter().map(|_| vec![ComplexMatrix::zeros(2, 1)]).collect();
        let out = loss_and_grad(&params, &cfg, &scn, &batch, 0, &peers).unwrap();
        let expect = -batch
            .iter()
            .map(|s| {
                let w = forward(&params, &cfg, &scn, s).unwrap();
                let gain = ComplexMatrix::inner(&s.comm_direct[0], &w).unwrap().norm_sqr();
                (1.0 + gain / scn.sigma_c_sq).log2()
            })
            .sum::<f64>()
            / 3.0;
        assert!((out.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_and_grad_errors() {
        let scn = small_scenario(&[1], &[1.0], 2);
        let cfg = NetConfig::new(2, 1, 2).unwrap();
        let params = ModelParams::zeros(cfg.layout());
        assert!(matches!(loss_and_grad(&params, &cfg, &scn, &[], 0, &[]), Err(Error::Empty(_))));
        let wrong = NetConfig::new(3, 1, 2).unwrap();
        let mut rng = RngStream::new(0, 0);
        let s = random_sample(&scn, 0, &mut rng);
        assert!(forward(&params, &wrong, &scn, &s).is_err());
    }
}
