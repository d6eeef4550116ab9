//! Communication and radar rates of a multi-cell ISAC deployment, and the
//! scalarized per-BS utility every trainer optimizes.
//!
//! All functions evaluate one joint channel realization. A [`ChannelSample`]
//! is the view of that realization held by one BS: its own user channels,
//! the channels from the other BSs into its users, its target, and the radar
//! interference channels from the other BSs into its receiver.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{steering_vector, target_response, ComplexMatrix, SteeringConfig};
use crate::error::{Error, Result};

/// Per-cell configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub n_users: usize,
    /// Weight of the communication objective in `[0, 1]`.
    pub rho: f64,
}

/// Static description of a multi-cell ISAC deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub cells: Vec<CellConfig>,
    pub n_t: usize,
    pub n_r: usize,
    pub sigma_c_sq: f64,
    pub sigma_s_sq: f64,
    pub p_t: f64,
    pub alpha_s: f64,
    pub rician_k: f64,
    /// Mean power of inter-cell channels relative to direct channels.
    pub cross_power_ratio: f64,
    pub element_spacing: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("scenario needs at least one cell".into()));
        }
        for (m, cell) in self.cells.iter().enumerate() {
            if cell.n_users == 0 {
                return Err(Error::Config(format!("cell {m} has no users")));
            }
            if !(0.0..=1.0).contains(&cell.rho) {
                return Err(Error::Config(format!("cell {m}: rho {} outside [0, 1]", cell.rho)));
            }
        }
        if self.n_t == 0 || self.n_r == 0 {
            return Err(Error::Config("antenna counts must be positive".into()));
        }
        let positive = [
            ("sigma_c_sq", self.sigma_c_sq),
            ("sigma_s_sq", self.sigma_s_sq),
            ("p_t", self.p_t),
            ("alpha_s", self.alpha_s),
            ("cross_power_ratio", self.cross_power_ratio),
            ("element_spacing", self.element_spacing),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.rician_k >= 0.0) {
            return Err(Error::Config("rician_k must be >= 0".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn k_max(&self) -> usize {
        self.cells.iter().map(|c| c.n_users).max().unwrap_or(0)
    }

    pub fn users(&self, m: usize) -> usize {
        self.cells[m].n_users
    }

    pub fn tx_steering(&self) -> SteeringConfig {
        SteeringConfig {
            n_elements: self.n_t,
            element_spacing_wavelengths: self.element_spacing,
        }
    }

    pub fn rx_steering(&self) -> SteeringConfig {
        SteeringConfig {
            n_elements: self.n_r,
            element_spacing_wavelengths: self.element_spacing,
        }
    }
}

/// One BS's view of a joint channel realization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub bs: usize,
    /// `h_{m,m,k}`: `n_t x 1` channel from this BS to each of its users.
    pub comm_direct: Vec<ComplexMatrix>,
    /// `h_{i,m,k}` indexed `[i][k]`: channel from BS `i` to user `k` of this
    /// cell. Empty for `i == bs`.
    pub comm_cross: Vec<Vec<ComplexMatrix>>,
    pub target_theta: f64,
    pub target_beta: Complex64,
    /// `G_{n,m}` indexed by `n`: `n_r x n_t` radar interference channel from
    /// BS `n`. `None` for `n == bs`.
    pub radar_cross: Vec<Option<ComplexMatrix>>,
}

impl ChannelSample {
    /// Checks that every tensor matches `scn`.
    pub fn validate(&self, scn: &Scenario) -> Result<()> {
        let m = self.bs;
        let n_cells = scn.n_cells();
        if m >= n_cells {
            return Err(Error::IndexOutOfRange {
                what: "bs",
                index: m,
                limit: n_cells,
            });
        }
        let vec_ok = |h: &ComplexMatrix| h.rows() == scn.n_t && h.cols() == 1 && h.is_finite();
        if self.comm_direct.len() != scn.users(m) || !self.comm_direct.iter().all(vec_ok) {
            return Err(Error::dim(format!("bad direct channels for bs {m}")));
        }
        if self.comm_cross.len() != n_cells || self.radar_cross.len() != n_cells {
            return Err(Error::dim(format!("cross-channel tables must have {n_cells} entries")));
        }
        for i in 0..n_cells {
            let cross = &self.comm_cross[i];
            let radar = &self.radar_cross[i];
            if i == m {
                if !cross.is_empty() || radar.is_some() {
                    return Err(Error::dim("self entries of cross tables must be empty"));
                }
                continue;
            }
            if cross.len() != scn.users(m) || !cross.iter().all(vec_ok) {
                return Err(Error::dim(format!("bad cross channels from bs {i} into cell {m}")));
            }
            match radar {
                Some(g) if g.rows() == scn.n_r && g.cols() == scn.n_t && g.is_finite() => {}
                _ => return Err(Error::dim(format!("bad radar channel from bs {i} into bs {m}"))),
            }
        }
        if !self.target_theta.is_finite() || self.target_theta.abs() > std::f64::consts::FRAC_PI_2 {
            return Err(Error::domain("target angle outside [-pi/2, pi/2]"));
        }
        if !(self.target_beta.re.is_finite() && self.target_beta.im.is_finite()) {
            return Err(Error::Numerical("non-finite RCS coefficient".into()));
        }
        Ok(())
    }
}

/// Beamforming matrices `W_m` (`n_t x K_m`) of every BS.
pub type BeamformerSet = [ComplexMatrix];

/// Per-BS rate breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsMetrics {
    pub comm_rate: f64,
    pub radar_rate: f64,
    pub utility: f64,
}

/// Result of [`system_utility`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemUtility {
    pub total: f64,
    pub per_bs: Vec<BsMetrics>,
}

fn check_beamformers(scn: &Scenario, w: &BeamformerSet) -> Result<()> {
    if w.len() != scn.n_cells() {
        return Err(Error::dim(format!(
            "{} beamformers for {} cells",
            w.len(),
            scn.n_cells()
        )));
    }
    for (m, wm) in w.iter().enumerate() {
        if wm.rows() != scn.n_t || wm.cols() != scn.users(m) {
            return Err(Error::dim(format!(
                "W_{m} is {}x{}, expected {}x{}",
                wm.rows(),
                wm.cols(),
                scn.n_t,
                scn.users(m)
            )));
        }
    }
    Ok(())
}

fn check_cell(scn: &Scenario, sample: &ChannelSample, m: usize) -> Result<()> {
    if m >= scn.n_cells() {
        return Err(Error::IndexOutOfRange {
            what: "bs",
            index: m,
            limit: scn.n_cells(),
        });
    }
    if sample.bs != m {
        return Err(Error::dim(format!("sample belongs to bs {}, not {m}", sample.bs)));
    }
    Ok(())
}

/// `|h^H w_j|^2` where `w_j` is column `j` of `w`.
fn beam_gain(h: &ComplexMatrix, w: &ComplexMatrix, j: usize) -> f64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for n in 0..h.rows() {
        acc += h.get(n, 0).conj() * w.get(n, j);
    }
    acc.norm_sqr()
}

/// Inter-cell interference power at user `k` of cell `m`.
pub fn comm_interference(
    scn: &Scenario,
    sample: &ChannelSample,
    w: &BeamformerSet,
    m: usize,
    k: usize,
) -> Result<f64> {
    check_cell(scn, sample, m)?;
    if k >= scn.users(m) {
        return Err(Error::IndexOutOfRange {
            what: "user",
            index: k,
            limit: scn.users(m),
        });
    }
    check_beamformers(scn, w)?;
    let mut total = 0.0;
    for (i, wi) in w.iter().enumerate() {
        if i == m {
            continue;
        }
        let h = &sample.comm_cross[i][k];
        total += (0..wi.cols()).map(|j| beam_gain(h, wi, j)).sum::<f64>();
    }
    Ok(total)
}

/// SINR of user `k` in cell `m`.
pub fn comm_sinr(
    scn: &Scenario,
    sample: &ChannelSample,
    w: &BeamformerSet,
    m: usize,
    k: usize,
) -> Result<f64> {
    let inter = comm_interference(scn, sample, w, m, k)?;
    let h = &sample.comm_direct[k];
    let wm = &w[m];
    let signal = beam_gain(h, wm, k);
    let intra: f64 = (0..wm.cols()).filter(|&j| j != k).map(|j| beam_gain(h, wm, j)).sum();
    Ok(signal / (intra + inter + scn.sigma_c_sq))
}

/// Sum over users of `log2(1 + SINR)` in cell `m`.
pub fn comm_sum_rate(scn: &Scenario, sample: &ChannelSample, w: &BeamformerSet, m: usize) -> Result<f64> {
    check_cell(scn, sample, m)?;
    let mut rate = 0.0;
    for k in 0..scn.users(m) {
        rate += comm_sinr(scn, sample, w, m, k)?.ln_1p() / std::f64::consts::LN_2;
    }
    Ok(rate)
}

/// Maximum-ratio combiner: the receive steering vector scaled to unit norm.
pub fn mrc_combiner(theta: f64, cfg: &SteeringConfig) -> Result<ComplexMatrix> {
    let a = steering_vector(theta, cfg)?;
    Ok(a.scale_real(1.0 / (cfg.n_elements as f64).sqrt()))
}

/// Transmit-side effective target channel `g = G_m^H v_m`, so that the
/// combined target echo of beam `w` is `g^H w`.
pub fn radar_gain_vector(scn: &Scenario, sample: &ChannelSample) -> Result<ComplexMatrix> {
    let v = mrc_combiner(sample.target_theta, &scn.rx_steering())?;
    let g = target_response(
        sample.target_beta,
        sample.target_theta,
        &scn.rx_steering(),
        &scn.tx_steering(),
    )?;
    g.conj_transpose().matmul(&v)
}

fn radar_interference_with(
    sample: &ChannelSample,
    w: &BeamformerSet,
    m: usize,
    v: &ComplexMatrix,
) -> Result<f64> {
    let mut total = 0.0;
    for (n, wn) in w.iter().enumerate() {
        if n == m {
            continue;
        }
        let g = sample.radar_cross[n]
            .as_ref()
            .ok_or_else(|| Error::dim(format!("missing radar channel from bs {n}")))?;
        let q = g.conj_transpose().matmul(v)?;
        total += (0..wn.cols()).map(|j| beam_gain(&q, wn, j)).sum::<f64>();
    }
    Ok(total)
}

/// Inter-cell radar interference power after MRC combining at BS `m`.
pub fn radar_interference(
    scn: &Scenario,
    sample: &ChannelSample,
    w: &BeamformerSet,
    m: usize,
) -> Result<f64> {
    check_cell(scn, sample, m)?;
    check_beamformers(scn, w)?;
    let v = mrc_combiner(sample.target_theta, &scn.rx_steering())?;
    radar_interference_with(sample, w, m, &v)
}

/// Radar SINR with an explicit receive combiner `v`.
pub fn radar_sinr_with_combiner(
    scn: &Scenario,
    sample: &ChannelSample,
    w: &BeamformerSet,
    m: usize,
    v: &ComplexMatrix,
) -> Result<f64> {
    check_cell(scn, sample, m)?;
    check_beamformers(scn, w)?;
    if v.rows() != scn.n_r || v.cols() != 1 {
        return Err(Error::dim("combiner must be n_r x 1"));
    }
    let g = target_response(
        sample.target_beta,
        sample.target_theta,
        &scn.rx_steering(),
        &scn.tx_steering(),
    )?;
    let q = g.conj_transpose().matmul(v)?;
    let wm = &w[m];
    let echo: f64 = (0..wm.cols()).map(|k| beam_gain(&q, wm, k)).sum();
    let inter = radar_interference_with(sample, w, m, v)?;
    Ok(scn.n_r as f64 * echo / (inter + scn.sigma_s_sq))
}

/// Radar SINR at BS `m` with the unit-norm MRC combiner.
pub fn radar_sinr(scn: &Scenario, sample: &ChannelSample, w: &BeamformerSet, m: usize) -> Result<f64> {
    let v = mrc_combiner(sample.target_theta, &scn.rx_steering())?;
    radar_sinr_with_combiner(scn, sample, w, m, &v)
}

pub fn radar_rate(scn: &Scenario, sample: &ChannelSample, w: &BeamformerSet, m: usize) -> Result<f64> {
    Ok(radar_sinr(scn, sample, w, m)?.ln_1p() / std::f64::consts::LN_2)
}

/// Scalarized utility `rho R_c + (1 - rho) R_s` together with both rates.
pub fn bs_metrics(scn: &Scenario, sample: &ChannelSample, w: &BeamformerSet, m: usize) -> Result<BsMetrics> {
    let comm_rate = comm_sum_rate(scn, sample, w, m)?;
    let radar_rate = radar_rate(scn, sample, w, m)?;
    let rho = scn.cells[m].rho;
    Ok(BsMetrics {
        comm_rate,
        radar_rate,
        utility: rho * comm_rate + (1.0 - rho) * radar_rate,
    })
}

pub fn bs_utility(scn: &Scenario, sample: &ChannelSample, w: &BeamformerSet, m: usize) -> Result<f64> {
    Ok(bs_metrics(scn, sample, w, m)?.utility)
}

/// Sum of per-BS utilities over one joint realization; `samples[m]` is BS
/// `m`'s view.
pub fn system_utility(scn: &Scenario, samples: &[ChannelSample], w: &BeamformerSet) -> Result<SystemUtility> {
    if samples.len() != scn.n_cells() {
        return Err(Error::dim("need one sample per cell"));
    }
    let per_bs = samples
        .iter()
        .enumerate()
        .map(|(m, s)| bs_metrics(scn, s, w, m))
        .collect::<Result<Vec<_>>>()?;
    let total = per_bs.iter().map(|b| b.utility).sum();
    Ok(SystemUtility { total, per_bs })
}
