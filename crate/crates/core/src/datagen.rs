//! Scenario presets and synthetic channel datasets.
//!
//! A dataset holds `n` joint channel realizations of the whole deployment;
//! sample `s` of every BS belongs to the same realization. Values are
//! rounded to `f32` at generation time so that what is trained on is exactly
//! what is stored on disk.
//!
//! # File format
//!
//! One file per BS (`bs<m>.ds`):
//!
//! | bytes            | content                                     |
//! |------------------|---------------------------------------------|
//! | 8                | magic `ISACDSET`                            |
//! | 4                | header length `L`, little-endian `u32`      |
//! | `L`              | JSON header ([`DatasetHeader`])             |
//! | rest             | samples, little-endian `f32`                |
//!
//! Each sample is, in order: the `K_m` direct channels (`n_t` re/im pairs
//! each), the cross channels from every other BS in ascending BS order
//! (`K_m x n_t` pairs each), the target angle (one value), the RCS
//! coefficient (one pair), and the radar interference matrices from every
//! other BS in ascending order (`n_r x n_t` pairs each, row-major).

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{sample_rcs, sample_rician, ComplexMatrix, RngStream};
use crate::error::{Error, Result};
use crate::metrics::{CellConfig, ChannelSample, Scenario};

const MAGIC: &[u8; 8] = b"ISACDSET";
pub const DATASET_FORMAT_VERSION: u32 = 1;
const DATA_STREAM: u64 = 0xda7a;

/// Preset deployments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioVariant {
    Homogeneous,
    Heterogeneous,
    EqualUeHomogeneous,
    EqualUeHeterogeneous,
}

impl ScenarioVariant {
    pub const ALL: [ScenarioVariant; 4] = [
        ScenarioVariant::Homogeneous,
        ScenarioVariant::Heterogeneous,
        ScenarioVariant::EqualUeHomogeneous,
        ScenarioVariant::EqualUeHeterogeneous,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioVariant::Homogeneous => "homogeneous",
            ScenarioVariant::Heterogeneous => "heterogeneous",
            ScenarioVariant::EqualUeHomogeneous => "equal_ue_homogeneous",
            ScenarioVariant::EqualUeHeterogeneous => "equal_ue_heterogeneous",
        }
    }
}

impl fmt::Display for ScenarioVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown scenario '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// Three cells with 8 transmit and 8 receive antennas and Rician K = 3.
/// User counts are (2, 3, 4), or two per cell for the equal-UE variants;
/// `rho` is 0.5 everywhere (homogeneous) or (0.2, 0.6, 0.8).
pub fn build_paper_scenario(variant: ScenarioVariant) -> Scenario {
    use ScenarioVariant::*;
    let users = match variant {
        Homogeneous | Heterogeneous => [2, 3, 4],
        EqualUeHomogeneous | EqualUeHeterogeneous => [2, 2, 2],
    };
    let rho = match variant {
        Homogeneous | EqualUeHomogeneous => [0.5, 0.5, 0.5],
        Heterogeneous | EqualUeHeterogeneous => [0.2, 0.6, 0.8],
    };
    Scenario {
        cells: users
            .into_iter()
            .zip(rho)
            .map(|(n_users, rho)| CellConfig { n_users, rho })
            .collect(),
        n_t: 8,
        n_r: 8,
        sigma_c_sq: 0.01,
        sigma_s_sq: 0.01,
        p_t: 1.0,
        alpha_s: 1.0,
        rician_k: 3.0,
        cross_power_ratio: 0.1,
        element_spacing: 0.5,
    }
}

/// Joint channel realizations for every BS plus a train/eval split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenario: Scenario,
    pub seed: u64,
    /// `per_bs[m][s]`: BS `m`'s view of realization `s`.
    pub per_bs: Vec<Vec<ChannelSample>>,
    /// Samples `0..train_count` are for training, the rest for evaluation.
    pub train_count: usize,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.per_bs.first().map_or(0, Vec::len)
    }

    pub fn eval_count(&self) -> usize {
        self.n_samples() - self.train_count
    }

    pub fn train(&self, m: usize) -> &[ChannelSample] {
        &self.per_bs[m][..self.train_count]
    }

    pub fn eval(&self, m: usize) -> &[ChannelSample] {
        &self.per_bs[m][self.train_count..]
    }
}

/// Size of the training part of an `n`-sample dataset (90 %).
pub fn train_split(n: usize) -> usize {
    n * 9 / 10
}

fn q(x: f64) -> f64 {
    x as f32 as f64
}

fn quantize(m: ComplexMatrix) -> ComplexMatrix {
    let data = m.as_slice().iter().map(|z| Complex64::new(q(z.re), q(z.im))).collect();
    ComplexMatrix::from_vec(m.rows(), m.cols(), data).expect("rounding keeps entries finite")
}

/// Rounds an angle to `f32` without leaving `[-pi/2, pi/2]`.
fn quantize_angle(theta: f64) -> f64 {
    let mut t = theta as f32;
    while (t as f64).abs() > FRAC_PI_2 {
        t = f32::from_bits(t.to_bits() - 1);
    }
    t as f64
}

fn generate_sample(scn: &Scenario, seed: u64, m: usize, s: usize) -> Result<ChannelSample> {
    let mut rng = RngStream::derive(seed, &[DATA_STREAM, m as u64, s as u64]);
    let k_m = scn.users(m);
    let n_cells = scn.n_cells();
    let mut draw = |rows, cols, power| -> Result<ComplexMatrix> {
        Ok(quantize(sample_rician(&mut rng, rows, cols, scn.rician_k, power)?))
    };
    let comm_direct = (0..k_m).map(|_| draw(scn.n_t, 1, 1.0)).collect::<Result<Vec<_>>>()?;
    let mut comm_cross = Vec::with_capacity(n_cells);
    for i in 0..n_cells {
        if i == m {
            comm_cross.push(Vec::new());
        } else {
            comm_cross.push(
                (0..k_m)
                    .map(|_| draw(scn.n_t, 1, scn.cross_power_ratio))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
    }
    let target_theta = quantize_angle(rng.uniform(-FRAC_PI_2, FRAC_PI_2));
    let beta = sample_rcs(&mut rng, scn.alpha_s)?;
    let target_beta = Complex64::new(q(beta.re), q(beta.im));
    let mut radar_cross = Vec::with_capacity(n_cells);
    for n in 0..n_cells {
        radar_cross.push(if n == m {
            None
        } else {
            Some(quantize(sample_rician(
                &mut rng,
                scn.n_r,
                scn.n_t,
                scn.rician_k,
                scn.cross_power_ratio,
            )?))
        });
    }
    Ok(ChannelSample {
        bs: m,
        comm_direct,
        comm_cross,
        target_theta,
        target_beta,
        radar_cross,
    })
}

/// Draws `n_samples` joint realizations. Every sample of every BS has its
/// own derived random stream, so the result depends only on `(scn, seed)`.
pub fn generate_dataset(scn: &Scenario, n_samples: usize, seed: u64) -> Result<Dataset> {
    scn.validate()?;
    if n_samples < 10 {
        return Err(Error::InsufficientData(format!(
            "need at least 10 samples for a train/eval split, got {n_samples}"
        )));
    }
    let per_bs = (0..scn.n_cells())
        .map(|m| (0..n_samples).map(|s| generate_sample(scn, seed, m, s)).collect())
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        scenario: scn.clone(),
        seed,
        per_bs,
        train_count: train_split(n_samples),
    })
}

/// JSON header of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub bs: usize,
    pub scenario: Scenario,
    pub master_seed: u64,
    pub sample_count: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub users_per_bs: Vec<usize>,
}

/// Directory for a generated dataset: `<root>/<scenario>/<seed>`.
pub fn dataset_dir(root: &Path, variant: ScenarioVariant, seed: u64) -> PathBuf {
    root.join(variant.name()).join(seed.to_string())
}

pub fn bs_file(dir: &Path, m: usize) -> PathBuf {
    dir.join(format!("bs{m}.ds"))
}

fn floats_per_sample(scn: &Scenario, m: usize) -> usize {
    let k = scn.users(m);
    let others = scn.n_cells() - 1;
    2 * k * scn.n_t * (1 + others) + 3 + 2 * others * scn.n_r * scn.n_t
}

fn push_matrix(out: &mut Vec<u8>, m: &ComplexMatrix) {
    for z in m.as_slice() {
        out.extend_from_slice(&(z.re as f32).to_le_bytes());
        out.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
}

/// Encodes BS `m`'s samples as a dataset file image.
pub fn encode_bs(data: &Dataset, m: usize) -> Result<Vec<u8>> {
    let scn = &data.scenario;
    let samples = &data.per_bs[m];
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        bs: m,
        scenario: scn.clone(),
        master_seed: data.seed,
        sample_count: samples.len(),
        train_count: data.train_count,
        eval_count: samples.len() - data.train_count,
        users_per_bs: scn.cells.iter().map(|c| c.n_users).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + samples.len() * floats_per_sample(scn, m) * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for s in samples {
        s.validate(scn)?;
        s.comm_direct.iter().for_each(|h| push_matrix(&mut out, h));
        for cross in &s.comm_cross {
            cross.iter().for_each(|h| push_matrix(&mut out, h));
        }
        out.extend_from_slice(&(s.target_theta as f32).to_le_bytes());
        out.extend_from_slice(&(s.target_beta.re as f32).to_le_bytes());
        out.extend_from_slice(&(s.target_beta.im as f32).to_le_bytes());
        for g in s.radar_cross.iter().flatten() {
            push_matrix(&mut out, g);
        }
    }
    Ok(out)
}

/// Decodes a dataset file image into its header and samples.
pub fn decode_bs(bytes: &[u8]) -> Result<(DatasetHeader, Vec<ChannelSample>)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::format("not a dataset file (bad magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::format("dataset header truncated"))?;
    let probe: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| Error::format(format!("corrupted dataset header: {e}")))?;
    let version = probe.get("format_version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == DATASET_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                found: v as u32,
                expected: DATASET_FORMAT_VERSION,
            })
        }
        None => return Err(Error::format("dataset header has no format_version")),
    }
    let header: DatasetHeader =
        serde_json::from_value(probe).map_err(|e| Error::format(format!("corrupted dataset header: {e}")))?;
    let scn = &header.scenario;
    scn.validate().map_err(|e| Error::format(format!("invalid scenario in header: {e}")))?;
    let m = header.bs;
    if m >= scn.n_cells() || header.train_count + header.eval_count != header.sample_count {
        return Err(Error::format("inconsistent dataset header"));
    }
    let body = &bytes[12 + hlen..];
    let per = floats_per_sample(scn, m);
    if body.len() != header.sample_count * per * 4 {
        return Err(Error::format(format!(
            "body holds {} bytes, header declares {} samples of {} floats",
            body.len(),
            header.sample_count,
            per
        )));
    }
    let mut cursor = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut next = move || cursor.next().expect("body length checked");
    let next_matrix = |rows: usize, cols: usize, next: &mut dyn FnMut() -> f64| -> Result<ComplexMatrix> {
        let data = (0..rows * cols).map(|_| Complex64::new(next(), next())).collect();
        ComplexMatrix::from_vec(rows, cols, data)
    };
    let k = scn.users(m);
    let mut samples = Vec::with_capacity(header.sample_count);
    for _ in 0..header.sample_count {
        let comm_direct = (0..k)
            .map(|_| next_matrix(scn.n_t, 1, &mut next))
            .collect::<Result<Vec<_>>>()?;
        let mut comm_cross = Vec::with_capacity(scn.n_cells());
        for i in 0..scn.n_cells() {
            comm_cross.push(if i == m {
                Vec::new()
            } else {
                (0..k)
                    .map(|_| next_matrix(scn.n_t, 1, &mut next))
                    .collect::<Result<Vec<_>>>()?
            });
        }
        let target_theta = next();
        let re = next();
        let target_beta = Complex64::new(re, next());
        let mut radar_cross = Vec::with_capacity(scn.n_cells());
        for n in 0..scn.n_cells() {
            radar_cross.push(if n == m {
                None
            } else {
                Some(next_matrix(scn.n_r, scn.n_t, &mut next)?)
            });
        }
        let sample = ChannelSample {
            bs: m,
            comm_direct,
            comm_cross,
            target_theta,
            target_beta,
            radar_cross,
        };
        sample
            .validate(scn)
            .map_err(|e| Error::format(format!("invalid sample: {e}")))?;
        samples.push(sample);
    }
    Ok((header, samples))
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    for m in 0..data.per_bs.len() {
        fs::write(bs_file(dir, m), encode_bs(data, m)?)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let first = bs_file(dir, 0);
    if !first.exists() {
        return Err(Error::MissingDataset {
            path: dir.to_path_buf(),
            hint: "generate it first with `isac-pfl gen-data`".into(),
        });
    }
    let (h0, s0) = decode_bs(&fs::read(&first)?)?;
    let mut per_bs = vec![s0];
    for m in 1..h0.scenario.n_cells() {
        let (h, s) = decode_bs(&fs::read(bs_file(dir, m))?)?;
        if h.scenario != h0.scenario || h.master_seed != h0.master_seed || h.sample_count != h0.sample_count || h.bs != m {
            return Err(Error::format(format!("bs{m}.ds does not belong to the same dataset")));
        }
        per_bs.push(s);
    }
    Ok(Dataset {
        scenario: h0.scenario,
        seed: h0.master_seed,
        per_bs,
        train_count: h0.train_count,
    })
}
