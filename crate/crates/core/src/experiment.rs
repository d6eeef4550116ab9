//! Experiment runner: configuration, dataset lookup, the round loop with
//! checkpoints, `metrics.csv` / `summary.json` output, SVG charts and the
//! cross-run comparison table.
//!
//! `metrics.csv` has one row per BS per round:
//!
//! ```text
//! round,bs,pi,loss,comm_rate,radar_rate,utility,system_utility
//! ```
//!
//! `system_utility` is the sum of the BS utilities of that round and repeats
//! on each of its rows. Numbers use the shortest representation that reads
//! back to the same `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{
    build_paper_scenario, dataset_dir, generate_dataset, read_dataset, write_dataset, Dataset, ScenarioVariant,
};
use crate::error::{Error, Result};
use crate::fl::{EmConfig, Federation, PowerAudit, RoundMetrics, Schedule, Strategy};
use crate::metrics::Scenario;

pub const CSV_HEADER: &str = "round,bs,pi,loss,comm_rate,radar_rate,utility,system_utility";

/// Named starting points for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 4 antennas, 2,000 samples per BS, 30 rounds.
    Desk,
    /// 8 antennas, 20,000 samples per BS, 100 rounds.
    Full,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(Error::Config(format!("unknown preset '{s}' (expected desk or full)"))),
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioVariant,
    pub strategy: String,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kappa: f64,
    pub eval_batch: usize,
    pub pi_fixed: f64,
    pub head_layers: usize,
    pub prox_lambda: f64,
    pub inner_steps: usize,
    pub hidden: usize,
    /// Transmit and receive antennas per BS.
    pub antennas: usize,
    pub samples: usize,
    /// Seeds both the dataset and training.
    pub seed: u64,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    /// Run directory name under `out_dir`; defaults to `<strategy>_<scenario>_<seed>`.
    pub name: Option<String>,
    pub threads: usize,
    /// Write a checkpoint every this many rounds (0 disables).
    pub checkpoint_every: usize,
    /// Keep only the newest checkpoint directory.
    pub keep_last_checkpoint: bool,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let (antennas, samples, rounds) = match p {
            Preset::Desk => (4, 2_000, 30),
            Preset::Full => (8, 20_000, 100),
        };
        Self {
            scenario: ScenarioVariant::Heterogeneous,
            strategy: "em_pfl".into(),
            rounds,
            local_epochs: 5,
            batch_size: 64,
            lr: 1e-4,
            kappa: 1.0,
            eval_batch: 64,
            pi_fixed: 0.5,
            head_layers: 1,
            prox_lambda: 15.0,
            inner_steps: 5,
            hidden: 256,
            antennas,
            samples,
            seed: 0,
            data_root: "data".into(),
            out_dir: "run".into(),
            name: None,
            threads: 1,
            checkpoint_every: 1,
            keep_last_checkpoint: true,
        }
    }

    /// Sets one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
        }
        match key {
            "scenario" => self.scenario = value.parse()?,
            "strategy" => {
                value.parse::<Strategy>()?;
                self.strategy = value.into();
            }
            "rounds" => self.rounds = num(key, value)?,
            "local_epochs" => self.local_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "kappa" => self.kappa = num(key, value)?,
            "eval_batch" => self.eval_batch = num(key, value)?,
            "pi_fixed" => self.pi_fixed = num(key, value)?,
            "head_layers" => self.head_layers = num(key, value)?,
            "prox_lambda" => self.prox_lambda = num(key, value)?,
            "inner_steps" => self.inner_steps = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "antennas" => self.antennas = num(key, value)?,
            "samples" => self.samples = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "data_root" => self.data_root = value.into(),
            "out_dir" => self.out_dir = value.into(),
            "name" => self.name = Some(value.into()),
            "threads" => self.threads = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "keep_last_checkpoint" => self.keep_last_checkpoint = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Builds a configuration from a preset, then the `key = value` lines of
    /// `text`, then `overrides` (later entries win). A `preset` key in the
    /// text is honored unless `preset` is given.
    pub fn from_sources(preset: Option<Preset>, text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let entries = match text {
            Some(t) => parse_key_values(t)?,
            None => Vec::new(),
        };
        let file_preset = entries
            .iter()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.parse())
            .transpose()?;
        let mut cfg = Self::preset(preset.or(file_preset).unwrap_or(Preset::Desk));
        for (k, v) in entries.iter().filter(|(k, _)| k != "preset").chain(overrides) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("rounds, local_epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.antennas == 0 || self.samples < 10 {
            return Err(Error::Config("need at least one antenna and ten samples".into()));
        }
        self.strategy()?.validate()?;
        self.schedule().validate()
    }

    pub fn strategy(&self) -> Result<Strategy> {
        Ok(match self.strategy.parse::<Strategy>()? {
            Strategy::FixedPfl { .. } => Strategy::FixedPfl { pi: self.pi_fixed },
            Strategy::FedPer { .. } => Strategy::FedPer {
                head_layers: self.head_layers,
            },
            Strategy::PFedMe { .. } => Strategy::PFedMe {
                lambda: self.prox_lambda,
                inner_steps: self.inner_steps,
            },
            s => s,
        })
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            hidden: self.hidden,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            em: EmConfig {
                kappa: self.kappa,
                eval_batch: self.eval_batch,
            },
            seed: self.seed,
            threads: self.threads,
        }
    }

    pub fn build_scenario(&self) -> Scenario {
        scenario_with_antennas(self.scenario, self.antennas)
    }

    pub fn run_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}_{}_{}", self.strategy, self.scenario, self.seed))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_name())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        dataset_dir(&self.data_root, self.scenario, self.seed)
    }

    fn gen_command(&self) -> String {
        format!(
            "isac-pfl gen-data --scenario {} --seed {} --samples {} --antennas {} --data-root {}",
            self.scenario,
            self.seed,
            self.samples,
            self.antennas,
            self.data_root.display()
        )
    }
}

/// A preset scenario with `antennas` transmit and receive elements.
pub fn scenario_with_antennas(variant: ScenarioVariant, antennas: usize) -> Scenario {
    let mut scn = build_paper_scenario(variant);
    scn.n_t = antennas;
    scn.n_r = antennas;
    scn
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Generates and writes the dataset a configuration expects.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let data = generate_dataset(&cfg.build_scenario(), cfg.samples, cfg.seed)?;
    let dir = cfg.dataset_dir();
    write_dataset(&dir, &data)?;
    Ok(dir)
}

/// Loads the dataset for `cfg`, checking it was generated with the same
/// scenario and size.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    let data = read_dataset(&dir).map_err(|e| match e {
        Error::MissingDataset { path, .. } => Error::MissingDataset {
            path,
            hint: format!("generate it with `{}`", cfg.gen_command()),
        },
        e => e,
    })?;
    if data.scenario != cfg.build_scenario() || data.n_samples() != cfg.samples || data.seed != cfg.seed {
        return Err(Error::MissingDataset {
            path: dir,
            hint: format!(
                "the dataset there was generated with other settings; regenerate it with `{}`",
                cfg.gen_command()
            ),
        });
    }
    Ok(data)
}

fn csv_rows(m: &RoundMetrics) -> String {
    let mut s = String::new();
    for (bs, b) in m.per_bs.iter().enumerate() {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            m.round, bs, b.pi, b.loss, b.comm_rate, b.radar_rate, b.utility, m.system_utility
        )
        .expect("writing to a string");
    }
    s
}

/// One parsed `metrics.csv` row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsvRow {
    pub round: usize,
    pub bs: usize,
    pub pi: f64,
    pub loss: f64,
    pub comm_rate: f64,
    pub radar_rate: f64,
    pub utility: f64,
    pub system_utility: f64,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::format(format!("metrics file must start with '{CSV_HEADER}'"))),
    }
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format(format!("metrics row {}: '{line}'", i + 1));
            if f.len() != 8 {
                return Err(bad());
            }
            let x = |j: usize| f[j].trim().parse::<f64>().map_err(|_| bad());
            Ok(CsvRow {
                round: f[0].trim().parse().map_err(|_| bad())?,
                bs: f[1].trim().parse().map_err(|_| bad())?,
                pi: x(2)?,
                loss: x(3)?,
                comm_rate: x(4)?,
                radar_rate: x(5)?,
                utility: x(6)?,
                system_utility: x(7)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::Empty("metrics file"));
    }
    Ok(rows)
}

/// Per-run figures derived from `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: String,
    pub scenario: String,
    pub seed: u64,
    pub rounds: usize,
    pub final_system_utility: f64,
    pub best_system_utility: f64,
    pub best_round: usize,
    pub final_utility: Vec<f64>,
    pub final_pi: Vec<f64>,
    pub final_pi_spread: f64,
    pub max_pi_spread: f64,
    pub power_checks: u64,
    pub power_violations: u64,
    pub max_power: f64,
}

struct RoundView {
    round: usize,
    system_utility: f64,
    pi: Vec<f64>,
    utility: Vec<f64>,
}

fn by_round(rows: &[CsvRow]) -> Vec<RoundView> {
    let mut out: Vec<RoundView> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some(v) if v.round == r.round => {
                v.pi.push(r.pi);
                v.utility.push(r.utility);
            }
            _ => out.push(RoundView {
                round: r.round,
                system_utility: r.system_utility,
                pi: vec![r.pi],
                utility: vec![r.utility],
            }),
        }
    }
    out
}

fn spread(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Derives the summary of a run from its CSV rows.
pub fn summarize(rows: &[CsvRow], cfg: &ExperimentConfig, audit: PowerAudit) -> Result<Summary> {
    let rounds = by_round(rows);
    let last = rounds.last().ok_or(Error::Empty("metrics"))?;
    let best = rounds
        .iter()
        .fold(&rounds[0], |b, r| if r.system_utility > b.system_utility { r } else { b });
    Ok(Summary {
        strategy: cfg.strategy.clone(),
        scenario: cfg.scenario.to_string(),
        seed: cfg.seed,
        rounds: rounds.len(),
        final_system_utility: last.system_utility,
        best_system_utility: best.system_utility,
        best_round: best.round,
        final_utility: last.utility.clone(),
        final_pi: last.pi.clone(),
        final_pi_spread: spread(&last.pi),
        max_pi_spread: rounds.iter().map(|r| spread(&r.pi)).fold(0.0, f64::max),
        power_checks: audit.checked,
        power_violations: audit.violations,
        max_power: audit.max_power,
    })
}

fn round_dir(run: &Path, t: usize) -> PathBuf {
    run.join(format!("round_{t}"))
}

/// Newest `round_<t>` directory holding a complete checkpoint.
fn latest_checkpoint(run: &Path) -> Result<Option<(usize, PathBuf)>> {
    if !run.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(run)? {
        let path = entry?.path();
        let t = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("round_"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(t) = t {
            if path.join("state.json").exists() && best.as_ref().is_none_or(|(b, _)| t > *b) {
                best = Some((t, path));
            }
        }
    }
    Ok(best)
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: Summary,
    pub rounds: Vec<RoundMetrics>,
}

/// Runs a configured experiment, writing `metrics.csv`, `summary.json` and
/// checkpoints under the run directory. With `resume`, continues from the
/// newest checkpoint there; rows after it are recomputed.
pub fn run_experiment(cfg: &ExperimentConfig, resume: bool) -> Result<RunOutput> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    run_on_dataset(cfg, &data, resume)
}

/// As [`run_experiment`] with an already loaded dataset.
pub fn run_on_dataset(cfg: &ExperimentConfig, data: &Dataset, resume: bool) -> Result<RunOutput> {
    cfg.validate()?;
    let strategy = cfg.strategy()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    let csv_path = dir.join("metrics.csv");

    let checkpoint = if resume { latest_checkpoint(&dir)? } else { None };
    let (mut fed, mut csv) = match checkpoint {
        Some((_, path)) => {
            let fed = Federation::resume(data, strategy, cfg.schedule(), &path)?;
            let done = fed.rounds_done();
            let old = fs::read_to_string(&csv_path)?;
            let mut csv = format!("{CSV_HEADER}\n");
            for line in old.lines().skip(1) {
                let round: usize = line
                    .split(',')
                    .next()
                    .and_then(|r| r.parse().ok())
                    .ok_or_else(|| Error::format(format!("bad metrics row '{line}'")))?;
                if round < done {
                    csv.push_str(line);
                    csv.push('\n');
                }
            }
            (fed, csv)
        }
        None => (Federation::new(data, strategy, cfg.schedule())?, format!("{CSV_HEADER}\n")),
    };
    fs::write(&csv_path, &csv)?;

    let mut rounds = Vec::new();
    while fed.rounds_done() < cfg.rounds {
        let m = fed.run_round()?;
        csv.push_str(&csv_rows(&m));
        fs::write(&csv_path, &csv)?;
        let t = fed.rounds_done();
        if cfg.checkpoint_every > 0 && (t % cfg.checkpoint_every == 0 || t == cfg.rounds) {
            fed.save_checkpoint(&round_dir(&dir, t))?;
            if cfg.keep_last_checkpoint {
                for entry in fs::read_dir(&dir)? {
                    let path = entry?.path();
                    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    if name.starts_with("round_") && path != round_dir(&dir, t) {
                        fs::remove_dir_all(&path)?;
                    }
                }
            }
        }
        rounds.push(m);
    }

    let audit = fed.audit();
    if audit.violations > 0 {
        return Err(Error::Numerical(format!(
            "{} of {} beamformers exceeded the power budget",
            audit.violations, audit.checked
        )));
    }
    let summary = summarize(&parse_metrics_csv(&csv)?, cfg, audit)?;
    fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(RunOutput { dir, summary, rounds })
}

/// A labeled metrics file for plotting and comparison.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub rows: Vec<CsvRow>,
}

impl Series {
    /// Reads a CSV; the label defaults to the parent directory name.
    pub fn load(path: &Path, label: Option<&str>) -> Result<Self> {
        let rows = parse_metrics_csv(&fs::read_to_string(path)?)?;
        let label = label.map(str::to_string).unwrap_or_else(|| {
            path.parent()
                .and_then(|p| p.file_name())
                .and_then(|n| n.to_str())
                .unwrap_or("run")
                .to_string()
        });
        Ok(Self { label, rows })
    }

    fn final_system_utility(&self) -> f64 {
        by_round(&self.rows).last().map_or(f64::NAN, |r| r.system_utility)
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of `lines` (label, points) with fixed geometry.
fn line_chart(title: &str, subtitle: &str, y_label: &str, lines: &[(String, Vec<(f64, f64)>)]) -> Result<String> {
    let pts = lines.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() || !y0.is_finite() {
        return Err(Error::Empty("chart data"));
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let (w, h, left, right, top, bottom) = (720.0, 440.0, 70.0, 180.0, 60.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="22" font-size="15">{}</text>"#, esc(title));
    let _ = writeln!(s, r##"<text x="{left}" y="40" fill="#555">{}</text>"##, esc(subtitle));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"##,
            left - 6.0,
            sy(fy) + 4.0,
            fy
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"##,
            sx(fx),
            top + ph + 16.0,
            fx
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">round</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        esc(y_label)
    );
    for (i, (label, points)) in lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#,
            path.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            left + pw + 12.0,
            left + pw + 32.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            left + pw + 38.0,
            ly + 4.0,
            esc(label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Renders `(utility.svg, pi.svg)`: system utility per round for every
/// series, and each BS's aggregation weight per round.
pub fn plot(series: &[Series]) -> Result<(String, String)> {
    if series.is_empty() {
        return Err(Error::Empty("series list"));
    }
    let utility: Vec<_> = series
        .iter()
        .map(|s| {
            let pts = by_round(&s.rows).iter().map(|r| (r.round as f64, r.system_utility)).collect();
            (s.label.clone(), pts)
        })
        .collect();
    let mut pi = Vec::new();
    for s in series {
        let rounds = by_round(&s.rows);
        let n_bs = rounds.iter().map(|r| r.pi.len()).max().unwrap_or(0);
        for m in 0..n_bs {
            let pts = rounds
                .iter()
                .filter_map(|r| r.pi.get(m).map(|&p| (r.round as f64, p)))
                .collect();
            pi.push((format!("{} BS{m}", s.label), pts));
        }
    }
    let note = "raw utility, not normalized across BSs or strategies";
    Ok((
        line_chart("System utility", note, "sum of BS utilities", &utility)?,
        line_chart("Aggregation weight per BS", "weight of the global model in each BS's update", "pi", &pi)?,
    ))
}

/// Table of final system utilities with the change relative to the first
/// series, in percent.
pub fn compare(series: &[Series]) -> Result<String> {
    let base = series.first().ok_or(Error::Empty("series list"))?.final_system_utility();
    let width = series.iter().map(|s| s.label.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}  {:>14}  {:>10}\n", "run", "final utility", "vs first");
    for s in series {
        let u = s.final_system_utility();
        let _ = writeln!(out, "{:<width$}  {:>14.6}  {:>+9.2}%", s.label, u, 100.0 * (u - base) / base.abs());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(root: &Path, strategy: &str) -> ExperimentConfig {
        let text = "preset = desk\nrounds = 2\nsamples = 40\nhidden = 8\nantennas = 2\nlocal_epochs = 1\neval_batch = 2\nbatch_size = 16\nlr = 0.001\n";
        let overrides = vec![
            ("strategy".to_string(), strategy.to_string()),
            ("data_root".to_string(), root.join("data").display().to_string()),
            ("out_dir".to_string(), root.join("run").display().to_string()),
        ];
        ExperimentConfig::from_sources(None, Some(text), &overrides).unwrap()
    }

    #[test]
    fn presets_and_precedence() {
        let desk = ExperimentConfig::preset(Preset::Desk);
        assert_eq!((desk.antennas, desk.samples, desk.rounds), (4, 2000, 30));
        let full = ExperimentConfig::preset(Preset::Full);
        assert_eq!((full.antennas, full.samples, full.rounds, full.hidden), (8, 20_000, 100, 256));
        let text = "# comment\npreset = full\nrounds = 7 # trailing\nkappa=2.5\n";
        let cfg = ExperimentConfig::from_sources(None, Some(text), &[("rounds".into(), "9".into())]).unwrap();
        assert_eq!((cfg.rounds, cfg.kappa, cfg.samples), (9, 2.5, 20_000));
        let cfg = ExperimentConfig::from_sources(Some(Preset::Desk), Some(text), &[]).unwrap();
        assert_eq!((cfg.rounds, cfg.samples), (7, 2000));
        assert!(ExperimentConfig::from_sources(None, Some("bogus = 1"), &[]).is_err());
        assert!(ExperimentConfig::from_sources(None, Some("rounds 3"), &[]).is_err());
        assert!(ExperimentConfig::from_sources(None, Some("lr = 0"), &[]).is_err());
        assert!(ExperimentConfig::from_sources(None, Some("strategy = sgd"), &[]).is_err());
        let cfg = ExperimentConfig::from_sources(None, Some("strategy = fixed_pfl\npi_fixed = 0.25"), &[]).unwrap();
        assert_eq!(cfg.strategy().unwrap(), Strategy::FixedPfl { pi: 0.25 });
    }

    #[test]
    fn missing_dataset_names_the_generation_command() {
        let root = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(root.path(), "em_pfl");
        match run_experiment(&cfg, false) {
            Err(Error::MissingDataset { hint, .. }) => assert!(hint.contains("isac-pfl gen-data"), "{hint}"),
            other => panic!("expected a missing-dataset error, got {other:?}"),
        }
    }

    #[test]
    fn one_round_writes_one_row_per_bs() {
        let root = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(root.path(), "em_pfl");
        cfg.rounds = 1;
        gen_data(&cfg).unwrap();
        let out = run_experiment(&cfg, false).unwrap();
        let text = fs::read_to_string(out.dir.join("metrics.csv")).unwrap();
        assert_eq!(text.lines().count(), 4);
        let rows = parse_metrics_csv(&text).unwrap();
        assert!(rows.iter().all(|r| r.utility.is_finite() && r.loss.is_finite()));
        let summary: Summary = serde_json::from_slice(&fs::read(out.dir.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary, out.summary);
        assert_eq!(summary.final_system_utility, rows[0].system_utility);
        let sum: f64 = rows.iter().map(|r| r.utility).sum();
        assert!((sum - summary.final_system_utility).abs() < 1e-9);
        assert!(out.dir.join("round_1/global.bin").exists());
        assert!(out.dir.join("round_1/bs2.opt.bin").exists());
    }

    #[test]
    fn local_only_reports_zero_weights() {
        let root = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(root.path(), "local_only");
        gen_data(&cfg).unwrap();
        let out = run_experiment(&cfg, false).unwrap();
        let rows = parse_metrics_csv(&fs::read_to_string(out.dir.join("metrics.csv")).unwrap()).unwrap();
        assert!(rows.iter().all(|r| r.pi == 0.0));
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_csv() {
        let root = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(root.path(), "em_pfl");
        cfg.rounds = 3;
        cfg.keep_last_checkpoint = false;
        gen_data(&cfg).unwrap();
        let full = run_experiment(&cfg, false).unwrap();
        let expect = fs::read_to_string(full.dir.join("metrics.csv")).unwrap();
        // Pretend the run stopped after round 1 with a stale row written.
        fs::remove_dir_all(full.dir.join("round_2")).unwrap();
        fs::remove_dir_all(full.dir.join("round_3")).unwrap();
        let again = run_experiment(&cfg, true).unwrap();
        assert_eq!(again.rounds.len(), 2);
        assert_eq!(fs::read_to_string(again.dir.join("metrics.csv")).unwrap(), expect);
        assert_eq!(again.summary, full.summary);
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let root = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(root.path(), "em_pfl");
        gen_data(&cfg).unwrap();
        let mut other = cfg.clone();
        other.samples = 50;
        assert!(matches!(run_experiment(&other, false), Err(Error::MissingDataset { .. })));
    }

    fn series(label: &str, rows: &[(usize, usize, f64, f64)]) -> Series {
        let mut text = format!("{CSV_HEADER}\n");
        for &(t, bs, pi, u) in rows {
            text.push_str(&format!("{t},{bs},{pi},1,1,1,{u},{}\n", u * 2.0));
        }
        Series {
            label: label.into(),
            rows: parse_metrics_csv(&text).unwrap(),
        }
    }

    #[test]
    fn plots_are_deterministic_with_one_line_per_series() {
        let s = series("a", &[(0, 0, 0.5, 1.0), (0, 1, 0.4, 1.0), (1, 0, 0.6, 2.0), (1, 1, 0.3, 2.0)]);
        let (u, p) = plot(std::slice::from_ref(&s)).unwrap();
        assert_eq!(u.matches("<polyline").count(), 1);
        assert_eq!(p.matches("<polyline").count(), 2);
        assert!(u.contains("not normalized"));
        assert_eq!(plot(std::slice::from_ref(&s)).unwrap(), (u, p));
        let t = series("b", &[(0, 0, 0.5, 3.0), (0, 1, 0.5, 3.0)]);
        let (u2, _) = plot(&[s, t]).unwrap();
        assert_eq!(u2.matches("<polyline").count(), 2);
        assert!(plot(&[]).is_err());
        assert!(matches!(parse_metrics_csv(""), Err(Error::Format(_))));
        assert!(matches!(parse_metrics_csv(&format!("{CSV_HEADER}\n")), Err(Error::Empty(_))));
    }

    #[test]
    fn compare_reports_relative_change() {
        let a = series("fedavg", &[(0, 0, 0.5, 5.0)]);
        let b = series("em_pfl", &[(0, 0, 0.5, 6.0)]);
        let table = compare(&[a, b]).unwrap();
        assert!(table.contains("+20.00%"), "{table}");
        assert!(table.contains("+0.00%"));
    }
}
