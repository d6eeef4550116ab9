//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};

use isac_pfl::datagen::ScenarioVariant;
use isac_pfl::experiment::{compare, gen_data, plot, run_experiment, ExperimentConfig, Preset, Series};
use isac_pfl::fl::Strategy;
use isac_pfl::{Error, Result};

const SCENARIOS: [&str; 4] = [
    "homogeneous",
    "heterogeneous",
    "equal_ue_homogeneous",
    "equal_ue_heterogeneous",
];

#[derive(Parser)]
#[command(name = "isac-pfl", version, about = "Personalized federated ISAC beamforming experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic channel dataset.
    GenData(Common),
    /// Train a federation and write metrics.csv, summary.json and checkpoints.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from the newest checkpoint of the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Draw utility.svg and pi.svg from one or more metrics.csv files.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Series labels, in the order of the files.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Table of final system utilities relative to the first file.
    Compare {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
    },
}

#[derive(Args)]
struct Common {
    /// Key-value configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["desk", "full"])]
    preset: Option<String>,
    #[arg(long, value_parser = PossibleValuesParser::new(SCENARIOS))]
    scenario: Option<String>,
    #[arg(long, value_parser = PossibleValuesParser::new(Strategy::NAMES))]
    strategy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Channel samples per BS.
    #[arg(long)]
    samples: Option<usize>,
    /// Transmit and receive antennas per BS.
    #[arg(long)]
    antennas: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    eval_batch: Option<usize>,
    #[arg(long)]
    pi_fixed: Option<f64>,
    #[arg(long)]
    head_layers: Option<usize>,
    #[arg(long)]
    prox_lambda: Option<f64>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    /// Worker threads; results are identical for any value.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let text = self.config.as_ref().map(fs::read_to_string).transpose().map_err(|e| {
            Error::Config(format!("cannot read config file: {e}"))
        })?;
        let mut o: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        let s = |v: &Option<usize>| v.map(|x| x.to_string());
        let f = |v: &Option<f64>| v.map(|x| x.to_string());
        let p = |v: &Option<PathBuf>| v.as_ref().map(|x| x.display().to_string());
        put("scenario", self.scenario.clone());
        put("strategy", self.strategy.clone());
        put("seed", self.seed.map(|x| x.to_string()));
        put("samples", s(&self.samples));
        put("antennas", s(&self.antennas));
        put("rounds", s(&self.rounds));
        put("local_epochs", s(&self.local_epochs));
        put("batch_size", s(&self.batch_size));
        put("lr", f(&self.lr));
        put("kappa", f(&self.kappa));
        put("eval_batch", s(&self.eval_batch));
        put("pi_fixed", f(&self.pi_fixed));
        put("head_layers", s(&self.head_layers));
        put("prox_lambda", f(&self.prox_lambda));
        put("inner_steps", s(&self.inner_steps));
        put("hidden", s(&self.hidden));
        put("data_root", p(&self.data_root));
        put("out_dir", p(&self.out_dir));
        put("name", self.name.clone());
        put("threads", s(&self.threads));
        put("checkpoint_every", s(&self.checkpoint_every));
        let preset = self.preset.as_deref().map(str::parse::<Preset>).transpose()?;
        ExperimentConfig::from_sources(preset, text.as_deref(), &o)
    }
}

fn load_series(csv: &[PathBuf], labels: &[String]) -> Result<Vec<Series>> {
    if !labels.is_empty() && labels.len() != csv.len() {
        return Err(Error::Config(format!("{} labels for {} files", labels.len(), csv.len())));
    }
    csv.iter()
        .enumerate()
        .map(|(i, path)| Series::load(path, labels.get(i).map(String::as_str)))
        .collect()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = common.config()?;
            let dir = gen_data(&cfg)?;
            println!("wrote {} samples per BS to {}", cfg.samples, dir.display());
        }
        Command::Run { common, resume } => {
            let cfg = common.config()?;
            let out = run_experiment(&cfg, resume)?;
            for r in &out.rounds {
                eprintln!(
                    "round {:>3}  system utility {:.6}  pi spread {:.4}  ({:.1} s)",
                    r.round,
                    r.system_utility,
                    r.pi_spread(),
                    r.duration_secs
                );
            }
            println!(
                "{}: final system utility {:.6} ({} rounds) in {}",
                cfg.run_name(),
                out.summary.final_system_utility,
                out.summary.rounds,
                out.dir.display()
            );
        }
        Command::Plot { csv, labels, out } => {
            let series = load_series(&csv, &labels)?;
            let (utility, pi) = plot(&series)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("utility.svg"), utility)?;
            fs::write(out.join("pi.svg"), pi)?;
            println!("wrote utility.svg and pi.svg to {}", out.display());
        }
        Command::Compare { csv, labels } => {
            print!("{}", compare(&load_series(&csv, &labels)?)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Keep the variant list in the help text in sync with the library.
    debug_assert!(SCENARIOS.iter().all(|s| s.parse::<ScenarioVariant>().is_ok()));
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
