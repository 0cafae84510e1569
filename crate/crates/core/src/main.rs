use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use freshfi_sim::harness::suites::{self, SuiteOptions};
use freshfi_sim::harness::{run_scenario, write_outputs, ScenarioConfig};
use freshfi_sim::sim::SimDuration;

#[derive(Parser)]
#[command(version, about = "Status-update freshness simulator for a single WiFi link")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its report.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the per-delivery trace.
        #[arg(long)]
        trace: bool,
    },
    /// Fresh-Fi against WiFi UDP and WiFresh APP at 5, 6 and 7 kHz.
    CompareBaselines {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: Seeds,
    },
    /// The Fresh-Fi feature ablations.
    Ablations {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: Seeds,
    },
    /// Measured request-to-arrival interval under both tunnel calibrations.
    RtaCalibration {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: Seeds,
    },
    /// Print the default scenario config.
    DefaultConfig,
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file; built-in Fresh-Fi defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Simulated duration in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Seeds {
    /// Number of seeds, counting up from the config seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

fn load(common: &Common) -> Result<ScenarioConfig> {
    let mut cfg = match &common.config {
        Some(p) => ScenarioConfig::from_file(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(d) = duration(common)? {
        cfg.duration = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn duration(common: &Common) -> Result<Option<SimDuration>> {
    common
        .duration
        .map(|s| SimDuration::try_from_us_f64(s * 1e6).context("--duration must be a whole number of ns"))
        .transpose()
}

fn out_dir(common: &Common, cfg: &ScenarioConfig) -> Option<PathBuf> {
    common.out.clone().or_else(|| cfg.output.dir.clone())
}

fn write_table(dir: Option<&Path>, file: &str, csv: &str) -> Result<()> {
    print!("{csv}");
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(file);
        std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn suite_opts(cfg: &ScenarioConfig, seeds: &Seeds) -> SuiteOptions {
    SuiteOptions::new(cfg.seed..cfg.seed + seeds.seeds, None)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { common, seed, trace } => {
            let mut cfg = load(&common)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let trace = trace || cfg.output.trace;
            let out = run_scenario(&cfg)?;
            if let Some(dir) = out_dir(&common, &cfg) {
                write_outputs(&dir, &out, trace).with_context(|| format!("writing outputs to {}", dir.display()))?;
            }
            println!("{}", serde_json::to_string_pretty(&out.report)?);
            if out.report.no_deliveries {
                eprintln!("warning: no deliveries inside the accounting horizon");
            }
        }
        Command::CompareBaselines { common, seeds } => {
            let cfg = load(&common)?;
            let table = suites::compare_baselines(&cfg, &suite_opts(&cfg, &seeds))?;
            write_table(out_dir(&common, &cfg).as_deref(), "baselines.csv", &table.to_csv())?;
        }
        Command::Ablations { common, seeds } => {
            let cfg = load(&common)?;
            let table = suites::run_ablations(&cfg, &suite_opts(&cfg, &seeds))?;
            write_table(out_dir(&common, &cfg).as_deref(), "ablations.csv", &table.to_csv())?;
        }
        Command::RtaCalibration { common, seeds } => {
            let cfg = load(&common)?;
            let rows = suites::rta_calibration(&cfg, &suite_opts(&cfg, &seeds))?;
            write_table(out_dir(&common, &cfg).as_deref(), "rta.csv", &suites::rta_csv(&rows))?;
        }
        Command::DefaultConfig => print!("{}", ScenarioConfig::default().to_toml_string()),
    }
    Ok(())
}
