use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use voipsim::config::{load_scenario, ScenarioConfig};
use voipsim::engine::SimTime;
use voipsim::network::{run_once, RunOptions};
use voipsim::radio::Standard;
use voipsim::scenario::{self, shipped_scenario};

#[derive(Parser)]
#[command(
    version,
    about = "SIP/RTP voice over 802.11a and 802.11b, side by side"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Phy {
    A,
    B,
}

impl From<Phy> for Standard {
    fn from(p: Phy) -> Self {
        match p {
            Phy::A => Standard::A,
            Phy::B => Standard::B,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    /// Scenario file; the built-in two-WLAN scenario when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Seed; defaults to the scenario's own.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the simulated duration, in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Directory to write CSVs and the text report into.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the scenario on one PHY.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        phy: Option<Phy>,
    },
    /// Run both PHYs and check the expected orderings.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Load and validate a scenario without running it.
    Validate {
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

fn load(path: Option<&Path>) -> Result<ScenarioConfig, String> {
    match path {
        Some(p) => load_scenario(p).map_err(|e| e.to_string()),
        None => Ok(shipped_scenario()),
    }
}

fn duration(d: Option<f64>) -> Result<Option<SimTime>, String> {
    match d {
        Some(s) if !(s.is_finite() && s > 0.0) => {
            Err(format!("--duration must be positive, got {s}"))
        }
        Some(s) => Ok(Some(SimTime::from_secs_f64(s))),
        None => Ok(None),
    }
}

fn real_main(cli: Cli) -> Result<bool, String> {
    match cli.cmd {
        Cmd::Validate { scenario } => {
            let cfg = load(scenario.as_deref())?;
            println!(
                "{}: {} nodes, {} channels, {} flows",
                cfg.name,
                cfg.nodes.len(),
                cfg.channels.len(),
                cfg.flows.len()
            );
            Ok(true)
        }
        Cmd::Run { common, phy } => {
            let cfg = load(common.scenario.as_deref())?;
            let opts = RunOptions {
                phy: phy.map(Standard::from).unwrap_or(cfg.phy),
                seed: common.seed.unwrap_or(cfg.seed),
                duration: duration(common.duration)?,
            };
            let report = run_once(&cfg, opts).map_err(|e| e.to_string())?;
            if let Some(out) = &common.out {
                scenario::emit_run(&report, out).map_err(|e| e.to_string())?;
            }
            print!("{}", scenario::format_run(&report));
            Ok(true)
        }
        Cmd::Compare { common } => {
            let cfg = load(common.scenario.as_deref())?;
            let seed = common.seed.unwrap_or(cfg.seed);
            let c = scenario::run_pair(
                &cfg,
                Standard::A,
                Standard::B,
                seed,
                duration(common.duration)?,
            )
            .map_err(|e| e.to_string())?;
            if let Some(out) = &common.out {
                scenario::emit_comparison(&c, out).map_err(|e| e.to_string())?;
            }
            print!("{}", scenario::format_comparison(&c));
            Ok(c.orderings_hold())
        }
    }
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
