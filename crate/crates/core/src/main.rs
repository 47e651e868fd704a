use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use netfdi::fdi::{FdiConfig, Level};
use netfdi::scenario::config::ScenarioConfig;
use netfdi::scenario::report::{analyze, emit_reports, verify_manifest};
use netfdi::scenario::{run_check, run_scenario, sweep};
use netfdi::{Error, Result};

#[derive(Parser)]
#[command(name = "netfdi", version, about = "Networked estimation with sensor fault detection and recovery")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full pipeline: design, simulate, detect, recover, write artifacts.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Structure, observability and gain design only; prints JSON.
    Check { config: PathBuf },
    /// Monte Carlo over a seed range `a..b` (inclusive); prints CSV.
    Sweep {
        config: PathBuf,
        #[arg(long, value_parser = parse_range)]
        seeds: (u64, u64),
    },
    /// Re-run detection on the traces stored in a run directory; prints JSON.
    Analyze {
        dir: PathBuf,
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long)]
        persistence: Option<usize>,
        /// 68, 95 or 99.
        #[arg(long)]
        level: Option<u32>,
    },
    /// Check every file of a run directory against its manifest hashes.
    Verify { dir: PathBuf },
}

fn parse_range(s: &str) -> std::result::Result<(u64, u64), String> {
    let (a, b) = s.split_once("..").ok_or("expected a..b")?;
    let a: u64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|e| format!("{e}"))?;
    if a > b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok((a, b))
}

fn load(path: &PathBuf) -> Result<ScenarioConfig> {
    let cfg = ScenarioConfig::load(path).map_err(|e| e.at_stage("config"))?;
    cfg.validate().map_err(|e| e.at_stage("config"))?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run { config, out, seed } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let run = run_scenario(&cfg)?;
            let manifest = emit_reports(&run, &cfg, &out).map_err(|e| e.at_stage("report"))?;
            let r = &run.report;
            let isolated: Vec<usize> = r.fdi.isolated.iter().map(|s| s + 1).collect();
            eprintln!(
                "gain {} rho={:.4} b={:.4}; phi={:.4}; isolated {:?}; {} files in {}",
                manifest.gain_method,
                r.gain.rho,
                r.gain.b,
                r.thresholds.phi,
                isolated,
                manifest.files.len(),
                out.display()
            );
            if let Some(p) = &r.recovery {
                eprintln!(
                    "recovery: measured states {:?}; networked observable {}; max/median msee {:.4}/{:.4}",
                    p.measured_states.iter().map(|s| s + 1).collect::<Vec<_>>(),
                    p.observability.networked.observable,
                    p.max_msee,
                    p.median_msee
                );
            }
            Ok(())
        }
        Cmd::Check { config } => print_json(&run_check(&load(&config)?)?),
        Cmd::Sweep { config, seeds } => {
            let cfg = load(&config)?;
            let rows = sweep(&cfg, seeds.0..=seeds.1)?;
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
            Ok(())
        }
        Cmd::Analyze { dir, burn_in, persistence, level } => {
            let cfg = if burn_in.is_some() || persistence.is_some() || level.is_some() {
                let d = FdiConfig::default();
                let level = match level {
                    Some(p) => Level::from_percent(p).ok_or_else(|| Error::Config(format!("level {p} is not 68, 95 or 99")))?,
                    None => d.decision_level,
                };
                Some(FdiConfig {
                    burn_in: burn_in.unwrap_or(d.burn_in),
                    persistence: persistence.unwrap_or(d.persistence),
                    decision_level: level,
                })
            } else {
                None
            };
            print_json(&analyze(&dir, cfg).map_err(|e| e.at_stage("analyze"))?)
        }
        Cmd::Verify { dir } => {
            let bad = verify_manifest(&dir).map_err(|e| e.at_stage("verify"))?;
            if bad.is_empty() {
                println!("ok");
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("hash mismatch: {}", bad.join(", "))).at_stage("verify"))
            }
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
