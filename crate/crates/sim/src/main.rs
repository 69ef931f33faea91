use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stride_sim::audit::{audit_log, replay};
use stride_sim::log::ReplanStatus;
use stride_sim::server::{ServeOptions, Server};
use stride_sim::{run_scenario, ScenarioConfig, SimulationLog};

#[derive(Parser)]
#[command(name = "stride", version, about = "Quadruped footstep and base trajectory planner: scenario simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario.
    Run {
        scenario: PathBuf,
        /// With --serve: start running at once instead of waiting for a
        /// start command.
        #[arg(long)]
        headless: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON-lines log here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Serve the live websocket API on this port.
        #[arg(long)]
        serve: Option<u16>,
        /// Address to bind with --serve.
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
    /// Re-run a logged scenario, compare the logs and audit every plan.
    Replay { log: PathBuf },
    /// Validate a scenario file.
    Check { scenario: PathBuf },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool, String> {
    match cli.command {
        Cmd::Check { scenario } => {
            let config = ScenarioConfig::load(&scenario).map_err(|e| e.to_string())?;
            println!(
                "{}: ok ({}, {} events)",
                scenario.display(),
                config.name,
                config.events.len()
            );
            Ok(true)
        }
        Cmd::Run {
            scenario,
            headless,
            seed,
            log,
            serve: Some(port),
            bind,
        } => {
            let config = ScenarioConfig::load(&scenario).map_err(|e| e.to_string())?;
            let options = ServeOptions {
                seed,
                log,
                autostart: headless,
            };
            let server = Server::start(&format!("{bind}:{port}"), Some(config), options)?;
            eprintln!("serving ws://{}", server.local_addr());
            server.wait();
            Ok(true)
        }
        Cmd::Run {
            scenario, seed, log: path, ..
        } => {
            let config = ScenarioConfig::load(&scenario).map_err(|e| e.to_string())?;
            let log = run_scenario(&config, seed).map_err(|e| e.to_string())?;
            if let Some(path) = path {
                let file = File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                log.write_jsonl(BufWriter::new(file)).map_err(|e| e.to_string())?;
            }
            let replans: Vec<_> = log.replans().collect();
            let converged = replans.iter().filter(|r| r.status == ReplanStatus::Converged).count();
            let iterations: usize = replans.iter().map(|r| r.iterations).sum();
            println!(
                "{}: {} touchdowns, {}/{} plans converged, {:.1} iterations per plan",
                config.name,
                log.touchdowns().len(),
                converged,
                replans.len(),
                iterations as f64 / replans.len().max(1) as f64
            );
            if let Some(s) = log.states().last() {
                println!("final base [{:.3}, {:.3}, {:.3}]", s.base[0], s.base[1], s.base[2]);
            }
            match log.halted() {
                Some(reason) => {
                    println!("halted: {reason}");
                    Ok(false)
                }
                None => Ok(true),
            }
        }
        Cmd::Replay { log: path } => {
            let file = File::open(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let log = SimulationLog::read_jsonl(BufReader::new(file))?;
            let report = audit_log(&log);
            println!("audit: {}", report.summary());
            for p in &report.problems {
                println!("  {p}");
            }
            let outcome = replay(&log).map_err(|e| e.to_string())?;
            match outcome.first_mismatch {
                None => println!("replay: {} records identical", outcome.records),
                Some(i) => println!("replay: records differ from record {i} of {}", outcome.records),
            }
            Ok(report.passed() && outcome.identical())
        }
    }
}
