use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cisru_sim::gateway::run::{self, ReplayReport, RunOptions};
use cisru_sim::gateway::server::{serve, ServeOptions};

#[derive(Parser)]
#[command(
    name = "cisru-sim",
    version,
    about = "Deterministic rover/astronaut mission simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario headless and write its event log.
    ///
    /// Exit status: 0 when every scenario goal ended, 1 when some did not,
    /// 2 on errors.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Defaults to the scenario's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ticks: u64,
        #[arg(long)]
        log: PathBuf,
    },
    /// Serve a scenario to console clients over TCP.
    Serve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        port: u16,
        /// Ticks per second.
        #[arg(long, default_value_t = 10.0)]
        rate: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the session's event log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Re-run a logged scenario and compare against the log.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Cmd::Run {
            scenario,
            seed,
            ticks,
            log,
        } => {
            let opts = RunOptions {
                scenario,
                seed,
                ticks,
                log,
                config_file: None,
            };
            match run::run_headless(&opts) {
                Ok(s) => {
                    println!(
                        "{} ticks, {} records, goals {}",
                        s.ticks,
                        s.records,
                        if s.all_goals_terminal {
                            "all terminal"
                        } else {
                            "still open"
                        }
                    );
                    ExitCode::from(if s.all_goals_terminal { 0 } else { 1 })
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Cmd::Serve {
            scenario,
            port,
            rate,
            seed,
            log,
        } => {
            let opts = RunOptions {
                scenario,
                seed,
                ticks: 0,
                log: PathBuf::new(),
                config_file: None,
            };
            let result = run::kernel_for(&opts).and_then(|k| {
                let handle = serve(
                    k,
                    port,
                    ServeOptions {
                        rate,
                        log,
                        max_ticks: None,
                    },
                )?;
                eprintln!("listening on {}", handle.addr());
                handle.wait()
            });
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Cmd::Replay { log } => match run::replay(&log) {
            Ok(ReplayReport::Identical { records }) => {
                println!("identical ({records} records)");
                ExitCode::SUCCESS
            }
            Ok(ReplayReport::Diverged {
                line,
                expected,
                actual,
            }) => {
                println!("divergence at line {line}");
                println!(
                    "  log:    {}",
                    expected.as_deref().unwrap_or("<end of log>")
                );
                println!(
                    "  replay: {}",
                    actual.as_deref().unwrap_or("<end of replay>")
                );
                ExitCode::from(1)
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
