use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use chronos::client::DropoutPolicy;
use chronos::config::{CohortConfig, FileConfig, Mode};
use chronos::harness::criteria;
use chronos::harness::experiments::{compare_modes, crash_matrix};
use chronos::harness::run_experiment;
use chronos::id::DeviceId;
use chronos::transport;

#[derive(Parser)]
#[command(
    name = "chronos",
    version,
    about = "Secure aggregation with enclave-held pairwise keys"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// Write JSON lines here instead of stdout.
    #[arg(long)]
    json: Option<PathBuf>,
}

impl Output {
    fn emit(&self, json_lines: &str, table: &str) -> std::io::Result<()> {
        match &self.json {
            Some(p) => std::fs::write(p, json_lines)?,
            None => std::io::stdout().write_all(json_lines.as_bytes())?,
        }
        eprint!("{table}");
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration in process and report every round.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: Output,
    },
    /// Message counts of every mode across cohort sizes.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "4,8,12,16,20")]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "chronos,chronos-sw,plaintext,sync")]
        modes: Vec<Mode>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: Output,
    },
    /// Kill a client at every persistence and daemon step.
    CrashMatrix {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        reps: u32,
        #[command(flatten)]
        out: Output,
    },
    /// Run the acceptance checks.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Only these criteria (1-10).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
        #[command(flatten)]
        out: Output,
    },
    /// One client daemon over TCP.
    Client {
        #[arg(long)]
        id: DeviceId,
        #[arg(long)]
        server: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "none")]
        dropout: DropoutPolicy,
        /// Device directory; defaults to a per-id directory under the
        /// system temp dir.
        #[arg(long)]
        state: Option<PathBuf>,
        /// Seconds to keep retrying the initial connection.
        #[arg(long, default_value_t = 30)]
        connect_timeout: u64,
    },
    /// The aggregation server over TCP.
    Server {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        epoch_len: Option<u32>,
        #[arg(long)]
        mode: Option<Mode>,
        /// Seconds to wait for the whole cohort to join.
        #[arg(long, default_value_t = 60)]
        join_timeout: u64,
        #[command(flatten)]
        out: Output,
    },
}

fn load(path: Option<&Path>) -> Result<CohortConfig, String> {
    match path {
        Some(p) => CohortConfig::load(p).map_err(|e| e.to_string()),
        None => CohortConfig::from_file_config(FileConfig::default()).map_err(|e| e.to_string()),
    }
}

fn status(pass: bool) -> ExitCode {
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    let io = |e: std::io::Error| e.to_string();
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load(config.as_deref())?;
            let report = run_experiment(&cfg).map_err(io)?;
            out.emit(&report.to_json_lines(), &report.summary_table()).map_err(io)?;
            Ok(status(report.passed()))
        }
        Command::Compare { n, modes, config, out } => {
            let mut base = load(config.as_deref())?;
            if config.is_none() {
                base.rounds = 10;
                base.epoch_len = 5;
            }
            let report = compare_modes(&base, &n, &modes)?;
            out.emit(&report.to_json_lines(), &report.summary_table()).map_err(io)?;
            Ok(status(report.passed()))
        }
        Command::CrashMatrix { config, reps, out } => {
            let base = load(config.as_deref())?;
            let (matrix, _) = crash_matrix(&base, reps).map_err(io)?;
            out.emit(&matrix.to_json_lines(), &matrix.summary_table()).map_err(io)?;
            Ok(status(matrix.passed()))
        }
        Command::Verify { seed, only, out } => {
            let results: Vec<_> = if only.is_empty() {
                criteria::run_all(seed)
            } else {
                only.iter()
                    .map(|id| match id {
                        1 => Ok(criteria::mask_cancellation(seed, 100)),
                        2 => Ok(criteria::dropout_recovery(seed)),
                        3 => Ok(criteria::storage_footprint(seed)),
                        4 => Ok(criteria::freshness(seed, 100)),
                        5 => Ok(criteria::crash_safety(seed, 20)),
                        6 => Ok(criteria::message_complexity(seed)),
                        7 => Ok(criteria::shamir_properties(seed)),
                        8 => Ok(criteria::prg_quality(seed)),
                        9 => Ok(criteria::decorrelation(seed)),
                        10 => Ok(criteria::quantization_round_trip(seed)),
                        other => Err(format!("no criterion {other}")),
                    })
                    .collect::<Result<_, _>>()?
            };
            let json: String = results
                .iter()
                .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
                .collect();
            out.emit(&json, &criteria::summary(&results)).map_err(io)?;
            Ok(status(results.iter().all(|r| r.pass)))
        }
        Command::Client {
            id,
            server,
            config,
            dropout,
            state,
            connect_timeout,
        } => {
            let cfg = load(Some(&config))?;
            let dir = state.unwrap_or_else(|| std::env::temp_dir().join(format!("chronos-client-{id}")));
            let summary = transport::run_client(&server, &cfg, id, &dir, dropout, Duration::from_secs(connect_timeout))
                .map_err(io)?;
            println!("{}", serde_json::to_string(&summary).expect("serializable"));
            Ok(ExitCode::SUCCESS)
        }
        Command::Server {
            listen,
            config,
            rounds,
            epoch_len,
            mode,
            join_timeout,
            out,
        } => {
            let mut f = load(Some(&config))?.to_file_config();
            if let Some(r) = rounds {
                f.rounds = r;
            }
            if let Some(e) = epoch_len {
                f.epoch_len = e;
            }
            if let Some(m) = mode {
                f.mode = m;
            }
            let cfg = CohortConfig::from_file_config(f).map_err(|e| e.to_string())?;
            let listener = TcpListener::bind(&listen).map_err(io)?;
            log::info!("listening on {}", listener.local_addr().map_err(io)?);
            let report = transport::serve(listener, &cfg, Duration::from_secs(join_timeout)).map_err(io)?;
            out.emit(&report.to_json_lines(), &report.summary_table()).map_err(io)?;
            Ok(status(report.passed()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
