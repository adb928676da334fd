//! Command-line front end. Every command maps onto one API endpoint and
//! prints the same envelope (or the same CSV with `--csv`).

use std::io::Write as _;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, NaiveDate, Utc};
use clap::{Args, Parser, Subcommand};
use daycast_core::datastore::SyntheticConfig;
use daycast_core::exec::Execution;
use daycast_core::forecaster::EpochHook;
use serde::Serialize;

use crate::clock::SystemClock;
use crate::engine::{CycleRequest, Engine, EngineOptions, TrainRequest};
use crate::error::{Result, ServiceError};
use crate::http::{self, parse_thetas, split_list, AppState};
use crate::payload::{ApiEnvelope, CsvTable};

#[derive(Debug, Parser)]
#[command(
    name = "daycast",
    version,
    about = "Day-ahead load forecasting with uncertainty-driven active learning"
)]
pub struct Cli {
    /// Store directory.
    #[arg(
        long,
        env = "DAYCAST_DATA_DIR",
        default_value = "daycast-data",
        global = true
    )]
    pub data_dir: PathBuf,
    /// Overrides every seed (synthetic data and training).
    #[arg(long, env = "DAYCAST_SEED", global = true)]
    pub seed_override: Option<u64>,
    /// Print a CSV table instead of the JSON envelope.
    #[arg(long, global = true)]
    pub csv: bool,
    /// Run batch loops on the calling thread only.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and make it current.
    Synth {
        #[arg(long, default_value_t = 120)]
        days: usize,
        /// First hour, RFC 3339.
        #[arg(long)]
        start: Option<DateTime<Utc>>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Ingest a CSV file.
    Ingest {
        file: PathBuf,
        /// `column:series_id:unit,...`
        #[arg(long)]
        schema: String,
    },
    /// Describe the current dataset.
    Dataset,
    /// Train a model and make it active.
    Train {
        /// JSON training request; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// List models, or describe one.
    Models { id: Option<String> },
    /// Day-ahead forecast for one date.
    Forecast {
        #[arg(long)]
        date: NaiveDate,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Uncertainty and operator flags per day, inclusive range.
    Flags {
        #[arg(long)]
        from: NaiveDate,
        #[arg(long)]
        to: NaiveDate,
    },
    /// Score a model over a span (held-out span by default).
    Metrics {
        #[arg(long)]
        model: Option<String>,
        #[command(flatten)]
        span: SpanArgs,
    },
    /// Active model against seasonal-naive, ARIMA and SARIMA.
    Bench {
        /// Comma-separated subset of rnn, seasonal, ar, arima, sarima.
        #[arg(long, default_value = "rnn,seasonal,ar")]
        models: String,
        #[command(flatten)]
        span: SpanArgs,
    },
    /// Before/after of a cycle, or two models side by side.
    Compare {
        #[arg(long, conflicts_with_all = ["a", "b"])]
        cycle: Option<usize>,
        #[arg(long, requires = "b")]
        a: Option<String>,
        #[arg(long, requires = "a")]
        b: Option<String>,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Active-learning commands.
    Al {
        #[command(subcommand)]
        command: AlCommand,
    },
    /// Flag a rare event over `[from, to)`.
    FlagEvent {
        #[arg(long)]
        from: DateTime<Utc>,
        #[arg(long)]
        to: DateTime<Utc>,
        #[arg(long, default_value = "")]
        note: String,
        #[arg(long, default_value = "operator")]
        actor: String,
    },
    /// List operator flags.
    Events,
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "DAYCAST_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
    },
}

#[derive(Debug, Args)]
pub struct SpanArgs {
    /// `START/END`, each a date or an RFC 3339 instant; the held-out span
    /// when omitted.
    #[arg(long, value_parser = parse_span)]
    span: Option<(DateTime<Utc>, DateTime<Utc>)>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

impl SpanArgs {
    fn bounds(&self) -> (Option<DateTime<Utc>>, Option<DateTime<Utc>>) {
        (self.span.map(|s| s.0), self.span.map(|s| s.1))
    }
}

fn parse_instant(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    if let Ok(d) = s.parse::<NaiveDate>() {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc());
    }
    s.parse::<DateTime<Utc>>()
        .map_err(|e| format!("'{s}': {e}"))
}

fn parse_span(s: &str) -> std::result::Result<(DateTime<Utc>, DateTime<Utc>), String> {
    let (a, b) = s
        .split_once('/')
        .ok_or_else(|| format!("'{s}' is not START/END"))?;
    Ok((parse_instant(a)?, parse_instant(b)?))
}

#[derive(Debug, Subcommand)]
pub enum AlCommand {
    /// Run one cycle.
    Run {
        #[arg(long, default_value_t = 2.0)]
        weight: f64,
        #[arg(long)]
        epochs: Option<usize>,
        /// Retrain from scratch instead of warm-starting.
        #[arg(long)]
        full: bool,
    },
    /// Show a stored cycle report.
    Report { cycle: usize },
    /// Threshold policy.
    Theta {
        #[command(subcommand)]
        command: ThetaCommand,
    },
    /// Query counts over the pool for several thresholds.
    Sweep {
        /// Comma-separated.
        #[arg(long)]
        thetas: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum ThetaCommand {
    Show,
    Set {
        theta: f64,
        /// Why the threshold changes; kept in the audit trail.
        #[arg(long, alias = "rationale")]
        why: String,
        #[arg(long, default_value = "operator")]
        actor: String,
    },
}

fn exit_code(e: &ServiceError) -> i32 {
    match e {
        ServiceError::Validation(_) | ServiceError::DataUnavailable(_) => 2,
        ServiceError::NoModel | ServiceError::Busy(_) | ServiceError::Conflict(_) => 3,
        ServiceError::NotFound(_) => 4,
        ServiceError::Internal(_) => 1,
    }
}

fn print<T: Serialize + CsvTable>(csv: bool, r: Result<T>) -> i32 {
    let mut out = std::io::stdout().lock();
    match r {
        Ok(v) if csv => {
            let _ = out.write_all(v.to_csv().as_bytes());
            0
        }
        Ok(v) => {
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string_pretty(&ApiEnvelope::ok(v)).expect("serializes")
            );
            0
        }
        Err(e) => {
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string_pretty(&ApiEnvelope::<()>::err(&e)).expect("serializes")
            );
            exit_code(&e)
        }
    }
}

/// Identity CSV for documents that have no table form.
struct Json<T>(T);

impl<T: Serialize> Serialize for Json<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<T: Serialize> CsvTable for Json<T> {
    fn to_csv(&self) -> String {
        format!("{}\n", serde_json::to_string(&self.0).expect("serializes"))
    }
}

fn progress() -> EpochHook {
    EpochHook::new(|r| {
        log::info!(
            "epoch {}: train {:.4} validation {:.4}",
            r.epoch,
            r.train_gnll,
            r.validation_gnll
        )
    })
}

pub fn run(cli: Cli) -> i32 {
    let opts = EngineOptions {
        execution: if cli.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        },
        seed_override: cli.seed_override,
    };
    let engine = match Engine::open(&cli.data_dir, Arc::new(SystemClock), opts) {
        Ok(e) => Arc::new(e),
        Err(e) => return print::<Json<()>>(false, Err(e)),
    };
    let csv = cli.csv;
    match cli.command {
        Command::Synth { days, start, seed } => {
            let mut cfg = SyntheticConfig {
                n_days: days,
                seed,
                ..Default::default()
            };
            if let Some(s) = start {
                cfg.start = s;
            }
            print(csv, engine.synth(cfg))
        }
        Command::Ingest { file, schema } => {
            let r = std::fs::read(&file)
                .map_err(|e| ServiceError::Validation(format!("{}: {e}", file.display())))
                .and_then(|bytes| engine.ingest(&bytes, &schema));
            print(csv, r)
        }
        Command::Dataset => print(csv, engine.dataset()),
        Command::Train { config } => {
            let req = match config {
                Some(path) => std::fs::read(&path)
                    .map_err(|e| ServiceError::Validation(format!("{}: {e}", path.display())))
                    .and_then(|b| {
                        serde_json::from_slice::<TrainRequest>(&b).map_err(|e| {
                            ServiceError::Validation(format!("{}: {e}", path.display()))
                        })
                    }),
                None => Ok(TrainRequest::default()),
            };
            print(csv, req.and_then(|r| engine.train(&r, Some(progress()))))
        }
        Command::Models { id: None } => print(csv, engine.models()),
        Command::Models { id: Some(id) } => print(csv, engine.model_info(&id)),
        Command::Forecast { date, level } => print(csv, engine.forecast(date, level)),
        Command::Flags { from, to } => print(csv, engine.uncertainty_flags(from, to)),
        Command::Metrics { model, span } => {
            let (start, end) = span.bounds();
            print(
                csv,
                engine.metrics(model.as_deref(), start, end, span.level),
            )
        }
        Command::Bench { models, span } => {
            let (start, end) = span.bounds();
            print(
                csv,
                engine.bench(&split_list(&models), start, end, span.level),
            )
        }
        Command::Compare { cycle, a, b, level } => {
            let r = match (cycle, a, b) {
                (Some(n), _, _) => engine.compare_cycle(n),
                (None, Some(a), Some(b)) => engine.compare_models(&a, &b, level),
                _ => Err(ServiceError::Validation(
                    "give either --cycle or both --a and --b".into(),
                )),
            };
            print(csv, r)
        }
        Command::Al { command } => match command {
            AlCommand::Run {
                weight,
                epochs,
                full,
            } => {
                let req = CycleRequest {
                    sample_weight: weight,
                    retrain_epochs: epochs,
                    full_retrain: full,
                };
                print(csv, engine.run_cycle(&req, Some(progress())))
            }
            AlCommand::Report { cycle } => print(csv, engine.cycle_report(cycle)),
            AlCommand::Theta {
                command: ThetaCommand::Show,
            } => print(csv, Ok(engine.threshold())),
            AlCommand::Theta {
                command: ThetaCommand::Set { theta, why, actor },
            } => print(csv, engine.set_threshold(theta, &why, &actor)),
            AlCommand::Sweep { thetas } => {
                print(csv, parse_thetas(&thetas).and_then(|t| engine.sweep(&t)))
            }
        },
        Command::FlagEvent {
            from,
            to,
            note,
            actor,
        } => print(csv, engine.flag_event(from, to, &note, &actor)),
        Command::Events => print(csv, Ok(engine.events())),
        Command::Serve { port, bind } => {
            let state = match AppState::new(engine) {
                Ok(s) => s,
                Err(e) => return print::<Json<()>>(false, Err(e)),
            };
            let rt = match tokio::runtime::Runtime::new() {
                Ok(rt) => rt,
                Err(e) => {
                    log::error!("runtime: {e}");
                    return 1;
                }
            };
            match rt.block_on(http::serve(state, SocketAddr::new(bind, port))) {
                Ok(()) => 0,
                Err(e) => {
                    log::error!("serve: {e}");
                    1
                }
            }
        }
    }
}
