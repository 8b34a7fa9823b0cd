mod commands;
mod config;
mod exit;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use voidface_core::orchestrator::TrainerKind;
use voidface_core::SubjectId;

use crate::commands::{Outcome, TrainOptions};
use crate::config::{CliConfig, Format, GlobalArgs};
use crate::exit::{CliError, Exit};

#[derive(Parser, Debug)]
#[command(name = "voidface", version, about = "Face patch secret sharing, distribution and training", after_help = exit::table())]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract patches from a face image, share them and register the subject.
    #[command(after_help = exit::table())]
    Prepare {
        #[arg(long)]
        image: PathBuf,
        /// JSON object mapping each region to {x, y, w, h}.
        #[arg(long)]
        landmarks: PathBuf,
        /// Subject UUID; a fresh one is drawn when omitted.
        #[arg(long)]
        subject: Option<SubjectId>,
        /// Requester allowed to train on this subject. Repeatable.
        #[arg(long)]
        allow: Vec<String>,
    },
    /// Place a subject's staged private shares at the institutions.
    #[command(after_help = exit::table())]
    Distribute {
        #[arg(long)]
        subject: SubjectId,
    },
    /// Run one training round over the authorized subjects.
    #[command(after_help = exit::table())]
    Train {
        #[arg(long)]
        requester: String,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        subjects: Vec<SubjectId>,
        #[arg(long, value_enum, default_value = "stub")]
        trainer: TrainerArg,
        /// host:port of the external trainer.
        #[arg(long)]
        trainer_addr: Option<String>,
        /// Writes the embeddings as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Revoke a subject and erase its authentication share.
    #[command(after_help = exit::table())]
    Rtbf {
        #[arg(long)]
        subject: SubjectId,
    },
    /// Delete abandoned private shares at reachable institutions.
    #[command(after_help = exit::table())]
    Gc,
    /// Share quality statistics.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Run a network scenario in the discrete-event simulator.
    #[command(after_help = exit::table())]
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Writes the message trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Checks whether any single tapped link leaks a patch.
        #[arg(long)]
        audit: bool,
    },
}

#[derive(Subcommand, Debug)]
enum MetricsCommand {
    /// Pairwise NPCR between shares of the same kind.
    Npcr {
        /// Directory of share files; a synthetic campaign runs when omitted.
        #[arg(long)]
        shares: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Per-channel Shannon entropy.
    Entropy {
        #[arg(long)]
        shares: PathBuf,
    },
    /// Adjacent-pixel correlation.
    Corr {
        #[arg(long)]
        shares: PathBuf,
    },
    /// Probability of guessing a whole share.
    Bruteforce {
        #[arg(long, default_value_t = 96)]
        width: u32,
        #[arg(long, default_value_t = 96)]
        height: u32,
        #[arg(long, default_value_t = 3)]
        channels: u32,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum TrainerArg {
    Stub,
    External,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Prepare { .. } => "prepare",
            Command::Distribute { .. } => "distribute",
            Command::Train { .. } => "train",
            Command::Rtbf { .. } => "rtbf",
            Command::Gc => "gc",
            Command::Metrics(MetricsCommand::Npcr { .. }) => "metrics npcr",
            Command::Metrics(MetricsCommand::Entropy { .. }) => "metrics entropy",
            Command::Metrics(MetricsCommand::Corr { .. }) => "metrics corr",
            Command::Metrics(MetricsCommand::Bruteforce { .. }) => "metrics bruteforce",
            Command::Simulate { .. } => "simulate",
        }
    }
}

fn run(cfg: &CliConfig, command: Command) -> Result<Outcome, CliError> {
    match command {
        Command::Prepare {
            image,
            landmarks,
            subject,
            allow,
        } => commands::prepare(cfg, &image, &landmarks, subject, &allow),
        Command::Distribute { subject } => commands::distribute(cfg, subject),
        Command::Train {
            requester,
            subjects,
            trainer,
            trainer_addr,
            out,
        } => {
            let trainer = match trainer {
                TrainerArg::Stub => TrainerKind::Stub,
                TrainerArg::External => TrainerKind::External,
            };
            commands::train(
                cfg,
                &TrainOptions {
                    requester,
                    subjects,
                    trainer,
                    trainer_addr,
                    out,
                },
            )
        }
        Command::Rtbf { subject } => commands::rtbf(cfg, subject),
        Command::Gc => commands::gc(cfg),
        Command::Metrics(m) => match m {
            MetricsCommand::Npcr { shares, trials } => {
                commands::metrics_npcr(cfg, shares.as_deref(), trials)
            }
            MetricsCommand::Entropy { shares } => commands::metrics_entropy(&shares),
            MetricsCommand::Corr { shares } => commands::metrics_corr(&shares),
            MetricsCommand::Bruteforce {
                width,
                height,
                channels,
            } => commands::metrics_bruteforce(width, height, channels),
        },
        Command::Simulate {
            scenario,
            trace,
            audit,
        } => commands::simulate(cfg, &scenario, trace.as_deref(), audit),
    }
}

fn emit(format: Format, command: &str, seed: Option<u64>, result: &Result<Outcome, CliError>) {
    let seed = result.as_ref().ok().and_then(|o| o.seed).or(seed);
    match format {
        Format::Json => {
            let body = match result {
                Ok(o) => json!({
                    "command": command, "seed": seed, "ok": true, "exit_code": 0, "report": o.report,
                }),
                Err(e) => json!({
                    "command": command,
                    "seed": seed,
                    "ok": false,
                    "exit_code": e.exit.code(),
                    "exit_name": e.exit.name(),
                    "error": e.message,
                    "report": e.report.clone().unwrap_or(Value::Null),
                }),
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&body).expect("json values serialize")
            );
        }
        Format::Text => {
            let seed = seed.map_or_else(|| "os entropy".to_string(), |s| s.to_string());
            println!("voidface {command} (seed: {seed})");
            match result {
                Ok(o) => o.lines.iter().for_each(|l| println!("{l}")),
                Err(e) => {
                    if let Some(r) = &e.report {
                        println!(
                            "{}",
                            serde_json::to_string_pretty(r).expect("json values serialize")
                        );
                    }
                    eprintln!("error ({}): {}", e.exit.name(), e.message);
                }
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                Exit::Usage.code()
            } else {
                Exit::Ok.code()
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = cli.command.name();
    let cfg = match CliConfig::resolve(&cli.global) {
        Ok(c) => c,
        Err(e) => {
            let format = if cli.global.json {
                Format::Json
            } else {
                cli.global.format.unwrap_or_default()
            };
            emit(format, name, cli.global.seed, &Err(e));
            return ExitCode::from(Exit::Config.code());
        }
    };
    let result = run(&cfg, cli.command);
    emit(cfg.format, name, cfg.seed, &result);
    ExitCode::from(result.err().map_or(Exit::Ok, |e| e.exit).code())
}
