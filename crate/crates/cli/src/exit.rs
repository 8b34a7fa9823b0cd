//! Process exit codes. The numbering is stable; scripts may rely on it.

use std::fmt;

use voidface_core::distribution::DistributionError;
use voidface_core::orchestrator::{OrchestrationError, TrainerError};
use voidface_core::patch::PipelineError;
use voidface_core::share_file::FormatError;
use voidface_core::simnet::SimError;
use voidface_core::vault::VaultError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Exit {
    Ok = 0,
    Internal = 1,
    Usage = 2,
    Config = 3,
    Io = 4,
    IncompleteLandmarks = 5,
    InvalidInput = 6,
    Conflict = 7,
    NotFound = 8,
    Unauthorized = 9,
    NoData = 10,
    Unreachable = 11,
    RoundFailed = 12,
}

impl Exit {
    pub const ALL: [Exit; 13] = [
        Exit::Ok,
        Exit::Internal,
        Exit::Usage,
        Exit::Config,
        Exit::Io,
        Exit::IncompleteLandmarks,
        Exit::InvalidInput,
        Exit::Conflict,
        Exit::NotFound,
        Exit::Unauthorized,
        Exit::NoData,
        Exit::Unreachable,
        Exit::RoundFailed,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Exit::Ok => "ok",
            Exit::Internal => "internal",
            Exit::Usage => "usage",
            Exit::Config => "config",
            Exit::Io => "io",
            Exit::IncompleteLandmarks => "incomplete_landmarks",
            Exit::InvalidInput => "invalid_input",
            Exit::Conflict => "conflict",
            Exit::NotFound => "not_found",
            Exit::Unauthorized => "unauthorized",
            Exit::NoData => "no_data",
            Exit::Unreachable => "unreachable",
            Exit::RoundFailed => "round_failed",
        }
    }

    pub fn meaning(self) -> &'static str {
        match self {
            Exit::Ok => "success",
            Exit::Internal => "unexpected internal failure",
            Exit::Usage => "invalid command line",
            Exit::Config => "invalid configuration, paths or scenario",
            Exit::Io => "filesystem error",
            Exit::IncompleteLandmarks => "a facial region has no landmark box",
            Exit::InvalidInput => "undecodable image, bad landmarks or corrupt share file",
            Exit::Conflict => "subject already registered",
            Exit::NotFound => "unknown or revoked subject, or missing share files",
            Exit::Unauthorized => "requester unknown or not on the allow-list",
            Exit::NoData => "no authorized subject left to train on",
            Exit::Unreachable => "an institution is offline",
            Exit::RoundFailed => "training round could not complete",
        }
    }
}

/// Help text listing every exit code.
pub fn table() -> String {
    let mut s = String::from("Exit codes:\n");
    for e in Exit::ALL {
        s.push_str(&format!(
            "  {:>2}  {:<21} {}\n",
            e.code(),
            e.name(),
            e.meaning()
        ));
    }
    s
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
    /// Partial report still worth printing.
    pub report: Option<serde_json::Value>,
}

impl CliError {
    pub fn new(exit: Exit, message: impl Into<String>) -> Self {
        CliError {
            exit,
            message: message.into(),
            report: None,
        }
    }

    pub fn with_report(mut self, report: serde_json::Value) -> Self {
        self.report = Some(report);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(Exit::Io, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new(Exit::InvalidInput, e.to_string())
    }
}

impl From<VaultError> for CliError {
    fn from(e: VaultError) -> Self {
        let exit = match &e {
            VaultError::Conflict(_) => Exit::Conflict,
            VaultError::NotFound(_) => Exit::NotFound,
            VaultError::UnknownRequester(_) | VaultError::Unauthorized(_) => Exit::Unauthorized,
            VaultError::NoData { .. } => Exit::NoData,
            VaultError::Io(_) => Exit::Io,
            _ => Exit::InvalidInput,
        };
        CliError::new(exit, e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let exit = match &e {
            PipelineError::IncompleteLandmarks(_) => Exit::IncompleteLandmarks,
            PipelineError::Io(_) => Exit::Io,
            _ => Exit::InvalidInput,
        };
        CliError::new(exit, e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        let exit = match &e {
            FormatError::Io(_) => Exit::Io,
            _ => Exit::InvalidInput,
        };
        CliError::new(exit, e.to_string())
    }
}

impl From<DistributionError> for CliError {
    fn from(e: DistributionError) -> Self {
        CliError::new(Exit::InvalidInput, e.to_string())
    }
}

impl From<OrchestrationError> for CliError {
    fn from(e: OrchestrationError) -> Self {
        let exit = match &e {
            OrchestrationError::NoData => Exit::NoData,
            OrchestrationError::Config(_) | OrchestrationError::InvalidProfile(_) => Exit::Config,
            _ => Exit::RoundFailed,
        };
        CliError::new(exit, e.to_string())
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        CliError::new(Exit::RoundFailed, e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let exit = match &e {
            SimError::Io(_) => Exit::Io,
            _ => Exit::Config,
        };
        CliError::new(exit, e.to_string())
    }
}
