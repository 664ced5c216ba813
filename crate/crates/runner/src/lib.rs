//! Experiment orchestration: config parsing, the pretrain → intervene →
//! fine-tune → evaluate pipeline, probe sweeps, hyper-parameter grids and
//! report aggregation. The binary in `main.rs` is a thin CLI over this.

use std::fmt;

pub mod config;
pub mod experiment;
pub mod report;
pub mod sweep;

/// Runner-level failure. Exit code 1 for configuration or I/O problems,
/// 2 when the underlying failure is numerical (divergence, non-finite
/// gradients) — so batch scripts can tell a bad config from a blow-up.
#[derive(Debug)]
pub enum RunnerError {
    Config(String),
    Core(slowfast_core::Error),
    Io(std::io::Error),
}

impl RunnerError {
    pub fn config(msg: String) -> Self {
        RunnerError::Config(msg)
    }

    pub fn from_core(e: slowfast_core::Error) -> Self {
        RunnerError::Core(e)
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for RunnerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunnerError::Config(msg) => write!(f, "config error: {msg}"),
            RunnerError::Core(e) => write!(f, "{e}"),
            RunnerError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for RunnerError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            RunnerError::Core(e) => Some(e),
            RunnerError::Io(e) => Some(e),
            RunnerError::Config(_) => None,
        }
    }
}

impl From<slowfast_core::Error> for RunnerError {
    fn from(e: slowfast_core::Error) -> Self {
        RunnerError::Core(e)
    }
}

impl From<std::io::Error> for RunnerError {
    fn from(e: std::io::Error) -> Self {
        RunnerError::Io(e)
    }
}

impl From<serde_json::Error> for RunnerError {
    fn from(e: serde_json::Error) -> Self {
        RunnerError::Config(format!("json: {e}"))
    }
}

pub type Result<T, E = RunnerError> = std::result::Result<T, E>;
