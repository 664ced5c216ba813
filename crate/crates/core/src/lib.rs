//! Training-dynamics toolkit for studying *where* and *when* a small
//! transformer should learn during fine-tuning.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`tape`]: a dense f64 tensor and a Wengert-tape
//!   reverse-mode autodiff engine with the handful of ops a pre-LN
//!   transformer needs (GEMM, layer norm, gelu, softmax, a fused
//!   multi-head attention, embedding gather, cross-entropy).
//! - [`optim`]: Adam with warmup and a per-parameter-group multiplier hook;
//!   the multiplier is where learning-rate policies plug in.
//! - [`model`]: a micro transformer encoder whose parameters carry
//!   [`model::ParamTag`]s (layer index + sublayer) so interventions and
//!   schedules can address layers symbolically.
//! - [`schedule`]: loss-window phase detection and the four phase- and
//!   layer-dependent learning-rate policies, expressed as multipliers.
//! - [`probe`]: freeze/re-init interventions, linear CKA drift tracking and
//!   performance-gap bookkeeping.
//! - [`bench`]: a synthetic multilingual benchmark (permuted-vocabulary
//!   languages over a shared grammar) small enough to train on one CPU.
//! - [`train`]: the fine-tuning loop that wires scheduler, optimizer and
//!   model together with a fixed observe-then-step ordering.
//!
//! Everything is deterministic given seeds: data generation, init, batch
//! order and masking all run on counter-seeded ChaCha8 streams, and the
//! numerics are single-threaded f64, so repeated runs are bit-identical.

pub mod bench;
pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod probe;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;

use thiserror::Error;

/// Crate-wide error type. Variants are grouped by the stage that raises
/// them; `NonFinite*` variants indicate numerical failure (a divergence),
/// everything else is a usage or configuration error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite gradient for parameter `{tag}` at step {step}")]
    NonFiniteGrad { tag: String, step: u64 },

    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: u64 },

    #[error("unknown parameter tag `{0}`")]
    UnknownTag(String),

    #[error("degenerate activations: {0}")]
    DegenerateActivations(String),

    #[error("not enough history: {0}")]
    InsufficientHistory(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of the numerics (divergence, non-finite values)
    /// as opposed to bad configuration or I/O. The CLI maps these to a
    /// distinct exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonFiniteGrad { .. }
                | Error::Diverged { .. }
                | Error::DegenerateActivations(..)
        )
    }
}
