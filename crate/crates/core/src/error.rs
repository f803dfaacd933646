use std::io;
use std::time::Duration;

use crate::transport::MessageKind;

/// Errors produced anywhere in the training stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("value {value} is outside the fixed-point range ±{bound}")]
    Range { value: f64, bound: f64 },

    #[error("invalid fixed-point configuration: {0}")]
    FxConfig(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("beaver triple #{id} was already consumed")]
    TripleReuse { id: u64 },

    #[error("triple provider exhausted: {0}")]
    Exhausted(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("session aborted by {role}: {reason}")]
    Aborted { role: String, reason: String },

    #[error("timed out after {after:?} waiting on {peer} for {waiting_for}")]
    Timeout {
        after: Duration,
        peer: String,
        waiting_for: String,
    },

    #[error("config digest mismatch with {peer}: ours {ours}, theirs {theirs}")]
    DigestMismatch {
        peer: String,
        ours: String,
        theirs: String,
    },

    #[error("unexpected message from {peer}: expected {expected:?}, got {got:?}")]
    UnexpectedKind {
        peer: String,
        expected: MessageKind,
        got: MessageKind,
    },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for the two outcomes a peer is allowed to observe when another
    /// role dies: an explicit abort or a receive timeout.
    pub fn is_abort_or_timeout(&self) -> bool {
        matches!(self, Error::Aborted { .. } | Error::Timeout { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
