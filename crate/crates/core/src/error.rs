use thiserror::Error;

use crate::model::Node;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("edge {from} -> {to} is not feasible under the block placement")]
    InfeasibleEdge { from: Node, to: Node },

    #[error("server {server} exceeds its memory: needs {needed} bytes, has {available}")]
    MemoryExceeded {
        server: String,
        needed: u64,
        available: u64,
    },

    #[error("capacity c={c} infeasible: no server can host a block while reserving {c} cache slots per block")]
    CapacityInfeasible { c: u64 },

    #[error("required total service rate {required:.6}/s unattainable; best achievable {best:.6}/s")]
    RateUnattainable { required: f64, best: f64 },

    #[error("unstable: arrival rate {lambda}/s >= total service rate {nu}/s")]
    Unstable { lambda: f64, nu: f64 },

    #[error("oracle refused: {0}")]
    OracleRefused(String),

    #[error("trace line {line}: {message}")]
    Trace { line: u64, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Infeasible,
    Unstable,
    Other,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::CapacityInfeasible { .. }
            | Error::RateUnattainable { .. }
            | Error::MemoryExceeded { .. }
            | Error::InfeasibleEdge { .. } => ErrorKind::Infeasible,
            Error::Unstable { .. } => ErrorKind::Unstable,
            _ => ErrorKind::Other,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
