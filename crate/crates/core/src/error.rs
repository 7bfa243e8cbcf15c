use thiserror::Error;

/// Errors raised by the solvers and simulators in this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("integration blew up at node {node} (t = {t})")]
    IntegrationBlowup { node: usize, t: f64 },

    #[error("Riccati solution escaped to infinity near t = {t}")]
    FiniteEscape { t: f64 },

    #[error("matrix is numerically singular at node {node} (reciprocal condition {rcond:e})")]
    Singular { node: usize, rcond: f64 },

    #[error("time {t} is not a node of the grid")]
    OffGrid { t: f64 },

    #[error("time {t} lies outside [{from}, {to}]")]
    OutOfDomain { t: f64, from: f64, to: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{name} is not positive definite ({reason})")]
    NotPositiveDefinite { name: String, reason: String },

    #[error("errors are not identifiable: stacked rank {rank} < required {required}")]
    NotIdentifiable { rank: usize, required: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("agent {agent} state became non-finite at node {node}")]
    AgentBlowup { agent: usize, node: usize },

    #[error("invalid argument: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;
