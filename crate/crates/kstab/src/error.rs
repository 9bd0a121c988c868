//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("polytope is unbounded: facet normals do not positively span the space")]
    Unbounded,

    #[error("origin is not strictly interior to the polytope")]
    OriginNotInterior,

    #[error("polytope is not reflexive: vertex {0} is not a lattice point")]
    NonReflexive(String),

    #[error("metric is not discretely convex: det D\u{00b2}\u{03c6} \u{2264} 0 at node {node}")]
    NonConvex { node: usize },

    #[error("computational box too small: {0}")]
    DomainTooSmall(String),

    #[error("density is not normalized: integral = {0}")]
    NotNormalized(f64),

    #[error("flow step failed after {halvings} step halvings at t = {t}")]
    StepFailed { t: f64, halvings: u32 },

    #[error("too few samples in the tail window: {got} < {need}")]
    TooFewSamples { got: usize, need: usize },

    #[error("ray direction not resolved: Cauchy diagnostic {diag} exceeds {threshold}")]
    NotCauchy { diag: f64, threshold: f64 },

    #[error("ordering violated: expected u \u{2265} v \u{2265} w pointwise (max defect {0})")]
    OrderViolated(f64),

    #[error("k = {k} is not compatible with the piece offsets (k\u{00b7}b_j must be integral)")]
    DenominatorMismatch { k: i64 },

    #[error("trivial configuration: L\u{00b2} norm {0} below threshold")]
    TrivialConfiguration(f64),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("linear solver did not converge ({0} iterations)")]
    SolverStalled(usize),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
