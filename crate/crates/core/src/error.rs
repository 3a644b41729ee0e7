use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("discretization produced non-finite entries (tau = {tau})")]
    Discretization { tau: f64 },

    #[error("no equilibrium for this reference (residual {residual:.3e})")]
    NoEquilibrium { residual: f64 },

    #[error("reference is not strictly admissible: row {row} has margin {margin:.6e} (needs <= {required:.6e})")]
    Inadmissible { row: usize, margin: f64, required: f64 },

    #[error("the strictly admissible reference set is empty")]
    EmptyReferenceSet,

    #[error("cost matrices violate convexity requirements: {0}")]
    Cost(String),

    #[error("terminal synthesis failed: {0}")]
    Synthesis(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("QP infeasible: {0}")]
    QpInfeasible(String),

    #[error("QP degenerate: {0}")]
    QpDegenerate(String),

    #[error("active-set cycle detected after {iterations} iterations (working set {working_set:?})")]
    QpCycle {
        iterations: usize,
        working_set: Vec<usize>,
    },

    #[error("QP solver did not converge: {0}")]
    QpNoConvergence(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
