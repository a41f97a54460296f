use thiserror::Error;

/// Errors raised by the balancing engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BalanceError {
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("non-binary entry {value} in {what}[{index}]")]
    NonBinaryEntry {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("utility must be positive and finite, got {0}")]
    NonPositiveUtility(f64),

    #[error("invalid balance spec: {0}")]
    InvalidSpec(String),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    #[error("empty stream")]
    EmptyStream,

    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("top-q subsampling needs a finite stream")]
    InfiniteStreamTopQ,

    #[error("degenerate group: attribute {attr} has no mass on side s={side}")]
    DegenerateGroup { attr: usize, side: u8 },

    #[error("instance too large for the exact solver: n = {n} (limit {limit})")]
    InstanceTooLarge { n: usize, limit: usize },

    #[error("exact solver did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("infeasible correlation {rho} for pair (attr {attr}, label {label}); admissible range [{lo}, {hi}]")]
    InfeasibleCorrelation {
        attr: usize,
        label: usize,
        rho: f64,
        lo: f64,
        hi: f64,
    },

    #[error("cannot read input: {0}")]
    UnreadableSource(String),

    #[error("malformed record on line {line}: {reason}")]
    MalformedLine { line: u64, reason: String },

    #[error("invalid stream spec: {0}")]
    InvalidStreamSpec(String),
}

pub type Result<T> = std::result::Result<T, BalanceError>;
