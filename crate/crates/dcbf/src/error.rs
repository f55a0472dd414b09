use thiserror::Error;

/// Errors surfaced by factories, samplers and experiment drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("{0}")]
    InvalidInput(String),

    #[error("degenerate 2-coin input: both weights are zero")]
    DegenerateInput,

    #[error("work cap of {cap} loop/flip events exceeded at node {node}")]
    LoopCapExceeded { cap: u64, node: u64 },

    #[error("path value {value} at t={t} violates declared bounds [{lower}, {upper}]")]
    BoundViolation {
        t: f64,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("rejection cap of {cap} proposals exceeded in {context}")]
    RejectionCapExceeded { cap: u64, context: &'static str },

    #[error("cost ledger holds no completed factory invocations")]
    EmptyLedger,

    #[error("autocorrelation undefined: trace is constant")]
    ConstantTrace,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
