use thiserror::Error;

/// Errors produced by model construction, exact solvers and estimators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mdp: {0}")]
    InvalidMdp(String),

    #[error("cell ({x}, {y}) lies outside the {width}x{height} grid")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("feedforward cycle among coagents {0:?}")]
    Cycle(Vec<usize>),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error(
        "singular system: states {states:?} form a closed class that never reaches a terminal state under discount 1"
    )]
    NonAbsorbing { states: Vec<usize> },

    #[error("singular linear system of size {0}")]
    Singular(usize),

    #[error("network has recurrent or asynchronous coagents; build the augmented reduction first")]
    NotSynchronous,

    #[error("enumeration size {size} exceeds the limit of {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("trajectory was sampled under different parameters (fingerprint {found:#x}, expected {expected:#x})")]
    OffPolicy { expected: u64, found: u64 },

    #[error("objective is not finite when perturbing coordinate {0}")]
    NonFinite(usize),

    #[error("gradient layout mismatch: {0}")]
    Layout(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Numeric failures (singular solves, size overflow) as opposed to invalid input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonAbsorbing { .. }
                | Error::Singular(_)
                | Error::TooLarge { .. }
                | Error::NonFinite(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
