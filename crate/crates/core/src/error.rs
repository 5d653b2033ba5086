use thiserror::Error;

/// Errors surfaced by the solver and data layers.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("index out of range in {op}: {detail}")]
    IndexOutOfRange { op: &'static str, detail: String },

    #[error("non-finite value encountered in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    #[error("auxiliary state violates the cone constraints beyond tolerance: {0}")]
    InfeasibleAux(String),

    #[error("level-set safeguard violated at inner-solver exit: L_rho = {l_value} >= theta = {theta}")]
    ThetaViolated { l_value: f64, theta: f64 },

    #[error("insufficient feasibility history: need {needed} entries, have {have}")]
    ShortHistory { needed: usize, have: usize },

    #[error("invalid configuration: field `{field}`: {detail}")]
    InvalidConfig { field: &'static str, detail: String },

    #[error("{format} parse error at byte {offset}: {detail}")]
    Parse {
        format: &'static str,
        offset: u64,
        detail: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("empty problem set")]
    EmptyProblemSet,
}

pub type Result<T> = std::result::Result<T, CoreError>;
