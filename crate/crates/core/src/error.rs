use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time s = {0} is outside [0, 1]")]
    Domain(f64),

    #[error("singular schedule: {coefficient} is undefined at s = {s} ({reason})")]
    SingularSchedule {
        coefficient: &'static str,
        s: f64,
        reason: &'static str,
    },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate support: knots {0} and {1} coincide")]
    DegenerateSupport(f64, f64),

    #[error("knots must be sorted in increasing order (found {0} after {1})")]
    UnsortedKnots(f64, f64),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("sampler diverged at step {step} (s = {s})")]
    Diverged { step: usize, s: f64 },

    #[error("divergence strategy {strategy} is not available for this flow")]
    Strategy { strategy: &'static str },

    #[error("non-finite schedule-deviation integrand at s = {s}, x = {x:?}")]
    NonFinite { s: f64, x: Vec<f64> },

    #[error("CFL condition violated (courant number {courant:.3}); use at least {suggested_steps} time steps")]
    Instability { courant: f64, suggested_steps: usize },

    #[error("sample sets differ in size ({0} vs {1})")]
    SizeMismatch(usize, usize),

    #[error("sample set of size {size} exceeds the exact-assignment cap {cap}; subsample first")]
    TooLarge { size: usize, cap: usize },

    #[error("goal is unreachable from cell {0:?}")]
    Unreachable((usize, usize)),

    #[error("invalid maze: {0}")]
    InvalidMaze(String),

    #[error("training diverged at iteration {0}")]
    TrainingDiverged(usize),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("missing prerequisite: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
