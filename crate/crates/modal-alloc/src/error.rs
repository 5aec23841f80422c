//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix has (nearly) repeated eigenvalues: separation {separation:.3e} below {limit:.3e}")]
    RepeatedEigenvalue { separation: f64, limit: f64 },

    #[error("modal transformation is numerically singular: condition number {cond:.3e}")]
    SingularTransform { cond: f64 },

    #[error("state became non-finite during integration")]
    NonFiniteState,

    #[error("invalid damping target: {0}")]
    InvalidTarget(String),

    #[error("matrix is not Hurwitz: eigenvalue real part {max_real:.3e} >= 0")]
    NotHurwitz { max_real: f64 },

    #[error("requested order {requested} out of range (limit {limit})")]
    OrderTooLarge { requested: usize, limit: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("QP solver failed: {0}")]
    SolverFailure(String),

    #[error("effectiveness matrix is rank deficient: rank {rank} < {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("QP reached max_iter = {iterations} with projected gradient {kkt_residual:.3e}")]
    MaxIterations {
        iterations: usize,
        kkt_residual: f64,
        best_point: Vec<f64>,
        best_objective: f64,
    },

    #[error("negative curvature {curvature:.3e} detected: problem is not convex")]
    NonConvex { curvature: f64 },

    #[error("exact QP oracle limited to dimension 8, got {0}")]
    DimensionTooLarge(usize),

    #[error("prediction matrix ill-conditioned: condition number {cond:.3e}")]
    IllConditioned { cond: f64 },

    #[error("no fitted mode within {tolerance_hz} Hz of {target_hz} Hz")]
    NoMatchingMode { target_hz: f64, tolerance_hz: f64 },

    #[error("closed loop diverged at t = {time:.3} s")]
    Unstable { time: f64 },

    #[error("need more than {required} actuators for {modes} modes, got {actual}")]
    InsufficientRedundancy {
        required: usize,
        actual: usize,
        modes: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
