use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {point:?} lies outside the admissible region: {reason}")]
    Domain { point: Vec<f64>, reason: String },

    #[error("singular Jacobian (|det| = {det:e}) at {point:?}; epsilon is not admissible")]
    SingularJacobian { point: Vec<f64>, det: f64 },

    #[error("no admissible epsilon: gamma drops below {floor} even at epsilon = {smallest:e}")]
    NoAdmissibleEpsilon { floor: f64, smallest: f64 },

    #[error("point {point:?} is {distance:e} outside the mesh hull (limit {limit:e})")]
    Extrapolation { point: Vec<f64>, distance: f64, limit: f64 },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("sample {seed}: {source}")]
    Sample {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(expected: impl std::fmt::Display, found: impl std::fmt::Display) -> Self {
        Error::ShapeMismatch { expected: expected.to_string(), found: found.to_string() }
    }
}
