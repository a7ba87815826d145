use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDimension(Vec<usize>),
    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable belongs to a cleared or foreign tape")]
    StaleVar,
    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("parameter set mismatch: {0}")]
    ParamMismatch(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
