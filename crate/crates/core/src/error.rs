use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A full-tensor materialization would exceed the element cap.
    #[error("capacity exceeded: {requested} elements requested, cap is {cap}")]
    Capacity { requested: u128, cap: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("svd failed to converge")]
    NoConvergence,

    #[error("perturbation outside validity radius: {0}")]
    OutsideValidity(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::Invalid(format!($($arg)*)) };
}

pub(crate) use invalid;
pub(crate) use shape_err;
