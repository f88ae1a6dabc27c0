use thiserror::Error;

use crate::notation::NotationError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Notation(#[from] NotationError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric: {0}")]
    NotSymmetric(String),
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("RAM is rank deficient: {0}")]
    RankDeficient(String),
    #[error("invalid spatial domain: {0}")]
    Domain(String),
    #[error("point {sample} at ({x}, {y}) lies outside the mesh")]
    OutsideMesh { sample: usize, x: f64, y: f64 },
    #[error("invalid formula: {0}")]
    Formula(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(e.to_string())
    }
}
