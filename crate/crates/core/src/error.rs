use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid has zero size")]
    EmptyGrid,
    #[error("grid value count {values} does not match {width}x{height}")]
    BadGridLength {
        width: usize,
        height: usize,
        values: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("factor {factor} does not divide {size}")]
    NotDivisible { factor: usize, size: usize },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("mask or region is empty")]
    EmptyMask,
    #[error("zero total mass")]
    ZeroMass,
    #[error("no activation map for token `{0}`")]
    MissingToken(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("scribble set is empty")]
    EmptyScribbleSet,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("invalid timestep {0}")]
    Timestep(usize),
    #[error("numerical abort at inference step {step} (t={t}): {reason}")]
    Numerical {
        step: usize,
        t: usize,
        reason: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
