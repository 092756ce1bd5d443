use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: data length {len} does not match shape {shape:?}")]
    DataLength {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },

    #[error("{op}: normalization axis is empty")]
    EmptyAxis { op: &'static str },

    #[error("degenerate kernel: denominator is zero at token {t}")]
    DegenerateKernel { t: usize },

    #[error("index {index} out of range 1..={len}")]
    Index { index: usize, len: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("resolution {height}x{width} is not divisible by {divisor}")]
    Resolution {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("cannot merge odd grid {height}x{width}")]
    Merge { height: usize, width: usize },

    #[error("cannot sample {n_out} tokens from {n_src}")]
    Sampling { n_src: usize, n_out: usize },

    #[error("hidden state bridge route {route}: {reason}")]
    Route { route: String, reason: String },

    #[error("token count {tokens} does not match grid {height}x{width}")]
    Grid {
        tokens: usize,
        height: usize,
        width: usize,
    },

    #[error("kernel truncation radius {radius} too small for rate {rate} (need >= {required})")]
    Truncation {
        radius: usize,
        rate: f64,
        required: usize,
    },

    #[error("tolerance {epsilon} is below the kernel's truncated floor")]
    Tolerance { epsilon: f64 },

    #[error("function evaluation returned a non-finite value")]
    NonFinite,

    #[error("degenerate kernel: {0}")]
    Degenerate(String),

    #[error("degenerate fit: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
