use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for extent {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{op}: reduction axis is empty")]
    EmptyAxis { op: &'static str },

    #[error("invalid state: {0}")]
    State(String),

    #[error("operation `{op}` is not supported by the {arch} architecture")]
    UnsupportedArchitecture { op: &'static str, arch: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown {family} `{name}` (available: {})", available.join(", "))]
    UnknownStrategy {
        family: &'static str,
        name: String,
        available: Vec<&'static str>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}
