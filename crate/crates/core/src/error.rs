use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("feature bank is empty")]
    EmptyBank,
    #[error("mask ratio {ratio} masks {masked} of {patches} patches")]
    DegenerateMask {
        ratio: f64,
        masked: usize,
        patches: usize,
    },
    #[error("schema mismatch at parameter `{0}`")]
    Schema(String),
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("client {client} failed in round {round}: {source}")]
    Client {
        client: u32,
        round: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
