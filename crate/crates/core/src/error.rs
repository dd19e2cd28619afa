use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A numeric argument lies outside the domain of a formula.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Backward pass requested with a cache produced by different parameters.
    #[error("stale forward cache (cache version {cache}, parameters version {params})")]
    StaleCache { cache: u64, params: u64 },

    #[error("invalid observation topology: {0}")]
    Topology(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config file not found: {0}")]
    ConfigMissing(PathBuf),

    #[error("config syntax error: {0}")]
    ConfigSyntax(String),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),
}

impl Error {
    /// Process exit status for the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigMissing(_) | Error::ConfigSyntax(_) | Error::ConfigInvalid(_) => 2,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
