use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point lies outside the simplex: components sum to {sum}")]
    OutOfSimplex { sum: f64 },

    #[error("no party reaches the {threshold} threshold")]
    NoEligibleParty { threshold: f64 },

    #[error("invalid stratum: {0}")]
    InvalidStratum(String),

    #[error("province {province} has no census weight")]
    MissingCensus { province: u32 },

    #[error("sampler configuration: {0}")]
    Config(String),

    #[error("log density is not finite at the initial point (chain {chain})")]
    Init { chain: usize },

    #[error("convergence diagnostic needs at least {needed} chains, got {got}")]
    InsufficientChains { needed: usize, got: usize },

    #[error("design matrix is rank deficient; dependent columns: {columns:?}")]
    SingularDesign { columns: Vec<String> },

    #[error("unknown {kind} `{id}`")]
    Lookup { kind: &'static str, id: String },

    #[error("covariance needs repair beyond jitter {jitter:e}: {detail}")]
    Misconfigured { jitter: f64, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("undefined prior weight for `{party}`: prior variance is zero")]
    UndefinedWeight { party: String },

    #[error("alignment mismatch: {0}")]
    Alignment(String),

    #[error("{path}:{line}: {message}")]
    Row {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {invalid} of {total} rows invalid, first: {first}")]
    TooManyInvalidRows {
        path: PathBuf,
        invalid: usize,
        total: usize,
        first: String,
    },

    #[error("missing artifact `{0}`; run the stage that produces it first")]
    MissingArtifact(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("diagnostic failure: {0}")]
    Diagnostic(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the user's input files or configuration.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::OutOfSimplex { .. }
                | Error::InvalidStratum(_)
                | Error::MissingCensus { .. }
                | Error::Config(_)
                | Error::Lookup { .. }
                | Error::Alignment(_)
                | Error::Row { .. }
                | Error::TooManyInvalidRows { .. }
                | Error::MissingArtifact(_)
                | Error::Io { .. }
                | Error::Csv { .. }
                | Error::Parse { .. }
        )
    }

    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            2
        } else if matches!(self, Error::Diagnostic(_)) {
            3
        } else {
            1
        }
    }
}
