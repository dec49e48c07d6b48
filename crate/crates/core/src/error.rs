use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("stale activation cache (cache version {cache}, params version {params})")]
    StaleCache { cache: u64, params: u64 },

    #[error("robot {0} is offline")]
    Offline(usize),

    #[error("link {from}->{to} is down")]
    Unreachable { from: usize, to: usize },

    #[error("auction failed: no robot responded within the bid window")]
    AuctionFailed,

    #[error("roster is full ({0} slots)")]
    RosterFull(usize),

    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status used by the command line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact(_) => 3,
            _ => 4,
        }
    }
}
