use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not Hermitian (relative asymmetry {0:.3e})")]
    NotHermitian(f64),

    #[error("matrix is not positive definite after ridge repair: {0}")]
    Indefinite(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid pilot plan: {0}")]
    Pilot(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bisection failed: {0}")]
    Bisection(String),

    #[error("drop {seed}: {source}")]
    Drop {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
