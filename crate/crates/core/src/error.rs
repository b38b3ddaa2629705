//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an argument outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// The model itself violates a structural requirement (missing or
    /// degenerate unit eigenvalue, failed spectral solve, ...).
    #[error("model error: {0}")]
    Model(String),

    #[error("impossible observation: token {token} has probability {probability:e} from this state")]
    ImpossibleObservation { token: usize, probability: f64 },

    #[error("representation error: {0}")]
    Representation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}
pub(crate) use input_err;
