use std::io;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller supplied an invalid argument: out-of-range label, bad shape, bad hyper-parameter.
    #[error("invalid input: {0}")]
    Input(String),
    /// The object is not in a state where the request can be answered.
    #[error("invalid state: {0}")]
    State(String),
    /// A computation produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A binary file or config document could not be decoded.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}

macro_rules! ensure_input {
    ($cond:expr, $($arg:tt)*) => {
        if $cond {
        } else {
            return Err($crate::error::Error::Input(format!($($arg)*)));
        }
    };
}

pub(crate) use ensure_input;
pub(crate) use input_err;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Input(format!("{what}[{i}] is not finite"))),
        None => Ok(()),
    }
}
