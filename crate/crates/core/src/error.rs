use std::fmt;

/// Crate-wide error type.
///
/// `Input` covers anything wrong with user-supplied files or geometry,
/// `Numerical` covers solver and integration breakdowns; the CLI maps the
/// two groups to distinct exit codes.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Longitudinal velocity at or below the configured floor; the slip
    /// angles divide by `vx`.
    DegenerateVelocity { vx: f64, floor: f64 },
    /// Malformed or inconsistent input data (files, waypoints, configs).
    Input(String),
    /// Numerical failure (factorization breakdown, non-finite state, ...).
    Numerical(String),
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DegenerateVelocity { vx, floor } => {
                write!(f, "degenerate longitudinal velocity {vx} (floor {floor})")
            }
            Error::Input(msg) => write!(f, "invalid input: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for errors caused by bad input data rather than numerics.
    pub fn is_input(&self) -> bool {
        matches!(self, Error::Input(_) | Error::Io(_))
    }
}
