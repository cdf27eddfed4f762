use thiserror::Error;

use crate::geometry::SpeedCase;

#[derive(Debug, Error)]
pub enum Error {
    #[error("speed sample {name}[{index}] = {value} is not strictly positive")]
    NonPositiveSpeed {
        name: &'static str,
        index: usize,
        value: f64,
    },

    #[error("diagonal coupling {name}[{index}] = {value}; only a = d = 0 is supported")]
    NonzeroDiagonalCoupling {
        name: &'static str,
        index: usize,
        value: f64,
    },

    #[error("lambda(w) - mu(-w) changes sign (min {min:.6e}, max {max:.6e}); no controller exists for this speed pair")]
    MixedSignSpeeds { min: f64, max: f64 },

    #[error("invalid resolution: {0}")]
    InvalidResolution(String),

    #[error("sample length mismatch: {0}")]
    LengthMismatch(String),

    #[error("point (z = {z}, w = {w}) lies outside the kernel triangle")]
    OutOfDomain { z: f64, w: f64 },

    #[error("value {0} is outside the range of the map")]
    OutOfRange(f64),

    #[error("map is not strictly monotone, cannot invert")]
    NotInvertible,

    #[error(
        "requested speed case {requested:?} disagrees with profile classification {classified:?}"
    )]
    CaseMismatch {
        requested: SpeedCase,
        classified: SpeedCase,
    },

    #[error("{stage} did not converge after {iterations} iterations (last increment {last_increment:.3e})")]
    NoConvergence {
        stage: &'static str,
        iterations: usize,
        last_increment: f64,
    },

    #[error("operation requires {expected}, kernels were solved for {found:?}")]
    WrongCase {
        expected: &'static str,
        found: SpeedCase,
    },

    #[error("time step {dt:.6e} violates the CFL bound {limit:.6e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("target system for {0:?} needs feedforward kernels")]
    MissingFeedforward(SpeedCase),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
