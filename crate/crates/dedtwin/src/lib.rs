//! Digital-twin toolkit for thin-wall laser directed energy deposition.
//!
//! The pipeline runs in five stages, each usable on its own:
//!
//! 1. [`profile`] renders parametric laser-power schedules from a ten-value
//!    description (modified Fourier series plus trend and seasonality).
//! 2. [`sampling`] builds randomized profile libraries (Latin hypercube over
//!    summary statistics, random-walk roughness, Butterworth smoothing).
//! 3. [`thermal`] simulates the build with an explicit finite-difference
//!    model and records per-node thermal histories.
//! 4. [`surrogate`] trains a Bayesian LSTM (Monte Carlo dropout) on those
//!    histories and predicts temperature with uncertainty bands.
//! 5. [`gp`] + [`botspo`] close the loop: Gaussian-process regression over
//!    profile parameters and a UCB search for the profile that maximizes
//!    time spent in a target temperature band.
//!
//! Everything is deterministic under a fixed seed: all randomness flows
//! through explicitly seeded ChaCha streams, and data files are written with
//! fixed formatting.

use std::error;
use std::fmt;

pub mod botspo;
pub mod butterworth;
pub mod gp;
pub mod profile;
pub mod sampling;
pub mod surrogate;
pub mod thermal;

/// Crate-wide error type. Variants follow the failure taxonomy used across
/// the pipeline; the CLI maps them onto exit codes.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A caller-supplied value is non-finite or outside its documented range.
    Param(String),
    /// Input is structurally valid but degenerate (zero variance, empty set).
    Degenerate(String),
    /// Dimension or length mismatch between related arguments.
    Shape(String),
    /// Operation called out of order (e.g. predict before fit).
    State(String),
    /// Inconsistent configuration (stability violation, bad bounds).
    Config(String),
    /// Numerical conditioning failure that jitter escalation could not fix.
    Conditioning(String),
    /// Training produced non-finite loss or gradients.
    Diverged(String),
    /// Malformed serialized artifact.
    Parse(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Param(m) => write!(f, "invalid parameter: {m}"),
            Error::Degenerate(m) => write!(f, "degenerate input: {m}"),
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::State(m) => write!(f, "invalid call order: {m}"),
            Error::Config(m) => write!(f, "invalid configuration: {m}"),
            Error::Conditioning(m) => write!(f, "conditioning failure: {m}"),
            Error::Diverged(m) => write!(f, "training diverged: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
        }
    }
}

impl error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;

/// Derives decorrelated sub-seeds (per MC sample, per batch, per BO round)
/// from one base seed.
pub(crate) fn mix_seed(base: u64, k: u64) -> u64 {
    base ^ (k.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Checks one scalar argument for finiteness; used by validators throughout.
pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Param(format!("{name} must be finite, got {value}")))
    }
}
