use thiserror::Error;

/// Errors produced by the simulator and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid bit-width {0}: must be in 1..=8")]
    InvalidBitWidth(u8),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt codebook ROM: {0}")]
    CorruptRom(String),

    #[error("corrupt cache record: {0}")]
    CorruptCache(String),

    #[error("calibration set has no rows with positive norm")]
    EmptyCalibration,

    #[error("configuration conflict: {0}")]
    ConfigConflict(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_pow2(d: usize, what: &str) -> Result<()> {
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::InvalidDimension(format!(
            "{what} length {d} is not a power of two"
        )));
    }
    Ok(())
}

pub(crate) fn check_bits(bits: u8) -> Result<()> {
    if !(1..=8).contains(&bits) {
        return Err(Error::InvalidBitWidth(bits));
    }
    Ok(())
}

pub(crate) fn check_len(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::InvalidDimension(format!(
            "{what}: expected length {expected}, got {got}"
        )));
    }
    Ok(())
}
