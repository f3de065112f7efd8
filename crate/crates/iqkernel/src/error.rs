use thiserror::Error;

/// Errors produced by tensor construction, quantization and the integer
/// operators. `Validation` variants indicate bad inputs; `Numerical`
/// variants indicate an operating-range diagnostic (overflowing shifts,
/// out-of-range scales) that aborts the computation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty tensor: {0}")]
    EmptyTensor(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("unsupported bit-width {0}, expected 4, 6 or 8")]
    InvalidBits(u8),
    #[error("invalid granularity: {0}")]
    InvalidGranularity(String),
    #[error("division by zero in {0}")]
    DivisionByZero(&'static str),
    #[error("ratio out of range in {ctx}: numerator {num} exceeds denominator {den}")]
    RatioOutOfRange {
        ctx: &'static str,
        num: u64,
        den: u64,
    },
    #[error("output precision {0} out of range [2, 16]")]
    InvalidPrecision(u32),
    #[error("floor_log2 of zero is undefined")]
    Log2OfZero,
    #[error("zero scale mantissa carries no information in {0}")]
    ZeroScale(&'static str),
    #[error("dyadic target {num}/{den} exceeds operating range (max 255)")]
    ScaleOutOfRange { num: u64, den: u64 },
    #[error("shift overflow in {ctx}: shift {shift} exceeds limit {limit}")]
    ShiftOverflow {
        ctx: &'static str,
        shift: u32,
        limit: u32,
    },
    #[error("integer step overflow in di_exp: |t| = {t} exceeds 32-bit range (scale k too large)")]
    ExpStepOverflow { t: i64 },
    #[error("accumulated output shift k = {k} exceeds 63 in {ctx}; requantize inputs to a coarser scale first")]
    OutputShiftOverflow { ctx: &'static str, k: u32 },
    #[error("smoothing factor at channel {0} is not strictly positive")]
    NonPositiveSmoothing(usize),
    #[error("non-finite loss during reconstruction at step {0}")]
    NonFiniteLoss(usize),
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for input-validation failures (CLI exit code 2), false for
    /// numerical diagnostics (CLI exit code 3).
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::ExpStepOverflow { .. }
                | Error::OutputShiftOverflow { .. }
                | Error::ShiftOverflow { .. }
                | Error::NonFiniteLoss(..)
                | Error::ScaleOutOfRange { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
