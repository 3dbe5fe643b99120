use thiserror::Error;

/// Errors raised by expansion, attention, chunked and gradient routines.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("invalid expansion spec: {0}")]
    InvalidSpec(String),
    #[error("overflow: {0}")]
    Overflow(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("normalization requires an even power, got p = {0}")]
    OddPowerWithNormalize(u32),
    #[error("normalization denominator is not positive at position {position}")]
    ZeroDenominator { position: usize },
    #[error("state of {elements} elements exceeds the memory budget of {budget} elements")]
    StateTooLarge { elements: u128, budget: u128 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}
