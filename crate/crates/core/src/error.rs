//! Error types shared across the crate.

/// Crate-wide error type.
///
/// Numerical hazards (`NearZeroSum`, `NormalizerUnderflow`, `DivergedState`)
/// are recoverable outcomes: the training loop records them as divergences
/// instead of propagating a panic.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("near-zero sum in sum normalization: |sum| = {sum:e} <= {floor:e}")]
    NearZeroSum { sum: f64, floor: f64 },

    #[error("attention normalizer underflow at step {step}: |z.q| = {denom:e} <= {floor:e}")]
    NormalizerUnderflow { step: usize, denom: f64, floor: f64 },

    #[error("diverged state at step {step}: non-finite value in {what}")]
    DivergedState { step: usize, what: &'static str },

    #[error("token id {token} out of vocab (size {vocab})")]
    TokenOutOfVocab { token: u32, vocab: usize },

    #[error("gate override out of range: {0}")]
    GateOutOfRange(f64),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unknown preset: {0}")]
    UnknownPreset(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("non-finite loss during finite-difference probe")]
    NonFiniteLoss,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for the numerical-hazard variants that the training loop
    /// treats as a divergence outcome rather than a hard failure.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::NearZeroSum { .. }
                | Error::NormalizerUnderflow { .. }
                | Error::DivergedState { .. }
        )
    }
}
