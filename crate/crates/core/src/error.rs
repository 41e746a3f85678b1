//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("identifier {0:#x} exceeds 11 bits")]
    IdentifierOutOfRange(u32),

    #[error("invalid data field length {0}: {1}")]
    InvalidDataLength(usize, &'static str),

    #[error("bit stuffing violation at index {index}: six identical consecutive bits")]
    StuffViolation { index: usize },

    #[error("arbitration requires at least one identifier")]
    EmptyArbitration,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("bit count {0} is not divisible by {1} bits per symbol")]
    BitCountNotDivisible(usize, usize),

    #[error("sample rate {sample_rate} Hz is not an integer multiple of symbol rate {symbol_rate} Hz")]
    NonIntegerSamplesPerSymbol { sample_rate: f64, symbol_rate: f64 },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("payload size mismatch: expected {expected} bits, got {got}")]
    PayloadSizeMismatch { expected: usize, got: usize },

    #[error("carrier signal is zero over every dominant window")]
    ZeroOverlaySignal,

    #[error("composite minimum {min:.4} V is below the detection threshold {threshold:.4} V")]
    AmplitudeConstraint { min: f64, threshold: f64 },

    #[error("noise reference power must be positive, got {0}")]
    NonPositiveNoiseReference(f64),

    #[error("no recessive-to-dominant transition found near stuffed bit {bit_index}")]
    TransitionNotFound { bit_index: usize },

    #[error("training sequence too short: need {need} symbols, have {got}")]
    TrainingTooShort { need: usize, got: usize },

    #[error("equalizer diverged at symbol {symbol}: output power {output_power:.3e} exceeds 100x input power {input_power:.3e}")]
    EqualizerDiverged {
        symbol: usize,
        output_power: f64,
        input_power: f64,
    },

    #[error("invalid sweep plan: {0}")]
    InvalidPlan(String),

    #[error("in {context}: {source}")]
    SweepContext {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wrap an error with sweep run context (channel, SNR, frame index, seed).
    pub fn with_context(self, context: String) -> Self {
        Error::SweepContext {
            context,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
