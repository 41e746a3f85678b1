//! Link-level simulator for a carrier-overlay high-speed CAN physical layer.
//!
//! A standard CAN 2.0 frame is transmitted at 1 Mbit/s with an all-dominant
//! data field. On top of the dominant bit periods of that data field, the
//! transmitter superimposes a carrier-modulated QAM signal (24 MHz carrier,
//! 36 MHz symbol rate by default), scaled so the composite bus voltage never
//! drops below the recessive-detection threshold of a standard CAN receiver.
//! Bit stuffing of the all-dominant field produces the 5-on/1-off gating
//! pattern the high-speed receiver locks to. The receiver isolates the
//! overlay with a bandpass filter, downconverts it coherently, and recovers
//! the payload with an LMS-trained decision-feedback equalizer.
//!
//! Module map:
//! - [`frame`]: CAN 2.0 framing, CRC-15, bit stuffing, arbitration
//! - [`waveform`]: sampled bus signals and the standard threshold detector
//! - [`overlay`]: symbol mapping, pulse shaping, upconversion, TX assembly
//! - [`channel`]: flat / lossy-line / tapped-bus responses and AWGN
//! - [`rx`]: bandpass, gating tracker, downconversion, DFE equalizer
//! - [`metrics`]: output SNR, error rates, net data rate, compatibility
//! - [`sweep`]: configuration-driven reproducible simulation sweeps

pub mod channel;
mod dsp;
pub mod error;
pub mod frame;
pub mod metrics;
pub mod overlay;
pub mod rx;
pub mod sweep;
pub mod waveform;

pub use error::{Error, Result};
