//! Carrier-overlay transmitter: constellation mapping, root-raised-cosine
//! pulse shaping, upconversion, amplitude scaling against the dominant-bit
//! detection threshold, and assembly of the composite bus waveform.
//!
//! The overlay rides only on dominant bits of the data field. Symbol
//! generation pauses during the recessive stuff bits and resumes in the next
//! dominant window; the carrier phase reference keeps running, so every
//! window shares one oscillator. Pulse-shaping filter state is flushed at
//! each window start, which leaves the first and last symbols of a window
//! with truncated pulse tails.

use crate::dsp;
use crate::error::{Error, Result};
use crate::frame::{dominant_schedule, BitStream, CanFrame, DominantWindow, StuffedFrame};
use crate::waveform::{differential_from_single, synthesize_single_ended, BitTiming, Waveform};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use std::sync::OnceLock;

/// Modulation of the high-speed symbol stream. All constellations are Gray
/// mapped and normalized to unit average energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modulation {
    #[serde(rename = "qpsk")]
    Qpsk,
    #[serde(rename = "8psk")]
    Psk8,
    #[serde(rename = "16qam")]
    Qam16,
    #[serde(rename = "64qam")]
    Qam64,
}

impl Modulation {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Qpsk => 2,
            Modulation::Psk8 => 3,
            Modulation::Qam16 => 4,
            Modulation::Qam64 => 6,
        }
    }

    /// Constellation table indexed by the symbol's bit pattern (MSB first).
    pub fn points(self) -> &'static [Complex64] {
        match self {
            Modulation::Qpsk => {
                static P: OnceLock<[Complex64; 4]> = OnceLock::new();
                P.get_or_init(|| {
                    let s = 1.0 / 2.0f64.sqrt();
                    // 00 01 10 11 -> (+,+) (-,+) (+,-) (-,-)
                    [
                        Complex64::new(s, s),
                        Complex64::new(-s, s),
                        Complex64::new(s, -s),
                        Complex64::new(-s, -s),
                    ]
                })
            }
            Modulation::Psk8 => {
                static P: OnceLock<[Complex64; 8]> = OnceLock::new();
                P.get_or_init(|| {
                    // Gray ring 000,001,011,010,110,111,101,100 walks the
                    // eighth-turn phases in order.
                    let k_by_idx = [0, 1, 3, 2, 7, 6, 4, 5];
                    std::array::from_fn(|i| {
                        Complex64::from_polar(1.0, k_by_idx[i] as f64 * PI / 4.0)
                    })
                })
            }
            Modulation::Qam16 => {
                static P: OnceLock<[Complex64; 16]> = OnceLock::new();
                P.get_or_init(|| {
                    let axis = [-3.0, -1.0, 3.0, 1.0]; // 2-bit Gray per axis
                    let s = 1.0 / 10.0f64.sqrt();
                    std::array::from_fn(|i| {
                        Complex64::new(axis[i >> 2] * s, axis[i & 3] * s)
                    })
                })
            }
            Modulation::Qam64 => {
                static P: OnceLock<[Complex64; 64]> = OnceLock::new();
                P.get_or_init(|| {
                    let axis = [-7.0, -5.0, -1.0, -3.0, 7.0, 5.0, 1.0, 3.0]; // 3-bit Gray
                    let s = 1.0 / 42.0f64.sqrt();
                    std::array::from_fn(|i| {
                        Complex64::new(axis[i >> 3] * s, axis[i & 7] * s)
                    })
                })
            }
        }
    }
}

/// Overlay signal parameters. Defaults follow the reference configuration:
/// 16QAM payload at 36 Mbaud on a 24 MHz carrier, roll-off 0.25 pulses, and
/// QPSK training filling the first 15 dominant bit periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlayConfig {
    pub modulation: Modulation,
    pub carrier_freq_hz: f64,
    pub symbol_rate_hz: f64,
    pub rrc_rolloff: f64,
    pub rrc_span_symbols: usize,
    /// Dominant bit periods at the start of the data field carrying QPSK
    /// training symbols.
    pub training_bits: usize,
    /// Offset level of the composite dominant signal, volts.
    pub v_offset: f64,
    /// Recessive-detection threshold the composite must stay above, volts.
    pub v_threshold: f64,
    /// Fixed amplitude scale. `None` derives the largest compliant scale from
    /// the generated carrier signal.
    pub amplitude_scale: Option<f64>,
    /// Placement of the first symbol peak inside each dominant window, in
    /// samples. A small offset keeps the edge symbols' main lobes inside the
    /// gated region.
    pub symbol_offset_samples: usize,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self {
            modulation: Modulation::Qam16,
            carrier_freq_hz: 24e6,
            symbol_rate_hz: 36e6,
            rrc_rolloff: 0.25,
            rrc_span_symbols: 8,
            training_bits: 15,
            v_offset: 1.0,
            v_threshold: 0.5,
            amplitude_scale: None,
            symbol_offset_samples: 4,
        }
    }
}

impl OverlayConfig {
    pub fn samples_per_symbol(&self, sample_rate: f64) -> Result<usize> {
        let ratio = sample_rate / self.symbol_rate_hz;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::NonIntegerSamplesPerSymbol {
                sample_rate,
                symbol_rate: self.symbol_rate_hz,
            });
        }
        Ok(ratio.round() as usize)
    }

    /// Overlay symbols per CAN bit period (36 at defaults).
    pub fn symbols_per_bit(&self, timing: &BitTiming) -> usize {
        (self.symbol_rate_hz / timing.bit_rate_hz).round() as usize
    }

    /// Occupied RF bandwidth of the shaped overlay, Hz.
    pub fn occupied_bandwidth_hz(&self) -> f64 {
        self.symbol_rate_hz * (1.0 + self.rrc_rolloff)
    }

    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        let sps = self.samples_per_symbol(sample_rate)?;
        if self.carrier_freq_hz + self.occupied_bandwidth_hz() / 2.0 >= sample_rate / 2.0 {
            return Err(Error::InvalidPlan(format!(
                "carrier {} Hz plus half the occupied band exceeds Nyquist at {} Hz",
                self.carrier_freq_hz, sample_rate
            )));
        }
        if self.carrier_freq_hz <= self.occupied_bandwidth_hz() / 2.0 {
            return Err(Error::InvalidPlan(
                "occupied band extends below DC".into(),
            ));
        }
        if self.symbol_offset_samples > self.rrc_span_symbols * sps / 2 {
            return Err(Error::InvalidPlan(
                "symbol offset exceeds the pulse group delay".into(),
            ));
        }
        Ok(())
    }
}

/// Gray-map a bit stream onto constellation symbols.
pub fn map_symbols(bits: &BitStream, modulation: Modulation) -> Result<Vec<Complex64>> {
    let n = modulation.bits_per_symbol();
    if bits.len() % n != 0 {
        return Err(Error::BitCountNotDivisible(bits.len(), n));
    }
    let points = modulation.points();
    Ok(bits
        .as_bits()
        .chunks(n)
        .map(|chunk| {
            let idx = chunk.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
            points[idx]
        })
        .collect())
}

/// The seeded QPSK training sequence shared by transmitter and receiver.
pub fn training_symbols(seed: u64, count: usize) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits = BitStream::random(&mut rng, 2 * count);
    map_symbols(&bits, Modulation::Qpsk).expect("even bit count")
}

/// Transmit pulse taps, scaled so the upsample-and-filter cascade has unit
/// gain at DC: a constant symbol stream settles to 1 within the sub-percent
/// ripple the span truncation leaves between symbol instants.
pub fn tx_pulse_taps(cfg: &OverlayConfig, sample_rate: f64) -> Result<Vec<f64>> {
    let sps = cfg.samples_per_symbol(sample_rate)?;
    let mut taps = dsp::rrc_taps(cfg.rrc_rolloff, cfg.rrc_span_symbols, sps);
    // normalize each polyphase branch to unit sum: the truncated pulse then
    // keeps an exactly flat composite DC response (a constant symbol stream
    // reproduces its level sample for sample), at the cost of a sub-2%
    // reshape of the outermost taps
    for phase in 0..sps {
        let s: f64 = taps.iter().skip(phase).step_by(sps).sum();
        for t in taps.iter_mut().skip(phase).step_by(sps) {
            *t /= s;
        }
    }
    Ok(taps)
}

fn shape(symbols: &[Complex64], taps: &[f64], sps: usize) -> Vec<Complex64> {
    let out_len = symbols.len() * sps + taps.len() - 1;
    let mut out = vec![Complex64::ZERO; out_len];
    for (k, &s) in symbols.iter().enumerate() {
        if s == Complex64::ZERO {
            continue;
        }
        let base = k * sps;
        for (m, &t) in taps.iter().enumerate() {
            out[base + m] += s * t;
        }
    }
    out
}

/// Upsample and pulse-shape a symbol sequence into baseband I and Q
/// waveforms. Output length is `symbols.len() * sps + span * sps`, with the
/// k-th symbol peaking `span * sps / 2` samples after index `k * sps`.
pub fn pulse_shape(
    symbols: &[Complex64],
    cfg: &OverlayConfig,
    sample_rate: f64,
) -> Result<(Waveform, Waveform)> {
    let sps = cfg.samples_per_symbol(sample_rate)?;
    let taps = tx_pulse_taps(cfg, sample_rate)?;
    let bb = shape(symbols, &taps, sps);
    let i = bb.iter().map(|c| c.re).collect();
    let q = bb.iter().map(|c| c.im).collect();
    Ok((
        Waveform::new(i, sample_rate),
        Waveform::new(q, sample_rate),
    ))
}

/// Mix baseband I/Q up to the carrier: i·cos(2πft) − q·sin(2πft), phase
/// referenced to the waveform's `t0`.
pub fn upconvert(i: &Waveform, q: &Waveform, carrier_freq_hz: f64) -> Result<Waveform> {
    if i.len() != q.len() {
        return Err(Error::LengthMismatch(i.len(), q.len()));
    }
    let fs = i.sample_rate;
    let samples = (0..i.len())
        .map(|n| {
            let t = i.t0 + n as f64 / fs;
            let ph = 2.0 * PI * carrier_freq_hz * t;
            i.samples[n] * ph.cos() - q.samples[n] * ph.sin()
        })
        .collect();
    let mut out = Waveform::new(samples, fs);
    out.t0 = i.t0;
    Ok(out)
}

/// A dominant window in sample coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleWindow {
    pub start: usize,
    pub len: usize,
}

/// Convert a bit-coordinate gating schedule to sample coordinates.
pub fn sample_windows(schedule: &[DominantWindow], timing: &BitTiming) -> Vec<SampleWindow> {
    let spb = timing.samples_per_bit;
    schedule
        .iter()
        .map(|w| SampleWindow {
            start: w.start_bit * spb,
            len: w.len_bits * spb,
        })
        .collect()
}

/// Largest amplitude scale that keeps the composite dominant-period signal at
/// or above the recessive-detection threshold:
/// `(v_offset − v_threshold) / max |carrier|` over the dominant windows.
pub fn compute_amplitude_scale(
    carrier: &Waveform,
    windows: &[SampleWindow],
    v_offset: f64,
    v_threshold: f64,
) -> Result<f64> {
    let mut peak = 0.0f64;
    for w in windows {
        for n in w.start..(w.start + w.len).min(carrier.len()) {
            peak = peak.max(carrier.samples[n].abs());
        }
    }
    if peak == 0.0 {
        return Err(Error::ZeroOverlaySignal);
    }
    Ok((v_offset - v_threshold) / peak)
}

/// Ground-truth record of the symbols a frame carried.
#[derive(Debug, Clone)]
pub struct SymbolLog {
    pub training_symbols: Vec<Complex64>,
    pub payload_symbols: Vec<Complex64>,
    /// Overlay symbols per CAN bit period (36 at defaults).
    pub symbols_per_bit: usize,
}

impl SymbolLog {
    pub fn total_symbols(&self) -> usize {
        self.training_symbols.len() + self.payload_symbols.len()
    }

    /// CSV export: `index,phase,i,q` with phase `training` or `payload`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "index,phase,i,q")?;
        for (n, s) in self.training_symbols.iter().enumerate() {
            writeln!(w, "{n},training,{:.9e},{:.9e}", s.re, s.im)?;
        }
        let base = self.training_symbols.len();
        for (n, s) in self.payload_symbols.iter().enumerate() {
            writeln!(w, "{},payload,{:.9e},{:.9e}", base + n, s.re, s.im)?;
        }
        Ok(())
    }
}

/// A fully assembled transmit frame.
#[derive(Debug, Clone)]
pub struct TxFrame {
    /// Differential composite signal driven onto the bus.
    pub composite_diff: Waveform,
    /// Differential standard CAN signal without the overlay.
    pub baseline_diff: Waveform,
    /// Differential overlay component alone (`composite − baseline`).
    pub overlay_diff: Waveform,
    pub log: SymbolLog,
    pub schedule: Vec<DominantWindow>,
    pub stuffed: StuffedFrame,
    pub amplitude_scale: f64,
}

/// Payload bits required to fill the non-training dominant windows of a frame.
pub fn payload_bits_required(
    frame: &CanFrame,
    cfg: &OverlayConfig,
    timing: &BitTiming,
) -> Result<usize> {
    let schedule = dominant_schedule(&frame.to_stuffed());
    let dominant_bits: usize = schedule.iter().map(|w| w.len_bits).sum();
    if dominant_bits < cfg.training_bits {
        return Err(Error::TrainingTooShort {
            need: cfg.training_bits,
            got: dominant_bits,
        });
    }
    let spb_sym = cfg.symbols_per_bit(timing);
    Ok((dominant_bits - cfg.training_bits) * spb_sym * cfg.modulation.bits_per_symbol())
}

/// Build the composite transmit waveform for a frame.
///
/// The first `training_bits` dominant bit periods carry seeded QPSK training
/// symbols; the remaining dominant windows carry the payload at the payload
/// constellation. The overlay is scaled so the composite single-ended signal
/// never drops below `v_threshold` during dominant periods (transition ramps
/// excluded), then converted to the differential bus signal.
pub fn build_tx(
    frame: &CanFrame,
    payload_bits: &BitStream,
    cfg: &OverlayConfig,
    timing: &BitTiming,
    training_seed: u64,
) -> Result<TxFrame> {
    let fs = timing.sample_rate();
    cfg.validate(fs)?;
    let sps = cfg.samples_per_symbol(fs)?;
    let spb_sym = cfg.symbols_per_bit(timing);
    assert_eq!(
        spb_sym * sps,
        timing.samples_per_bit,
        "bit, symbol and sample rates must be commensurate"
    );

    let stuffed = frame.to_stuffed();
    let schedule = dominant_schedule(&stuffed);
    let dominant_bits: usize = schedule.iter().map(|w| w.len_bits).sum();
    if dominant_bits < cfg.training_bits {
        return Err(Error::TrainingTooShort {
            need: cfg.training_bits,
            got: dominant_bits,
        });
    }

    let n_train = cfg.training_bits * spb_sym;
    let n_payload = (dominant_bits - cfg.training_bits) * spb_sym;
    let expected_bits = n_payload * cfg.modulation.bits_per_symbol();
    if payload_bits.len() != expected_bits {
        return Err(Error::PayloadSizeMismatch {
            expected: expected_bits,
            got: payload_bits.len(),
        });
    }

    let train = training_symbols(training_seed, n_train);
    let payload = map_symbols(payload_bits, cfg.modulation)?;
    let mut all = train.clone();
    all.extend_from_slice(&payload);

    // Gated carrier signal: per-window pulse shaping (fresh filter state),
    // one shared free-running carrier phase reference.
    let taps = tx_pulse_taps(cfg, fs)?;
    let gd = cfg.rrc_span_symbols * sps / 2;
    let offset = cfg.symbol_offset_samples;
    let spb = timing.samples_per_bit;
    let total_samples = stuffed.bits.len() * spb;
    let mut carrier = vec![0.0f64; total_samples];
    let mut cursor = 0usize;
    for w in &schedule {
        let m = w.len_bits * spb_sym;
        let bb = shape(&all[cursor..cursor + m], &taps, sps);
        cursor += m;
        let s0 = w.start_bit * spb;
        for n in 0..w.len_bits * spb {
            let g = s0 + n;
            let ph = 2.0 * PI * cfg.carrier_freq_hz * (g as f64 / fs);
            let c = bb[n + gd - offset];
            carrier[g] = c.re * ph.cos() - c.im * ph.sin();
        }
    }
    debug_assert_eq!(cursor, all.len());

    let carrier = Waveform::new(carrier, fs);
    let windows = sample_windows(&schedule, timing);
    let amplitude_scale = match cfg.amplitude_scale {
        Some(a) => a,
        None => compute_amplitude_scale(&carrier, &windows, cfg.v_offset, cfg.v_threshold)?,
    };

    let baseline = synthesize_single_ended(&stuffed.bits, timing)?;
    let mut composite = baseline.clone();
    for (c, s) in composite.samples.iter_mut().zip(carrier.samples.iter()) {
        *c += amplitude_scale * s;
    }

    // The threshold constraint applies to settled dominant levels, so skip
    // the rise ramp at each window start.
    let ramp = timing.ramp_samples().ceil() as usize;
    let mut min_level = f64::INFINITY;
    for w in &windows {
        for n in (w.start + ramp)..(w.start + w.len) {
            min_level = min_level.min(composite.samples[n]);
        }
    }
    if min_level < cfg.v_threshold - 1e-9 {
        return Err(Error::AmplitudeConstraint {
            min: min_level,
            threshold: cfg.v_threshold,
        });
    }

    let composite_diff = differential_from_single(&composite);
    let baseline_diff = differential_from_single(&baseline);
    let overlay_diff = Waveform {
        samples: composite_diff
            .samples
            .iter()
            .zip(baseline_diff.samples.iter())
            .map(|(c, b)| c - b)
            .collect(),
        sample_rate: fs,
        t0: 0.0,
    };

    Ok(TxFrame {
        composite_diff,
        baseline_diff,
        overlay_diff,
        log: SymbolLog {
            training_symbols: train,
            payload_symbols: payload,
            symbols_per_bit: spb_sym,
        },
        schedule,
        stuffed,
        amplitude_scale,
    })
}
