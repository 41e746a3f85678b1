//! Sampled bus waveforms and the standard CAN signalling path.
//!
//! The single-ended drive signal sits at 1 V while dominant and 0 V while
//! recessive; the bus carries it differentially around a 2.5 V common mode,
//! so a driven dominant bit reads 2 V between CAN_H and CAN_L.

use crate::error::{Error, Result};
use crate::frame::BitStream;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Differential voltage above which a bit is detected as dominant.
pub const DOMINANT_THRESHOLD_DIFF: f64 = 1.0;
/// Common-mode level of an idle bus.
pub const BUS_COMMON_MODE: f64 = 2.5;
/// Guard band so an amplitude designed to touch the threshold exactly does
/// not flip on float rounding.
const THRESHOLD_GUARD: f64 = 1e-9;

/// Uniformly sampled real-valued signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    /// Time of the first sample, seconds.
    pub t0: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Self {
        Self {
            samples,
            sample_rate,
            t0: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.energy() / self.samples.len() as f64
        }
    }

    /// Export as two-column CSV `time_s,value`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "time_s,value")?;
        for (n, x) in self.samples.iter().enumerate() {
            writeln!(w, "{:.9e},{:.9e}", self.t0 + n as f64 / self.sample_rate, x)?;
        }
        Ok(())
    }
}

/// CAN bit timing. Defaults give 1 Mbit/s with 288 samples per bit, i.e. a
/// 288 MHz master rate that holds an integer number of samples per CAN bit,
/// per overlay symbol and per carrier cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BitTiming {
    pub bit_rate_hz: f64,
    pub samples_per_bit: usize,
    pub rise_fall_time_s: f64,
}

impl Default for BitTiming {
    fn default() -> Self {
        Self {
            bit_rate_hz: 1e6,
            samples_per_bit: 288,
            rise_fall_time_s: 50e-9,
        }
    }
}

impl BitTiming {
    pub fn sample_rate(&self) -> f64 {
        self.bit_rate_hz * self.samples_per_bit as f64
    }

    /// Length of a transition ramp in samples.
    pub fn ramp_samples(&self) -> f64 {
        self.rise_fall_time_s * self.sample_rate()
    }
}

/// Single-ended drive signal: 1 V during dominant bits, 0 V during recessive
/// bits, linear ramps of `rise_fall_time_s` at transitions. The bus idles
/// recessive, so a leading dominant bit ramps up from 0 V.
pub fn synthesize_single_ended(bits: &BitStream, timing: &BitTiming) -> Result<Waveform> {
    if bits.is_empty() {
        return Err(Error::EmptyInput("bit stream"));
    }
    let spb = timing.samples_per_bit;
    let ramp = timing.ramp_samples();
    let mut samples = vec![0.0; bits.len() * spb];
    let mut prev = 0.0;
    for (i, b) in bits.iter().enumerate() {
        let level = if b == 0 { 1.0 } else { 0.0 };
        let base = i * spb;
        if level != prev && ramp > 0.0 {
            let steps = (ramp.ceil() as usize).min(spb);
            for n in 0..steps {
                let frac = (n as f64 / ramp).min(1.0);
                samples[base + n] = prev + (level - prev) * frac;
            }
            for n in steps..spb {
                samples[base + n] = level;
            }
        } else {
            samples[base..base + spb].fill(level);
        }
        prev = level;
    }
    Ok(Waveform::new(samples, timing.sample_rate()))
}

/// Split a single-ended drive signal onto the bus pair:
/// CAN_H = 2.5 + q, CAN_L = 2.5 - q.
pub fn to_differential(q: &Waveform) -> (Waveform, Waveform) {
    let can_h = Waveform {
        samples: q.samples.iter().map(|x| BUS_COMMON_MODE + x).collect(),
        sample_rate: q.sample_rate,
        t0: q.t0,
    };
    let can_l = Waveform {
        samples: q.samples.iter().map(|x| BUS_COMMON_MODE - x).collect(),
        sample_rate: q.sample_rate,
        t0: q.t0,
    };
    (can_h, can_l)
}

/// Differential bus voltage CAN_H - CAN_L for a single-ended drive signal,
/// which is simply 2q.
pub fn differential_from_single(q: &Waveform) -> Waveform {
    Waveform {
        samples: q.samples.iter().map(|x| 2.0 * x).collect(),
        sample_rate: q.sample_rate,
        t0: q.t0,
    }
}

/// Halve a differential waveform back to the single-ended drive signal.
pub fn single_from_differential(q_d: &Waveform) -> Waveform {
    Waveform {
        samples: q_d.samples.iter().map(|x| 0.5 * x).collect(),
        sample_rate: q_d.sample_rate,
        t0: q_d.t0,
    }
}

/// Standard CAN bit detector: one bit per period, sampled at 75% of the bit,
/// dominant iff the differential voltage exceeds 1 V. Late sampling keeps the
/// decision point clear of the transition ramps.
pub fn threshold_detect(q_d: &Waveform, timing: &BitTiming) -> BitStream {
    let spb = timing.samples_per_bit;
    let n_bits = q_d.len() / spb;
    let offset = (3 * spb) / 4;
    (0..n_bits)
        .map(|i| {
            let v = q_d.samples[i * spb + offset];
            if v > DOMINANT_THRESHOLD_DIFF - THRESHOLD_GUARD {
                0
            } else {
                1
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bits(v: &[u8]) -> BitStream {
        BitStream::from_bits(v)
    }

    #[test]
    fn single_dominant_bit_is_one_volt() {
        let timing = BitTiming {
            rise_fall_time_s: 0.0,
            ..BitTiming::default()
        };
        let q = synthesize_single_ended(&bits(&[0]), &timing).unwrap();
        assert_eq!(q.len(), 288);
        assert!(q.samples.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn single_recessive_bit_is_zero_volts() {
        let q = synthesize_single_ended(&bits(&[1]), &BitTiming::default()).unwrap();
        assert!(q.samples.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_bit_stream_is_rejected() {
        assert!(synthesize_single_ended(&BitStream::new(), &BitTiming::default()).is_err());
    }

    #[test]
    fn ramps_span_fourteen_to_fifteen_samples() {
        // 50 ns at 288 MHz is 14.4 samples.
        let timing = BitTiming {
            rise_fall_time_s: 50e-9,
            ..BitTiming::default()
        };
        let q = synthesize_single_ended(&bits(&[0, 1, 0]), &timing).unwrap();
        assert_eq!(q.samples[144], 1.0);
        assert_eq!(q.samples[288 + 144], 0.0);
        assert_eq!(q.samples[576 + 144], 1.0);
        for boundary in [0usize, 288, 576] {
            let ramp_len = q.samples[boundary..boundary + 32]
                .iter()
                .filter(|&&x| x > 0.0 && x < 1.0)
                .count();
            assert!(
                (14..=15).contains(&ramp_len),
                "boundary {boundary}: ramp {ramp_len} samples"
            );
        }
    }

    #[test]
    fn differential_levels_match_bus_convention() {
        let q = Waveform::new(vec![1.0, 0.0, 0.5], 288e6);
        let (h, l) = to_differential(&q);
        assert_eq!(h.samples, vec![3.5, 2.5, 3.0]);
        assert_eq!(l.samples, vec![1.5, 2.5, 2.0]);
        let d = differential_from_single(&q);
        assert_eq!(d.samples, vec![2.0, 0.0, 1.0]);
    }

    #[test]
    fn differential_is_affine_in_the_drive_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let da = differential_from_single(&Waveform::new(a, 1.0));
        let db = differential_from_single(&Waveform::new(b, 1.0));
        let dsum = differential_from_single(&Waveform::new(sum, 1.0));
        for i in 0..64 {
            assert!((dsum.samples[i] - da.samples[i] - db.samples[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn clean_bits_detect_correctly() {
        let timing = BitTiming::default();
        let d = Waveform::new(
            [vec![2.0; 288], vec![0.0; 288], vec![1.2; 288]].concat(),
            timing.sample_rate(),
        );
        let detected = threshold_detect(&d, &timing);
        // a dominant bit whose overlay dips the differential to 1.2 V still
        // reads dominant
        assert_eq!(detected, bits(&[0, 1, 0]));
    }

    #[test]
    fn detect_inverts_synthesis_for_random_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xbeef);
        for rise in [0.0, 20e-9, 50e-9, 150e-9] {
            let timing = BitTiming {
                rise_fall_time_s: rise,
                ..BitTiming::default()
            };
            for _ in 0..50 {
                let n = rng.random_range(1..=64usize);
                let b = BitStream::random(&mut rng, n);
                let q = synthesize_single_ended(&b, &timing).unwrap();
                let d = differential_from_single(&q);
                assert_eq!(threshold_detect(&d, &timing), b);
            }
        }
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let q = Waveform::new(vec![0.25, 0.5], 2.0);
        let mut out = Vec::new();
        q.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "time_s,value");
        assert!(lines[1].starts_with("0.000000000e0,2.5"));
    }
}
