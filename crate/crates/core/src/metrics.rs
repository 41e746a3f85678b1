//! Link performance bookkeeping: equalizer output SNR, error rates, net data
//! rate, and the backward-compatibility check against the standard detector.

use crate::channel::ChannelKind;
use crate::error::{Error, Result};
use crate::frame::BitStream;
use crate::overlay::OverlayConfig;
use crate::waveform::{threshold_detect, BitTiming, Waveform};
use num_complex::Complex64;

/// Reported output SNR is capped so CSV columns stay finite.
pub const OUTPUT_SNR_CAP_DB: f64 = 60.0;

/// Equalizer output SNR in dB: signal power of the reference symbols over the
/// residual error power, computed over the decision-directed segment.
pub fn output_snr_db(equalized: &[Complex64], truth: &[Complex64]) -> Result<f64> {
    if equalized.is_empty() || truth.is_empty() {
        return Err(Error::EmptyInput("equalized symbol sequence"));
    }
    if equalized.len() != truth.len() {
        return Err(Error::LengthMismatch(equalized.len(), truth.len()));
    }
    let sig: f64 = truth.iter().map(|s| s.norm_sqr()).sum();
    let err: f64 = equalized
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    if err == 0.0 {
        return Ok(OUTPUT_SNR_CAP_DB);
    }
    Ok((10.0 * (sig / err).log10()).min(OUTPUT_SNR_CAP_DB))
}

/// Bit and symbol error rates between two equal-length bit streams, with
/// symbols grouped `bits_per_symbol` at a time.
pub fn error_rates(
    decisions: &BitStream,
    truth: &BitStream,
    bits_per_symbol: usize,
) -> Result<(f64, f64)> {
    if decisions.len() != truth.len() {
        return Err(Error::LengthMismatch(decisions.len(), truth.len()));
    }
    if decisions.is_empty() {
        return Ok((0.0, 0.0));
    }
    let bit_errors = decisions
        .iter()
        .zip(truth.iter())
        .filter(|(a, b)| a != b)
        .count();
    let ber = bit_errors as f64 / decisions.len() as f64;
    let n_sym = decisions.len() / bits_per_symbol;
    let mut sym_errors = 0usize;
    for k in 0..n_sym {
        let lo = k * bits_per_symbol;
        let hi = lo + bits_per_symbol;
        if decisions.as_bits()[lo..hi] != truth.as_bits()[lo..hi] {
            sym_errors += 1;
        }
    }
    let ser = if n_sym == 0 {
        0.0
    } else {
        sym_errors as f64 / n_sym as f64
    };
    Ok((ber, ser))
}

/// Net data rate ratio for a data field of `data_field_bits`:
/// payload-bearing dominant bit periods over total on-bus bit periods,
/// counting the frame overhead and the stuff bits of the all-dominant field.
pub fn net_rate_ratio(data_field_bits: usize, training_bits: usize, overhead_bits: usize) -> f64 {
    let l = data_field_bits;
    let useful = l.saturating_sub(training_bits);
    let total = overhead_bits + l + l / 5;
    useful as f64 / total as f64
}

/// Net throughput in bits per second for a given rate ratio.
pub fn net_rate_bps(ratio: f64, cfg: &OverlayConfig) -> f64 {
    ratio * cfg.symbol_rate_hz * cfg.modulation.bits_per_symbol() as f64
}

/// Outcome of the backward-compatibility check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompatibilityReport {
    pub pass: bool,
    /// First bit index where the detections differ, when they do.
    pub first_mismatch_bit: Option<usize>,
}

/// A standard CAN receiver must detect the identical bit stream with and
/// without the overlay.
pub fn compatibility_check(
    composite_diff: &Waveform,
    baseline_diff: &Waveform,
    timing: &BitTiming,
) -> CompatibilityReport {
    let with = threshold_detect(composite_diff, timing);
    let without = threshold_detect(baseline_diff, timing);
    let mismatch = with
        .iter()
        .zip(without.iter())
        .position(|(a, b)| a != b)
        .or_else(|| {
            if with.len() != without.len() {
                Some(with.len().min(without.len()))
            } else {
                None
            }
        });
    CompatibilityReport {
        pass: mismatch.is_none(),
        first_mismatch_bit: mismatch,
    }
}

/// Aggregated record of one (channel, SNR) sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub channel_kind: ChannelKind,
    pub input_snr_db: f64,
    /// Mean equalizer output SNR over the point's frames, dB.
    pub output_snr_db: f64,
    pub symbol_errors: u64,
    pub bit_errors: u64,
    pub symbols_total: u64,
    pub frames: u32,
    /// Seed of the point's first frame.
    pub seed: u64,
    pub config_digest: String,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str =
        "channel,input_snr_db,output_snr_db,symbol_errors,bit_errors,symbols_total,frames,seed,config_digest";

    pub fn ber(&self, bits_per_symbol: usize) -> f64 {
        let bits = self.symbols_total * bits_per_symbol as u64;
        if bits == 0 {
            0.0
        } else {
            self.bit_errors as f64 / bits as f64
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{},{},{},{},{},{}",
            self.channel_kind.label(),
            self.input_snr_db,
            self.output_snr_db,
            self.symbol_errors,
            self.bit_errors,
            self.symbols_total,
            self.frames,
            self.seed,
            self.config_digest
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overlay::Modulation;

    #[test]
    fn output_snr_caps_at_sixty() {
        let syms = vec![Complex64::new(1.0, 0.0); 16];
        assert_eq!(output_snr_db(&syms, &syms).unwrap(), 60.0);
    }

    #[test]
    fn output_snr_zero_db_when_error_equals_signal() {
        let truth = vec![Complex64::new(1.0, 0.0); 64];
        let eq: Vec<Complex64> = truth.iter().map(|s| s + Complex64::new(0.0, 1.0)).collect();
        let snr = output_snr_db(&eq, &truth).unwrap();
        assert!(snr.abs() < 1e-9);
    }

    #[test]
    fn output_snr_rejects_bad_input() {
        assert!(output_snr_db(&[], &[]).is_err());
        let a = vec![Complex64::ZERO; 3];
        let b = vec![Complex64::ZERO; 4];
        assert!(matches!(
            output_snr_db(&a, &b),
            Err(Error::LengthMismatch(3, 4))
        ));
    }

    #[test]
    fn error_rates_basics() {
        let a = BitStream::from_bits(&[0, 1, 0, 1]);
        assert_eq!(error_rates(&a, &a, 2).unwrap(), (0.0, 0.0));
        let b = BitStream::from_bits(&[1, 0, 1, 0]);
        assert_eq!(error_rates(&a, &b, 2).unwrap(), (1.0, 1.0));
        let mut c = BitStream::zeros(10_000);
        let truth = BitStream::zeros(10_000);
        // flip exactly one bit
        let mut bits = c.as_bits().to_vec();
        bits[1234] = 1;
        c = BitStream::from_bits(&bits);
        let (ber, ser) = error_rates(&c, &truth, 4).unwrap();
        assert!((ber - 1e-4).abs() < 1e-12);
        assert!((ser - 1.0 / 2500.0).abs() < 1e-12);
    }

    #[test]
    fn net_rate_ratio_anchor_points() {
        assert_eq!(net_rate_ratio(0, 15, 46), 0.0);
        let r1024 = net_rate_ratio(1024, 15, 46);
        assert!((r1024 - 1009.0 / 1274.0).abs() < 1e-12);
        assert!((r1024 - 0.792).abs() < 0.001);
        let r64 = net_rate_ratio(64, 15, 46);
        assert!((r64 - 49.0 / 122.0).abs() < 1e-12);
    }

    #[test]
    fn net_rate_ratio_is_monotone_and_bounded() {
        // strictly monotone on the doubling grid; on a fine grid the stuff-bit
        // floor function adds a sub-1e-4 ripple at large L
        let mut prev = 0.0;
        for l in [16usize, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192] {
            let r = net_rate_ratio(l, 15, 46);
            assert!(r > prev, "L={l}");
            prev = r;
        }
        let mut prev = 0.0;
        for l in (16..16384).step_by(8) {
            let r = net_rate_ratio(l, 15, 46);
            assert!(r >= prev - 1e-4, "L={l}: {r} after {prev}");
            assert!(r < 5.0 / 6.0, "L={l}: {r}");
            prev = r;
        }
    }

    #[test]
    fn net_rate_bps_peak_and_anchor() {
        let cfg = OverlayConfig::default();
        assert!((net_rate_bps(1.0, &cfg) - 144e6).abs() < 1e-6);
        let r = net_rate_ratio(1024, 15, 46);
        let bps = net_rate_bps(r, &cfg);
        assert!(bps > 100e6, "net rate {bps}");
        assert!((bps - 114.05e6).abs() < 0.5e6);
        assert_eq!(net_rate_bps(0.0, &cfg), 0.0);
    }

    #[test]
    fn compatibility_pass_and_fail() {
        use crate::frame::{BitStream, CanFrame};
        use crate::overlay::{build_tx, payload_bits_required, OverlayConfig};
        use rand::SeedableRng;

        let frame = CanFrame::build(0, BitStream::zeros(64), false).unwrap();
        let cfg = OverlayConfig::default();
        let timing = BitTiming::default();
        let need = payload_bits_required(&frame, &cfg, &timing).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xc0);
        let payload = BitStream::random(&mut rng, need);
        let tx = build_tx(&frame, &payload, &cfg, &timing, 0xc0).unwrap();

        let ok = compatibility_check(&tx.composite_diff, &tx.baseline_diff, &timing);
        assert!(ok.pass);
        assert_eq!(ok.first_mismatch_bit, None);

        // identical signals trivially pass
        let same = compatibility_check(&tx.baseline_diff, &tx.baseline_diff, &timing);
        assert!(same.pass);

        // doubling the overlay beyond the designed scale must break a
        // dominant bit somewhere in the data field
        let violating = Waveform::new(
            tx.baseline_diff
                .samples
                .iter()
                .zip(tx.overlay_diff.samples.iter())
                .map(|(b, o)| b + 2.0 * o)
                .collect(),
            tx.baseline_diff.sample_rate,
        );
        let bad = compatibility_check(&violating, &tx.baseline_diff, &timing);
        assert!(!bad.pass);
        let at = bad.first_mismatch_bit.unwrap();
        let range = tx.stuffed.data_field.clone().unwrap();
        assert!(range.contains(&at), "mismatch at bit {at}");
    }

    #[test]
    fn sweep_result_csv_row_shape() {
        let r = SweepResult {
            channel_kind: ChannelKind::Flat,
            input_snr_db: 20.0,
            output_snr_db: 18.54321,
            symbol_errors: 3,
            bit_errors: 4,
            symbols_total: 1000,
            frames: 20,
            seed: 42,
            config_digest: "abcd".into(),
        };
        assert_eq!(r.csv_row(), "flat,20,18.5432,3,4,1000,20,42,abcd");
        assert!((r.ber(4) - 0.001).abs() < 1e-12);
    }
}
