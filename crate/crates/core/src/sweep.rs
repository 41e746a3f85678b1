//! Configuration-driven simulation sweeps with seeded reproducibility.
//!
//! A [`SweepPlan`] names the channels, input SNR grid, frame count and all
//! physical parameters. Every frame's randomness derives deterministically
//! from the plan's base seed and the frame's (channel, snr, frame) indices,
//! so two runs of the same plan produce byte-identical CSV output.

use crate::channel::{add_awgn, ChannelSpec, NoiseSpec, PreparedChannel};
use crate::error::{Error, Result};
use crate::frame::{BitStream, CanFrame};
use crate::metrics::{self, SweepResult};
use crate::overlay::{build_tx, payload_bits_required, sample_windows, OverlayConfig};
use crate::rx::{decide, EqualizerConfig, FrameReceiver};
use crate::waveform::BitTiming;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Complete description of a simulation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepPlan {
    pub base_seed: u64,
    pub frames_per_point: usize,
    /// Data field length in bits; lengths beyond 64 use the extended frame.
    pub data_field_bits: usize,
    /// Frame identifier used for every simulated frame.
    pub identifier: u16,
    pub snr_points_db: Vec<f64>,
    pub channels: Vec<ChannelSpec>,
    pub overlay: OverlayConfig,
    pub equalizer: EqualizerConfig,
    pub timing: BitTiming,
    /// Band over which the input SNR is defined, Hz.
    pub noise_band_hz: (f64, f64),
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            base_seed: 0x0ca0_5eed,
            frames_per_point: 20,
            data_field_bits: 1024,
            identifier: 0,
            snr_points_db: (16..=26).map(|s| s as f64).collect(),
            channels: vec![
                ChannelSpec::flat(),
                ChannelSpec::channel_a(),
                ChannelSpec::channel_b(),
            ],
            overlay: OverlayConfig::default(),
            equalizer: EqualizerConfig::default(),
            timing: BitTiming::default(),
            noise_band_hz: (6e6, 42e6),
        }
    }
}

impl SweepPlan {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let plan: SweepPlan =
            toml::from_str(text).map_err(|e| Error::InvalidPlan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_points_db.is_empty() {
            return Err(Error::InvalidPlan("snr_points_db must be non-empty".into()));
        }
        if self.frames_per_point == 0 {
            return Err(Error::InvalidPlan("frames_per_point must be >= 1".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidPlan("channels must be non-empty".into()));
        }
        let fs = self.timing.sample_rate();
        self.overlay.validate(fs)?;
        self.equalizer.validate()?;
        let (lo, hi) = self.noise_band_hz;
        if !(0.0 < lo && lo < hi && hi <= fs / 2.0) {
            return Err(Error::InvalidPlan(format!(
                "noise band ({lo}, {hi}) must sit inside (0, {})",
                fs / 2.0
            )));
        }
        Ok(())
    }

    /// Short fingerprint of the full configuration: FNV-1a over the canonical
    /// TOML serialization.
    pub fn config_digest(&self) -> String {
        let text = self.to_toml_string();
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }
}

/// Per-frame seed: SplitMix64 over the base seed and the (channel, snr,
/// frame) indices, mixed in that order.
pub fn derive_frame_seed(base_seed: u64, channel_idx: usize, snr_idx: usize, frame_idx: usize) -> u64 {
    let mut s = splitmix64(base_seed);
    s = splitmix64(s ^ (channel_idx as u64).wrapping_add(0x9e37_79b9_7f4a_7c15));
    s = splitmix64(s ^ (snr_idx as u64).wrapping_add(0x9e37_79b9_7f4a_7c15));
    s = splitmix64(s ^ (frame_idx as u64).wrapping_add(0x9e37_79b9_7f4a_7c15));
    s
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent sub-seeds for a frame's training, payload and noise draws.
fn frame_subseeds(frame_seed: u64) -> (u64, u64, u64) {
    (
        splitmix64(frame_seed ^ 1),
        splitmix64(frame_seed ^ 2),
        splitmix64(frame_seed ^ 3),
    )
}

/// Result of one end-to-end frame simulation.
#[derive(Debug, Clone)]
pub struct FrameOutcome {
    pub output_snr_db: f64,
    pub bit_errors: u64,
    pub symbol_errors: u64,
    pub symbols: u64,
    pub payload_bits: u64,
    pub amplitude_scale: f64,
    pub post_training_mse: f64,
}

/// Simulate one frame end to end: build, channel, noise, receive, score.
pub fn run_link_frame(
    plan: &SweepPlan,
    channel: &PreparedChannel,
    snr_db: Option<f64>,
    frame_seed: u64,
) -> Result<FrameOutcome> {
    let (training_seed, payload_seed, noise_seed) = frame_subseeds(frame_seed);
    let timing = plan.timing;
    let fs = timing.sample_rate();

    let frame = CanFrame::build(
        plan.identifier,
        BitStream::zeros(plan.data_field_bits),
        plan.data_field_bits > 64,
    )?;
    let need = payload_bits_required(&frame, &plan.overlay, &timing)?;
    let mut payload_rng = ChaCha8Rng::seed_from_u64(payload_seed);
    let payload = BitStream::random(&mut payload_rng, need);
    let tx = build_tx(&frame, &payload, &plan.overlay, &timing, training_seed)?;

    let baseline_ch = channel.apply(&tx.baseline_diff);
    let overlay_ch = channel.apply(&tx.overlay_diff);
    let mut composite_ch = baseline_ch.clone();
    for (c, o) in composite_ch
        .samples
        .iter_mut()
        .zip(overlay_ch.samples.iter())
    {
        *c += o;
    }

    // SNR reference: post-channel overlay power inside the active windows
    let delay = channel.spec.bulk_delay_samples(fs);
    let delay_int = delay.round() as usize;
    let mut p_acc = 0.0;
    let mut n_acc = 0usize;
    for w in sample_windows(&tx.schedule, &timing) {
        let lo = w.start + delay_int;
        let hi = (lo + w.len).min(overlay_ch.len());
        for n in lo..hi {
            p_acc += overlay_ch.samples[n] * overlay_ch.samples[n];
        }
        n_acc += hi - lo;
    }
    let p_ref = p_acc / n_acc.max(1) as f64;

    let noise = NoiseSpec {
        input_snr_db: snr_db,
        rng_seed: noise_seed,
        band_low_hz: plan.noise_band_hz.0,
        band_high_hz: plan.noise_band_hz.1,
    };
    let noisy = add_awgn(&composite_ch, &noise, p_ref)?;

    let receiver = FrameReceiver::new(plan.overlay.clone(), timing, plan.equalizer);
    let data_field = tx.stuffed.data_field.clone().expect("frame has data field");
    let (out, _windows) = receiver.receive(&noisy, data_field, delay, training_seed)?;

    let truth = &tx.log.payload_symbols;
    let output_snr_db = metrics::output_snr_db(&out.equalized_symbols, truth)?;
    let truth_idx: Vec<usize> = truth
        .iter()
        .map(|&s| decide(s, plan.overlay.modulation))
        .collect();
    let symbol_errors = out
        .decisions
        .iter()
        .zip(truth_idx.iter())
        .filter(|(a, b)| a != b)
        .count() as u64;
    let (ber, _ser) = metrics::error_rates(
        &out.payload_bits,
        &payload,
        plan.overlay.modulation.bits_per_symbol(),
    )?;
    let bit_errors = (ber * payload.len() as f64).round() as u64;

    Ok(FrameOutcome {
        output_snr_db,
        bit_errors,
        symbol_errors,
        symbols: truth.len() as u64,
        payload_bits: payload.len() as u64,
        amplitude_scale: tx.amplitude_scale,
        post_training_mse: out.post_training_mse(200),
    })
}

/// Run the full sweep. Work items are independent and execute in parallel;
/// results are aggregated in plan order.
pub fn run_sweep(plan: &SweepPlan) -> Result<Vec<SweepResult>> {
    plan.validate()?;
    let digest = plan.config_digest();
    let fs = plan.timing.sample_rate();

    // worst-case bus signal length for this plan
    let frame = CanFrame::build(
        plan.identifier,
        BitStream::zeros(plan.data_field_bits),
        plan.data_field_bits > 64,
    )?;
    let max_len = frame.to_stuffed().bits.len() * plan.timing.samples_per_bit;

    let prepared: Vec<PreparedChannel> = plan
        .channels
        .iter()
        .map(|spec| PreparedChannel::new(spec, fs, max_len))
        .collect();

    let mut items: Vec<(usize, usize, usize)> = Vec::new();
    for ci in 0..plan.channels.len() {
        for si in 0..plan.snr_points_db.len() {
            for fi in 0..plan.frames_per_point {
                items.push((ci, si, fi));
            }
        }
    }

    let outcomes: Vec<Result<FrameOutcome>> = items
        .par_iter()
        .map(|&(ci, si, fi)| {
            let seed = derive_frame_seed(plan.base_seed, ci, si, fi);
            let snr = plan.snr_points_db[si];
            run_link_frame(plan, &prepared[ci], Some(snr), seed).map_err(|e| {
                e.with_context(format!(
                    "channel {} snr {} dB frame {} seed {:#x}",
                    plan.channels[ci].kind.label(),
                    snr,
                    fi,
                    seed
                ))
            })
        })
        .collect();

    let mut results = Vec::new();
    for ci in 0..plan.channels.len() {
        for si in 0..plan.snr_points_db.len() {
            let mut snr_sum = 0.0;
            let mut bit_errors = 0u64;
            let mut symbol_errors = 0u64;
            let mut symbols = 0u64;
            for fi in 0..plan.frames_per_point {
                let idx = (ci * plan.snr_points_db.len() + si) * plan.frames_per_point + fi;
                let outcome = match &outcomes[idx] {
                    Ok(o) => o,
                    Err(e) => return Err(Error::InvalidPlan(e.to_string())),
                };
                snr_sum += outcome.output_snr_db;
                bit_errors += outcome.bit_errors;
                symbol_errors += outcome.symbol_errors;
                symbols += outcome.symbols;
            }
            results.push(SweepResult {
                channel_kind: plan.channels[ci].kind,
                input_snr_db: plan.snr_points_db[si],
                output_snr_db: snr_sum / plan.frames_per_point as f64,
                symbol_errors,
                bit_errors,
                symbols_total: symbols,
                frames: plan.frames_per_point as u32,
                seed: derive_frame_seed(plan.base_seed, ci, si, 0),
                config_digest: digest.clone(),
            });
        }
    }
    Ok(results)
}

/// Write the SNR sweep CSV: `channel,input_snr_db,mean_output_snr_db,ber`,
/// prefixed by a config-digest comment.
pub fn write_fig8_csv<W: Write>(
    results: &[SweepResult],
    plan: &SweepPlan,
    w: &mut W,
) -> std::io::Result<()> {
    writeln!(w, "# config_digest = {}", plan.config_digest())?;
    writeln!(w, "channel,input_snr_db,mean_output_snr_db,ber")?;
    let bps = plan.overlay.modulation.bits_per_symbol();
    for r in results {
        writeln!(
            w,
            "{},{},{:.4},{:.6e}",
            r.channel_kind.label(),
            r.input_snr_db,
            r.output_snr_db,
            r.ber(bps)
        )?;
    }
    Ok(())
}

/// Write the full per-point result rows.
pub fn write_results_csv<W: Write>(results: &[SweepResult], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{}", SweepResult::CSV_HEADER)?;
    for r in results {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Net-rate table rows `(data_field_bits, ratio, net_rate_bps)`.
pub fn rate_table(l_values: &[usize], overlay: &OverlayConfig) -> Vec<(usize, f64, f64)> {
    l_values
        .iter()
        .map(|&l| {
            let ratio = metrics::net_rate_ratio(
                l,
                overlay.training_bits,
                crate::frame::FRAME_OVERHEAD_BITS,
            );
            (l, ratio, metrics::net_rate_bps(ratio, overlay))
        })
        .collect()
}

/// Write the net-rate CSV: `data_field_bits,ratio,net_rate_bps`.
pub fn write_fig9_csv<W: Write>(
    rows: &[(usize, f64, f64)],
    plan: &SweepPlan,
    w: &mut W,
) -> std::io::Result<()> {
    writeln!(w, "# config_digest = {}", plan.config_digest())?;
    writeln!(w, "data_field_bits,ratio,net_rate_bps")?;
    for (l, ratio, bps) in rows {
        writeln!(w, "{l},{ratio:.6},{bps:.1}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelKind;

    #[test]
    fn default_plan_is_valid_and_round_trips_through_toml() {
        let plan = SweepPlan::default();
        plan.validate().unwrap();
        let text = plan.to_toml_string();
        let back = SweepPlan::from_toml_str(&text).unwrap();
        assert_eq!(plan, back);
        assert_eq!(plan.config_digest(), back.config_digest());
    }

    #[test]
    fn digest_changes_with_the_plan() {
        let a = SweepPlan::default();
        let b = SweepPlan {
            base_seed: a.base_seed + 1,
            ..a.clone()
        };
        assert_ne!(a.config_digest(), b.config_digest());
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let mut plan = SweepPlan::default();
        plan.snr_points_db.clear();
        assert!(plan.validate().is_err());
        let mut plan = SweepPlan::default();
        plan.frames_per_point = 0;
        assert!(plan.validate().is_err());
        let mut plan = SweepPlan::default();
        plan.noise_band_hz = (50e6, 10e6);
        assert!(plan.validate().is_err());
    }

    #[test]
    fn frame_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for ci in 0..3 {
            for si in 0..11 {
                for fi in 0..20 {
                    assert!(seen.insert(derive_frame_seed(1, ci, si, fi)));
                }
            }
        }
    }

    #[test]
    fn rate_table_rows() {
        let overlay = OverlayConfig::default();
        let rows = rate_table(&[0, 64, 128, 256, 512, 1024, 2048], &overlay);
        assert_eq!(rows[0].1, 0.0);
        for pair in rows.windows(2) {
            assert!(pair[1].1 >= pair[0].1);
        }
        let r1024 = rows.iter().find(|r| r.0 == 1024).unwrap();
        assert!((r1024.1 - 0.792).abs() < 0.001);
        assert!(r1024.2 > 100e6);
    }

    #[test]
    fn noiseless_flat_frame_is_error_free() {
        let plan = SweepPlan {
            data_field_bits: 64,
            ..SweepPlan::default()
        };
        let prepared = PreparedChannel::new(
            &ChannelSpec::flat(),
            plan.timing.sample_rate(),
            200 * plan.timing.samples_per_bit,
        );
        let outcome = run_link_frame(&plan, &prepared, None, 7).unwrap();
        assert_eq!(outcome.bit_errors, 0);
        assert_eq!(outcome.symbol_errors, 0);
        // the residual window-edge distortion keeps the noiseless output SNR
        // high but finite
        assert!(outcome.output_snr_db > 30.0, "{}", outcome.output_snr_db);
        assert!(outcome.post_training_mse < 1e-3);
    }

    #[test]
    fn tiny_sweep_is_deterministic() {
        let plan = SweepPlan {
            data_field_bits: 64,
            frames_per_point: 2,
            snr_points_db: vec![24.0],
            channels: vec![ChannelSpec::flat()],
            ..SweepPlan::default()
        };
        let a = run_sweep(&plan).unwrap();
        let b = run_sweep(&plan).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].channel_kind, ChannelKind::Flat);
        assert_eq!(a[0].frames, 2);
        let mut csv_a = Vec::new();
        write_fig8_csv(&a, &plan, &mut csv_a).unwrap();
        let mut csv_b = Vec::new();
        write_fig8_csv(&b, &plan, &mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
    }
}
