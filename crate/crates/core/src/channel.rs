//! Bus channel models and noise injection.
//!
//! Three channels are provided: `Flat` (identity), `ChannelA` (a worst-case
//! 100 m twisted-pair run with √f-plus-linear insertion loss and linear
//! phase) and `ChannelB` (the same line loaded by high-impedance node taps on
//! short stubs, evaluated as an ABCD two-port cascade). AWGN is calibrated
//! against the post-channel overlay power inside a declared noise band.

use crate::dsp;
use crate::error::{Error, Result};
use crate::waveform::Waveform;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_10, PI};
use std::sync::Arc;

/// Speed of light in vacuum, m/s.
const C0: f64 = 299_792_458.0;
/// Extra samples appended past the bulk delay to hold the dispersive tail.
const DISPERSION_TAIL: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelKind {
    #[serde(rename = "flat")]
    Flat,
    #[serde(rename = "channel_a")]
    ChannelA,
    #[serde(rename = "channel_b")]
    ChannelB,
}

impl ChannelKind {
    pub fn label(self) -> &'static str {
        match self {
            ChannelKind::Flat => "flat",
            ChannelKind::ChannelA => "channel_a",
            ChannelKind::ChannelB => "channel_b",
        }
    }
}

/// Physical description of a bus channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    /// End-to-end cable length, meters.
    pub length_m: f64,
    /// Number of interior node taps (ChannelB).
    pub tap_count: usize,
    /// Spacing between taps, meters.
    pub tap_spacing_m: f64,
    /// Stub feed-line length per tap, meters.
    pub stub_len_m: f64,
    /// Node input impedance terminating each stub, ohms.
    pub tap_load_ohm: f64,
    /// Cable loss coefficient on √f, dB per 100 m with f in MHz.
    pub k1_db: f64,
    /// Cable loss coefficient on f, dB per 100 m with f in MHz.
    pub k2_db: f64,
    /// Characteristic impedance, ohms.
    pub z0_ohm: f64,
    /// Propagation velocity as a fraction of c.
    pub velocity_factor: f64,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        Self {
            kind: ChannelKind::Flat,
            length_m: 100.0,
            tap_count: 9,
            tap_spacing_m: 10.0,
            stub_len_m: 0.3,
            tap_load_ohm: 20e3,
            k1_db: 2.32,
            k2_db: 0.238,
            z0_ohm: 100.0,
            velocity_factor: 0.6,
        }
    }
}

impl ChannelSpec {
    pub fn flat() -> Self {
        Self::default()
    }

    pub fn channel_a() -> Self {
        Self {
            kind: ChannelKind::ChannelA,
            ..Self::default()
        }
    }

    pub fn channel_b() -> Self {
        Self {
            kind: ChannelKind::ChannelB,
            ..Self::default()
        }
    }

    /// Bulk propagation delay, seconds.
    pub fn bulk_delay_s(&self) -> f64 {
        match self.kind {
            ChannelKind::Flat => 0.0,
            _ => self.length_m / (self.velocity_factor * C0),
        }
    }

    pub fn bulk_delay_samples(&self, sample_rate: f64) -> f64 {
        self.bulk_delay_s() * sample_rate
    }

    /// Cable insertion loss in dB for the full length at frequency `f` Hz.
    fn cable_loss_db(&self, f: f64) -> f64 {
        let f_mhz = f / 1e6;
        (self.length_m / 100.0) * (self.k1_db * f_mhz.sqrt() + self.k2_db * f_mhz)
    }

    /// Attenuation constant, nepers per meter.
    fn alpha_np_per_m(&self, f: f64) -> f64 {
        let f_mhz = f / 1e6;
        (self.k1_db * f_mhz.sqrt() + self.k2_db * f_mhz) / 100.0 * LN_10 / 20.0
    }

    /// Phase constant, radians per meter.
    fn beta_rad_per_m(&self, f: f64) -> f64 {
        2.0 * PI * f / (self.velocity_factor * C0)
    }

    /// Complex frequency response at `f` Hz.
    pub fn response(&self, f: f64) -> Complex64 {
        match self.kind {
            ChannelKind::Flat => Complex64::new(1.0, 0.0),
            ChannelKind::ChannelA => channel_a_response(f, self),
            ChannelKind::ChannelB => channel_b_response(f, self),
        }
    }
}

/// End-to-end line response: √f-plus-linear insertion loss with linear phase
/// (a pure bulk delay).
pub fn channel_a_response(f: f64, spec: &ChannelSpec) -> Complex64 {
    let mag = 10f64.powf(-spec.cable_loss_db(f) / 20.0);
    let phase = -2.0 * PI * f * spec.bulk_delay_s();
    Complex64::from_polar(mag, phase)
}

/// Tapped-bus response: an ABCD cascade of line segments with a high-impedance
/// stub shunted at each interior junction, matched source and load, normalized
/// so a lossless stub-free line gives unit magnitude.
pub fn channel_b_response(f: f64, spec: &ChannelSpec) -> Complex64 {
    if f == 0.0 {
        // tanh(0) = 0 collapses every stub to its resistive load
        return channel_b_dc(spec);
    }
    let z0 = Complex64::new(spec.z0_ohm, 0.0);
    let gamma = Complex64::new(spec.alpha_np_per_m(f), spec.beta_rad_per_m(f));
    let segments = spec.tap_count + 1;
    let seg_len = spec.length_m / segments as f64;

    let seg = abcd_line(gamma, z0, seg_len);
    let stub = if spec.tap_count > 0 {
        let zl = Complex64::new(spec.tap_load_ohm, 0.0);
        let t = (gamma * spec.stub_len_m).tanh();
        let zin = z0 * (zl + z0 * t) / (z0 + zl * t);
        abcd_shunt(zin)
    } else {
        ABCD_IDENTITY
    };

    let mut m = seg;
    for _ in 0..spec.tap_count {
        m = abcd_mul(m, stub);
        m = abcd_mul(m, seg);
    }
    transfer_matched(m, z0)
}

fn channel_b_dc(spec: &ChannelSpec) -> Complex64 {
    let z0 = Complex64::new(spec.z0_ohm, 0.0);
    let mut m = ABCD_IDENTITY;
    if spec.tap_count > 0 {
        let stub = abcd_shunt(Complex64::new(spec.tap_load_ohm, 0.0));
        for _ in 0..spec.tap_count {
            m = abcd_mul(m, stub);
        }
    }
    transfer_matched(m, z0)
}

type Abcd = [Complex64; 4];

const ABCD_IDENTITY: Abcd = [
    Complex64::new(1.0, 0.0),
    Complex64::new(0.0, 0.0),
    Complex64::new(0.0, 0.0),
    Complex64::new(1.0, 0.0),
];

fn abcd_line(gamma: Complex64, z0: Complex64, len_m: f64) -> Abcd {
    let gl = gamma * len_m;
    let ch = gl.cosh();
    let sh = gl.sinh();
    [ch, z0 * sh, sh / z0, ch]
}

fn abcd_shunt(z: Complex64) -> Abcd {
    [
        Complex64::new(1.0, 0.0),
        Complex64::new(0.0, 0.0),
        z.inv(),
        Complex64::new(1.0, 0.0),
    ]
}

fn abcd_mul(x: Abcd, y: Abcd) -> Abcd {
    [
        x[0] * y[0] + x[1] * y[2],
        x[0] * y[1] + x[1] * y[3],
        x[2] * y[0] + x[3] * y[2],
        x[2] * y[1] + x[3] * y[3],
    ]
}

/// Source-EMF-to-load transfer of an ABCD network between matched Z0
/// terminations, scaled by 2 so an ideal line has unit magnitude.
fn transfer_matched(m: Abcd, z0: Complex64) -> Complex64 {
    let denom = m[0] * z0 + m[1] + m[2] * z0 * z0 + m[3] * z0;
    2.0 * z0 / denom
}

/// A channel with its frequency-response grid prepared for a fixed FFT size,
/// so repeated frames avoid re-evaluating the two-port cascade.
pub struct PreparedChannel {
    pub spec: ChannelSpec,
    sample_rate: f64,
    nfft: usize,
    grid: Vec<Complex64>,
    fwd: Arc<dyn rustfft::Fft<f64>>,
    inv: Arc<dyn rustfft::Fft<f64>>,
}

impl PreparedChannel {
    /// Prepare for inputs up to `max_input_len` samples.
    pub fn new(spec: &ChannelSpec, sample_rate: f64, max_input_len: usize) -> Self {
        let tail = output_tail(spec, sample_rate);
        let nfft = (max_input_len + tail).next_power_of_two();
        let grid = dsp::response_grid(sample_rate, nfft, |f| spec.response(f));
        let mut planner = FftPlanner::new();
        Self {
            spec: spec.clone(),
            sample_rate,
            nfft,
            grid,
            fwd: planner.plan_fft_forward(nfft),
            inv: planner.plan_fft_inverse(nfft),
        }
    }

    /// Frequency-domain application with linear-convolution semantics.
    pub fn apply(&self, x: &Waveform) -> Waveform {
        if self.spec.kind == ChannelKind::Flat {
            return x.clone();
        }
        let out_len = x.len() + output_tail(&self.spec, self.sample_rate);
        assert!(out_len <= self.nfft, "input longer than prepared size");
        let mut fx: Vec<Complex64> = x
            .samples
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .chain(std::iter::repeat(Complex64::ZERO))
            .take(self.nfft)
            .collect();
        self.fwd.process(&mut fx);
        for (a, b) in fx.iter_mut().zip(self.grid.iter()) {
            *a *= b;
        }
        self.inv.process(&mut fx);
        let scale = 1.0 / self.nfft as f64;
        Waveform::new(
            fx[..out_len].iter().map(|c| c.re * scale).collect(),
            self.sample_rate,
        )
    }
}

fn output_tail(spec: &ChannelSpec, sample_rate: f64) -> usize {
    match spec.kind {
        ChannelKind::Flat => 0,
        _ => spec.bulk_delay_samples(sample_rate).ceil() as usize + DISPERSION_TAIL,
    }
}

/// One-shot channel application.
pub fn apply_channel(x: &Waveform, spec: &ChannelSpec) -> Waveform {
    PreparedChannel::new(spec, x.sample_rate, x.len()).apply(x)
}

/// AWGN description: target SNR, seed and the band over which the SNR is
/// defined. `input_snr_db = None` disables noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub input_snr_db: Option<f64>,
    pub rng_seed: u64,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
}

impl NoiseSpec {
    /// Noiseless spec used for loopback checks.
    pub fn disabled() -> Self {
        Self {
            input_snr_db: None,
            rng_seed: 0,
            band_low_hz: 6e6,
            band_high_hz: 42e6,
        }
    }

    pub fn bandwidth_hz(&self) -> f64 {
        self.band_high_hz - self.band_low_hz
    }
}

/// Add white Gaussian noise so that the in-band noise power relates to
/// `signal_power_ref` by the requested SNR:
/// `signal_power_ref / (noise power inside the band) = 10^(snr/10)`.
pub fn add_awgn(x: &Waveform, noise: &NoiseSpec, signal_power_ref: f64) -> Result<Waveform> {
    let Some(snr_db) = noise.input_snr_db else {
        return Ok(x.clone());
    };
    if signal_power_ref <= 0.0 {
        return Err(Error::NonPositiveNoiseReference(signal_power_ref));
    }
    let fs = x.sample_rate;
    let bw = noise.bandwidth_hz();
    assert!(
        noise.band_low_hz >= 0.0 && noise.band_high_hz <= fs / 2.0 && bw > 0.0,
        "noise band must sit inside (0, fs/2)"
    );
    // white noise of variance s2 carries s2 * bw / (fs/2) watts in the band
    let snr_lin = 10f64.powf(snr_db / 10.0);
    let sigma2 = signal_power_ref * (fs / 2.0) / (snr_lin * bw);
    let sigma = sigma2.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
    let normal = StandardNormal;
    let samples = x
        .samples
        .iter()
        .map(|&v| v + sigma * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng))
        .collect();
    Ok(Waveform::new(samples, fs))
}
