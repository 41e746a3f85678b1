//! Shared DSP primitives: Kaiser-windowed FIR design, root-raised-cosine
//! taps, FFT-based convolution and simple spectral measurements.

use num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;

/// Zeroth-order modified Bessel function of the first kind, by power series.
pub fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_x2 = (x / 2.0) * (x / 2.0);
    for k in 1..64 {
        term *= half_x2 / ((k * k) as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser window of length `n` with shape parameter `beta`.
pub fn kaiser_window(n: usize, beta: f64) -> Vec<f64> {
    let denom = bessel_i0(beta);
    let alpha = (n - 1) as f64 / 2.0;
    (0..n)
        .map(|i| {
            let r = (i as f64 - alpha) / alpha;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

/// Kaiser-windowed linear-phase FIR bandpass. `f_lo`/`f_hi` are the -6 dB
/// cutoff frequencies in Hz. `n` must be odd so the group delay is an integer
/// number of samples.
pub fn fir_bandpass(n: usize, f_lo: f64, f_hi: f64, sample_rate: f64, beta: f64) -> Vec<f64> {
    assert!(n % 2 == 1, "tap count must be odd");
    assert!(0.0 < f_lo && f_lo < f_hi && f_hi < sample_rate / 2.0);
    let w1 = 2.0 * PI * f_lo / sample_rate;
    let w2 = 2.0 * PI * f_hi / sample_rate;
    let window = kaiser_window(n, beta);
    let mid = (n - 1) as f64 / 2.0;
    (0..n)
        .map(|i| {
            let x = i as f64 - mid;
            let ideal = if x == 0.0 {
                (w2 - w1) / PI
            } else {
                ((w2 * x).sin() - (w1 * x).sin()) / (PI * x)
            };
            ideal * window[i]
        })
        .collect()
}

/// Root-raised-cosine taps: roll-off `rolloff`, truncated to `span` symbols at
/// `sps` samples per symbol. Returns `span * sps + 1` taps peaked at the
/// center; no normalization is applied.
pub fn rrc_taps(rolloff: f64, span: usize, sps: usize) -> Vec<f64> {
    assert!(rolloff > 0.0 && rolloff <= 1.0);
    let num = span * sps + 1;
    let mid = (num - 1) as f64 / 2.0;
    (0..num)
        .map(|i| {
            let t = (i as f64 - mid) / sps as f64;
            if t == 0.0 {
                1.0 - rolloff + 4.0 * rolloff / PI
            } else if (t.abs() - 1.0 / (4.0 * rolloff)).abs() < 1e-9 {
                (rolloff / 2.0f64.sqrt())
                    * ((1.0 + 2.0 / PI) * (PI / (4.0 * rolloff)).sin()
                        + (1.0 - 2.0 / PI) * (PI / (4.0 * rolloff)).cos())
            } else {
                let four_bt = 4.0 * rolloff * t;
                ((PI * t * (1.0 - rolloff)).sin() + four_bt * (PI * t * (1.0 + rolloff)).cos())
                    / (PI * t * (1.0 - four_bt * four_bt))
            }
        })
        .collect()
}

fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// Full linear convolution of a real signal with real taps via FFT.
/// Output length is `x.len() + h.len() - 1`.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let out_len = x.len() + h.len() - 1;
    let nfft = next_pow2(out_len);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(nfft);
    let inv = planner.plan_fft_inverse(nfft);

    let mut fx: Vec<Complex64> = x
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::ZERO))
        .take(nfft)
        .collect();
    let mut fh: Vec<Complex64> = h
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::ZERO))
        .take(nfft)
        .collect();
    fwd.process(&mut fx);
    fwd.process(&mut fh);
    for (a, b) in fx.iter_mut().zip(fh.iter()) {
        *a *= b;
    }
    inv.process(&mut fx);
    let scale = 1.0 / nfft as f64;
    fx[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Apply a frequency response `h(f)` to a real signal in the frequency
/// domain with linear-convolution semantics. The response is evaluated on
/// the non-negative half of the FFT grid and mirrored conjugate-symmetric.
/// Output length is `x.len() + tail`.
pub fn apply_frequency_response<F>(x: &[f64], sample_rate: f64, tail: usize, h: F) -> Vec<f64>
where
    F: Fn(f64) -> Complex64,
{
    let out_len = x.len() + tail;
    let nfft = next_pow2(out_len);
    let grid = response_grid(sample_rate, nfft, h);
    apply_response_grid(x, &grid, out_len)
}

/// Evaluate a frequency response on a conjugate-symmetric FFT grid.
pub fn response_grid<F>(sample_rate: f64, nfft: usize, h: F) -> Vec<Complex64>
where
    F: Fn(f64) -> Complex64,
{
    let mut grid = vec![Complex64::ZERO; nfft];
    for (k, g) in grid.iter_mut().enumerate().take(nfft / 2 + 1) {
        *g = h(k as f64 * sample_rate / nfft as f64);
    }
    for k in nfft / 2 + 1..nfft {
        grid[k] = grid[nfft - k].conj();
    }
    grid
}

/// Multiply a real signal by a precomputed response grid; `out_len` must not
/// exceed the grid length.
pub fn apply_response_grid(x: &[f64], grid: &[Complex64], out_len: usize) -> Vec<f64> {
    let nfft = grid.len();
    assert!(out_len <= nfft && x.len() <= nfft);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(nfft);
    let inv = planner.plan_fft_inverse(nfft);
    let mut fx: Vec<Complex64> = x
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::ZERO))
        .take(nfft)
        .collect();
    fwd.process(&mut fx);
    for (a, b) in fx.iter_mut().zip(grid.iter()) {
        *a *= b;
    }
    inv.process(&mut fx);
    let scale = 1.0 / nfft as f64;
    fx[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Mean power of `x` restricted to the band `[f_lo, f_hi]`, estimated from a
/// single periodogram.
pub fn band_power(x: &[f64], sample_rate: f64, f_lo: f64, f_hi: f64) -> f64 {
    let nfft = next_pow2(x.len());
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(nfft);
    let mut fx: Vec<Complex64> = x
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::ZERO))
        .take(nfft)
        .collect();
    fwd.process(&mut fx);
    let df = sample_rate / nfft as f64;
    let k_lo = (f_lo / df).ceil() as usize;
    let k_hi = ((f_hi / df).floor() as usize).min(nfft / 2);
    let mut acc = 0.0;
    for k in k_lo..=k_hi {
        let w = if k == 0 || k == nfft / 2 { 1.0 } else { 2.0 };
        acc += w * fx[k].norm_sqr();
    }
    acc / (nfft as f64 * x.len() as f64)
}

/// Magnitude of a filter's frequency response at `f`, from its taps.
pub fn tap_response(taps: &[f64], sample_rate: f64, f: f64) -> Complex64 {
    let w = 2.0 * PI * f / sample_rate;
    taps.iter()
        .enumerate()
        .map(|(n, &h)| Complex64::from_polar(h, -w * n as f64))
        .sum()
}
