//! Butterworth band-pass design and zero-phase filtering.
//!
//! The digital filter comes from the analog Butterworth low-pass prototype:
//! low-pass to band-pass substitution around pre-warped band edges, then the
//! bilinear transform. An order-`N` design yields `N` second-order sections,
//! each with numerator `g * (1 - z^-2)` (one zero at DC, one at Nyquist).

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::PreprocessError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSpec {
    pub order: usize,
    pub passband_low_hz: f64,
    pub passband_high_hz: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            order: 3,
            passband_low_hz: 0.01,
            passband_high_hz: 0.09,
        }
    }
}

/// One second-order section, `a[0] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + z_inv * self.b[1] + z2 * self.b[2]) / (self.a[0] + z_inv * self.a[1] + z2 * self.a[2])
    }

    /// Direct form II transposed state after an infinitely long unit input.
    fn step_state(&self) -> ([f64; 2], f64) {
        let [b0, b1, b2] = self.b;
        let [a0, a1, a2] = self.a;
        debug_assert_eq!(a0, 1.0);
        let gain = (b0 + b1 + b2) / (1.0 + a1 + a2);
        ([gain - b0, b2 - a2 * gain], gain)
    }
}

/// Designs the band-pass cascade for `spec` at `sample_rate_hz`.
pub fn butterworth_coefficients(
    spec: &FilterSpec,
    sample_rate_hz: f64,
) -> Result<Vec<Biquad>, PreprocessError> {
    let invalid = |reason| PreprocessError::InvalidBand {
        low_hz: spec.passband_low_hz,
        high_hz: spec.passband_high_hz,
        sample_rate_hz,
        reason,
    };
    let (lo, hi, fs) = (spec.passband_low_hz, spec.passband_high_hz, sample_rate_hz);
    if spec.order == 0 {
        return Err(invalid("order must be at least 1"));
    }
    if !(fs.is_finite() && fs > 0.0) {
        return Err(invalid("sample rate must be positive"));
    }
    if !(lo > 0.0 && lo < hi && hi < fs / 2.0) {
        return Err(invalid("need 0 < low < high < sample_rate / 2"));
    }

    let fs2 = 2.0 * fs;
    let w_lo = fs2 * (PI * lo / fs).tan();
    let w_hi = fs2 * (PI * hi / fs).tan();
    let bw = w_hi - w_lo;
    if !(bw.is_finite() && bw > 1e-9 * w_hi) {
        return Err(invalid("pre-warped band edges collapse"));
    }
    let w0_sq = w_lo * w_hi;
    let n = spec.order;

    let mut poles = Vec::with_capacity(2 * n);
    for k in 0..n {
        let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let pb = p * bw;
        let disc = (pb * pb - 4.0 * w0_sq).sqrt();
        for s in [(pb + disc) / 2.0, (pb - disc) / 2.0] {
            poles.push((fs2 + s) / (fs2 - s));
        }
    }

    // Analog gain bw^N, N zeros at s = 0 and N at infinity.
    let denom: Complex64 = poles
        .iter()
        .map(|&z| {
            // fs2 - s expressed through the digital pole z = (fs2 + s)/(fs2 - s)
            2.0 * fs2 / (z + 1.0)
        })
        .product();
    let gain = (Complex64::new(bw.powi(n as i32) * fs2.powi(n as i32), 0.0) / denom).re;

    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|z| z.im > 1e-14).collect();
    let mut real: Vec<f64> = poles
        .iter()
        .filter(|z| z.im.abs() <= 1e-14)
        .map(|z| z.re)
        .collect();
    if complex.len() * 2 + real.len() != poles.len() || real.len() % 2 != 0 {
        return Err(invalid("could not pair poles into sections"));
    }
    complex.sort_by(|a, b| a.im.total_cmp(&b.im));
    real.sort_by(f64::total_cmp);

    let mut denominators: Vec<[f64; 3]> = complex
        .iter()
        .map(|z| [1.0, -2.0 * z.re, z.norm_sqr()])
        .collect();
    denominators.extend(real.chunks(2).map(|r| [1.0, -(r[0] + r[1]), r[0] * r[1]]));

    let share = gain.abs().powf(1.0 / n as f64);
    Ok(denominators
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            let g = if i == 0 { share * gain.signum() } else { share };
            Biquad {
                b: [g, 0.0, -g],
                a,
            }
        })
        .collect())
}

/// Complex response of the cascade at `freq_hz`.
pub fn frequency_response(cascade: &[Biquad], freq_hz: f64, sample_rate_hz: f64) -> Complex64 {
    let omega = 2.0 * PI * freq_hz / sample_rate_hz;
    let z_inv = Complex64::from_polar(1.0, -omega);
    cascade
        .iter()
        .map(|s| s.response(z_inv))
        .product()
}

/// Reflection length used by [`filtfilt`] on each end: `3 * 2 * sections`.
pub fn padding_len(cascade: &[Biquad]) -> usize {
    3 * 2 * cascade.len()
}

/// Causal pass through the cascade, starting from the steady state of a
/// constant input equal to `x[0]`.
fn sosfilt(x: &mut [f64], cascade: &[Biquad]) {
    let Some(&x0) = x.first() else { return };
    let mut states = Vec::with_capacity(cascade.len());
    let mut level = x0;
    for s in cascade {
        let (zi, gain) = s.step_state();
        states.push([zi[0] * level, zi[1] * level]);
        level *= gain;
    }
    for v in x.iter_mut() {
        let mut u = *v;
        for (s, st) in cascade.iter().zip(states.iter_mut()) {
            let y = s.b[0] * u + st[0];
            st[0] = s.b[1] * u - s.a[1] * y + st[1];
            st[1] = s.b[2] * u - s.a[2] * y;
            u = y;
        }
        *v = u;
    }
}

fn forward_backward(mut v: Vec<f64>, cascade: &[Biquad]) -> Vec<f64> {
    sosfilt(&mut v, cascade);
    v.reverse();
    sosfilt(&mut v, cascade);
    v.reverse();
    v
}

/// Zero-phase filtering.
///
/// The input is extended on both ends by odd reflection ([`padding_len`]
/// samples). The result is the mean of the forward-backward and the
/// backward-forward passes over the extension, trimmed back to the input
/// length. Averaging both orders makes the operator commute exactly with
/// time reversal, edge transients included.
pub fn filtfilt(x: &[f64], cascade: &[Biquad]) -> Result<Vec<f64>, PreprocessError> {
    let n = x.len();
    let pad = padding_len(cascade);
    if n <= pad {
        return Err(PreprocessError::SeriesTooShort { len: n, min: pad });
    }
    let (first, last) = (x[0], x[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|k| 2.0 * first - x[k]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|k| 2.0 * last - x[n - 1 - k]));

    let fb = forward_backward(ext.clone(), cascade);
    ext.reverse();
    let mut bf = forward_backward(ext, cascade);
    bf.reverse();

    Ok(fb[pad..pad + n]
        .iter()
        .zip(&bf[pad..pad + n])
        .map(|(p, q)| 0.5 * (p + q))
        .collect())
}
