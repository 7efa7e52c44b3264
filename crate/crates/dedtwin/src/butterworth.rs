//! Second-order low-pass Butterworth smoothing.
//!
//! Coefficients come from the analog prototype `H(s) = 1/(s² + √2·s + 1)`
//! mapped to the z-domain by the bilinear transform with frequency
//! pre-warping, so the digital cutoff lands exactly where requested:
//!
//! ```text
//! ω  = tan(π·fc/fs)
//! Δ  = 1 + √2·ω + ω²
//! b0 = ω²/Δ     b1 = 2·b0      b2 = b0
//! a1 = 2(ω² − 1)/Δ             a2 = (1 − √2·ω + ω²)/Δ
//! ```
//!
//! The numerator `(1 + z⁻¹)²` pins a double zero at Nyquist and the
//! construction gives unit DC gain to machine precision. Filtering is causal
//! with zero initial state (Direct Form II transposed).

use serde::{Deserialize, Serialize};

use crate::{ensure_finite, Error, Result};

/// Normalized biquad coefficients (`a0 = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiquadCoeffs {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl BiquadCoeffs {
    /// Gain at DC, `(b0+b1+b2)/(1+a1+a2)`.
    pub fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Magnitude response at `freq_hz` for data sampled at `sample_rate_hz`.
    pub fn magnitude(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq_hz / sample_rate_hz;
        let (c1, s1) = (w.cos(), w.sin());
        let (c2, s2) = ((2.0 * w).cos(), (2.0 * w).sin());
        // H(e^{-jw}) evaluated as complex num/den with hand-carried parts.
        let num_re = self.b0 + self.b1 * c1 + self.b2 * c2;
        let num_im = -(self.b1 * s1 + self.b2 * s2);
        let den_re = 1.0 + self.a1 * c1 + self.a2 * c2;
        let den_im = -(self.a1 * s1 + self.a2 * s2);
        (num_re * num_re + num_im * num_im).sqrt() / (den_re * den_re + den_im * den_im).sqrt()
    }
}

/// Designs the 2nd-order low-pass for `cutoff_hz` at `sample_rate_hz`.
///
/// Requires `0 < cutoff < sample_rate/2`.
pub fn design(cutoff_hz: f64, sample_rate_hz: f64) -> Result<BiquadCoeffs> {
    ensure_finite("cutoff_hz", cutoff_hz)?;
    ensure_finite("sample_rate_hz", sample_rate_hz)?;
    if sample_rate_hz <= 0.0 {
        return Err(Error::Param(format!(
            "sample rate must be positive, got {sample_rate_hz}"
        )));
    }
    let nyquist = sample_rate_hz / 2.0;
    if cutoff_hz <= 0.0 || cutoff_hz >= nyquist {
        return Err(Error::Param(format!(
            "cutoff {cutoff_hz} Hz outside (0, {nyquist}) Hz"
        )));
    }
    let w = (std::f64::consts::PI * cutoff_hz / sample_rate_hz).tan();
    let sqrt2 = std::f64::consts::SQRT_2;
    let d = 1.0 + sqrt2 * w + w * w;
    let b0 = w * w / d;
    Ok(BiquadCoeffs {
        b0,
        b1: 2.0 * b0,
        b2: b0,
        a1: 2.0 * (w * w - 1.0) / d,
        a2: (1.0 - sqrt2 * w + w * w) / d,
    })
}

/// Runs the biquad causally over `series` with zero initial state.
pub fn filter_series(coeffs: &BiquadCoeffs, series: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for &x in series {
        let y = coeffs.b0 * x + s1;
        s1 = coeffs.b1 * x - coeffs.a1 * y + s2;
        s2 = coeffs.b2 * x - coeffs.a2 * y;
        out.push(y);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent design route: place the two analog prototype poles with
    /// complex arithmetic, scale by the pre-warped cutoff, bilinear-map each
    /// pole to the z-plane, and expand the conjugate pair into a real
    /// quadratic. Shares no code with `design`.
    fn pole_route(cutoff_hz: f64, sample_rate_hz: f64) -> BiquadCoeffs {
        let w = (std::f64::consts::PI * cutoff_hz / sample_rate_hz).tan();
        // Butterworth prototype poles: exp(j·3π/4) and its conjugate.
        let (pr, pi) = (
            w * (3.0 * std::f64::consts::FRAC_PI_4).cos(),
            w * (3.0 * std::f64::consts::FRAC_PI_4).sin(),
        );
        // z = (1 + p) / (1 - p) for p = pr + j·pi.
        let den = (1.0 - pr) * (1.0 - pr) + pi * pi;
        let zr = (1.0 - pr * pr - pi * pi) / den;
        let zi = 2.0 * pi / den;
        // (z - z0)(z - conj(z0)) = z² - 2·Re(z0)·z + |z0|².
        let a1 = -2.0 * zr;
        let a2 = zr * zr + zi * zi;
        // Numerator w²·(1+z⁻¹)² scaled by 1/((1-p)(1-p̄)) = 1/den.
        let b0 = w * w / den;
        BiquadCoeffs {
            b0,
            b1: 2.0 * b0,
            b2: b0,
            a1,
            a2,
        }
    }

    #[test]
    fn coefficients_match_expanded_form() {
        let c = design(1.0, 50.0).unwrap();
        assert!((c.b0 - 0.003621681514928642).abs() < 1e-15);
        assert!((c.b1 - 0.007243363029857284).abs() < 1e-15);
        assert!((c.b2 - 0.003621681514928642).abs() < 1e-15);
        assert!((c.a1 - -1.8226949251963083).abs() < 1e-15);
        assert!((c.a2 - 0.8371816512560226).abs() < 1e-15);
    }

    #[test]
    fn coefficients_match_pole_placement_route() {
        for (fc, fs) in [(1.0, 50.0), (0.2, 50.0), (5.0, 44.1), (0.45, 2.0)] {
            let a = design(fc, fs).unwrap();
            let b = pole_route(fc, fs);
            for (x, y) in [
                (a.b0, b.b0),
                (a.b1, b.b1),
                (a.b2, b.b2),
                (a.a1, b.a1),
                (a.a2, b.a2),
            ] {
                assert!((x - y).abs() < 1e-9, "fc={fc} fs={fs}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn unit_dc_gain_and_half_power_cutoff() {
        for ratio in [0.01, 0.04, 0.1, 0.25, 0.45] {
            let fs = 50.0;
            let fc = ratio * fs / 2.0;
            let c = design(fc, fs).unwrap();
            assert!((c.dc_gain() - 1.0).abs() < 1e-9, "ratio {ratio}");
            let db = 20.0 * c.magnitude(fc, fs).log10();
            assert!((db + 3.0103).abs() < 0.1, "ratio {ratio}: {db} dB");
        }
    }

    #[test]
    fn rejects_cutoff_outside_open_interval() {
        assert!(matches!(design(0.0, 50.0), Err(Error::Param(_))));
        assert!(matches!(design(25.0, 50.0), Err(Error::Param(_))));
        assert!(matches!(design(1.0, -1.0), Err(Error::Param(_))));
    }

    #[test]
    fn constant_input_converges_to_same_constant() {
        let c = design(1.0, 50.0).unwrap();
        let out = filter_series(&c, &vec![7.5; 4000]);
        assert_eq!(out.len(), 4000);
        assert!((out.last().unwrap() - 7.5).abs() < 1e-9);
        // Causal with zero state: first output is tiny, not 7.5.
        assert!(out[0].abs() < 0.1);
    }

    #[test]
    fn step_response_is_monotone_rise_to_dc() {
        let c = design(2.0, 50.0).unwrap();
        let out = filter_series(&c, &vec![1.0; 500]);
        assert!(out[499] > 0.999 && out[499] < 1.01);
    }
}
