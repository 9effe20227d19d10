//! Butterworth biquad cascades, zero-phase filtering and linear resampling.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("cutoff {cutoff_hz} Hz is not below the Nyquist frequency {nyquist_hz} Hz")]
    AboveNyquist { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("invalid filter spec: {0}")]
    InvalidSpec(String),
    #[error("signal of {len} samples is too short; need more than {required}")]
    TooShort { len: usize, required: usize },
    #[error("sample rate must be positive, got {0}")]
    InvalidRate(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Bandpass,
    Lowpass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub low_hz: f64,
    pub high_hz: f64,
    /// Order of each Butterworth edge; must be even.
    pub order: usize,
    pub zero_phase: bool,
}

impl FilterSpec {
    pub fn bandpass(low_hz: f64, high_hz: f64) -> Self {
        Self {
            kind: FilterKind::Bandpass,
            low_hz,
            high_hz,
            order: 4,
            zero_phase: true,
        }
    }

    pub fn lowpass(high_hz: f64) -> Self {
        Self {
            kind: FilterKind::Lowpass,
            low_hz: 0.0,
            high_hz,
            order: 4,
            zero_phase: true,
        }
    }

    pub fn validate(&self, sample_rate_hz: f64) -> Result<(), DspError> {
        if !(sample_rate_hz > 0.0) {
            return Err(DspError::InvalidRate(sample_rate_hz));
        }
        if self.order == 0 || self.order % 2 != 0 {
            return Err(DspError::InvalidSpec(format!("order must be even and positive, got {}", self.order)));
        }
        if !(self.high_hz > self.low_hz) || self.low_hz < 0.0 {
            return Err(DspError::InvalidSpec(format!(
                "need 0 <= low < high, got {} and {}",
                self.low_hz, self.high_hz
            )));
        }
        if self.kind == FilterKind::Bandpass && self.low_hz <= 0.0 {
            return Err(DspError::InvalidSpec("bandpass needs a positive low edge".into()));
        }
        let nyquist_hz = sample_rate_hz / 2.0;
        if self.high_hz >= nyquist_hz {
            return Err(DspError::AboveNyquist {
                cutoff_hz: self.high_hz,
                nyquist_hz,
            });
        }
        Ok(())
    }
}

/// One second-order section, `H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Both poles strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        self.a2.abs() < 1.0 && self.a1.abs() < 1.0 + self.a2
    }

    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Complex response at normalised angular frequency `w` (rad/sample).
    fn response(&self, w: f64) -> (f64, f64) {
        // z^-1 = cos w - j sin w
        let (c1, s1) = (w.cos(), -w.sin());
        let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (self.b0 + self.b1 * c1 + self.b2 * c2, self.b1 * s1 + self.b2 * s2);
        let den = (1.0 + self.a1 * c1 + self.a2 * c2, self.a1 * s1 + self.a2 * s2);
        let d = den.0 * den.0 + den.1 * den.1;
        ((num.0 * den.0 + num.1 * den.1) / d, (num.1 * den.0 - num.0 * den.1) / d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
    pub gain: f64,
}

impl BiquadCascade {
    pub fn order(&self) -> usize {
        2 * self.sections.len()
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(Biquad::is_stable)
    }

    /// Single-pass magnitude response at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / sample_rate_hz;
        self.sections.iter().fold(self.gain.abs(), |acc, s| {
            let (re, im) = s.response(w);
            acc * (re * re + im * im).sqrt()
        })
    }

    /// Causal filtering, transposed direct form II. When `steady_start` is
    /// set, section states start at the steady state for a constant input
    /// equal to `x[0]`.
    pub fn filter(&self, x: &[f64], steady_start: bool) -> Vec<f64> {
        let mut y: Vec<f64> = x.iter().map(|v| v * self.gain).collect();
        let mut level = y.first().copied().unwrap_or(0.0);
        for s in &self.sections {
            let (mut z1, mut z2) = if steady_start {
                let out = s.dc_gain() * level;
                let z2 = s.b2 * level - s.a2 * out;
                let z1 = s.b1 * level - s.a1 * out + z2;
                level = out;
                (z1, z2)
            } else {
                (0.0, 0.0)
            };
            for v in y.iter_mut() {
                let xin = *v;
                let out = s.b0 * xin + z1;
                z1 = s.b1 * xin - s.a1 * out + z2;
                z2 = s.b2 * xin - s.a2 * out;
                *v = out;
            }
        }
        y
    }
}

fn butterworth_sections(order: usize, cutoff_hz: f64, sample_rate_hz: f64, highpass: bool) -> Vec<Biquad> {
    let k = (PI * cutoff_hz / sample_rate_hz).tan();
    (0..order / 2)
        .map(|i| {
            let theta = PI * (2 * i + 1) as f64 / (2 * order) as f64;
            let inv_q = 2.0 * theta.sin();
            let norm = 1.0 / (1.0 + k * inv_q + k * k);
            let a1 = 2.0 * (k * k - 1.0) * norm;
            let a2 = (1.0 - k * inv_q + k * k) * norm;
            if highpass {
                Biquad {
                    b0: norm,
                    b1: -2.0 * norm,
                    b2: norm,
                    a1,
                    a2,
                }
            } else {
                let b0 = k * k * norm;
                Biquad {
                    b0,
                    b1: 2.0 * b0,
                    b2: b0,
                    a1,
                    a2,
                }
            }
        })
        .collect()
}

/// Butterworth design via the prewarped bilinear transform.
///
/// A bandpass is a Butterworth highpass at `low_hz` cascaded with a
/// Butterworth lowpass at `high_hz`, each of `spec.order`.
pub fn design_butterworth(spec: &FilterSpec, sample_rate_hz: f64) -> Result<BiquadCascade, DspError> {
    spec.validate(sample_rate_hz)?;
    let mut sections = Vec::new();
    if spec.kind == FilterKind::Bandpass {
        sections.extend(butterworth_sections(spec.order, spec.low_hz, sample_rate_hz, true));
    }
    sections.extend(butterworth_sections(spec.order, spec.high_hz, sample_rate_hz, false));
    Ok(BiquadCascade { sections, gain: 1.0 })
}

/// Forward-backward filtering with odd reflection padding of `3 × order`
/// samples at each end. The output has the input's length and zero phase.
pub fn filtfilt(cascade: &BiquadCascade, x: &[f64]) -> Result<Vec<f64>, DspError> {
    let pad = 3 * cascade.order();
    if x.len() <= pad {
        return Err(DspError::TooShort {
            len: x.len(),
            required: pad,
        });
    }
    let n = x.len();
    let (first, last) = (x[0], x[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

    let mut y = cascade.filter(&ext, true);
    y.reverse();
    let mut y = cascade.filter(&y, true);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

/// Applies a spec at `sample_rate_hz`, honouring `zero_phase`.
pub fn apply_filter(spec: &FilterSpec, x: &[f64], sample_rate_hz: f64) -> Result<Vec<f64>, DspError> {
    let cascade = design_butterworth(spec, sample_rate_hz)?;
    if spec.zero_phase {
        filtfilt(&cascade, x)
    } else {
        Ok(cascade.filter(x, true))
    }
}

/// Linear interpolation onto a uniform grid at `to_hz`. The output holds
/// `floor(duration · to_hz)` samples; the last input sample is held at the end.
pub fn resample_linear(x: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>, DspError> {
    for r in [from_hz, to_hz] {
        if !(r > 0.0 && r.is_finite()) {
            return Err(DspError::InvalidRate(r));
        }
    }
    if from_hz == to_hz || x.is_empty() {
        return Ok(x.to_vec());
    }
    let out_len = output_len(x.len(), from_hz, to_hz);
    let step = from_hz / to_hz;
    Ok((0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let i0 = pos.floor() as usize;
            if i0 + 1 >= x.len() {
                x[x.len() - 1]
            } else {
                let frac = pos - i0 as f64;
                x[i0] + (x[i0 + 1] - x[i0]) * frac
            }
        })
        .collect())
}

/// `floor(len / from_hz · to_hz)`, tolerant of representation error when the
/// product is an exact integer.
pub fn output_len(len: usize, from_hz: f64, to_hz: f64) -> usize {
    let exact = len as f64 * to_hz / from_hz;
    (exact + 1e-9).floor() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / rate).sin()).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn lowpass_minus_3db_at_cutoff() {
        let c = design_butterworth(&FilterSpec::lowpass(1.0), 25.0).unwrap();
        let m = c.magnitude(1.0, 25.0);
        assert!((m - 0.7079).abs() / 0.7079 < 0.02, "{m}");
        assert!(c.is_stable());
    }

    #[test]
    fn bandpass_edges_and_dc() {
        let c = design_butterworth(&FilterSpec::bandpass(1.0, 50.0), 125.0).unwrap();
        assert!(c.magnitude(0.0, 125.0) < 1e-3);
        for edge in [1.0, 50.0] {
            let m = c.magnitude(edge, 125.0);
            assert!((m - 0.7079).abs() / 0.7079 < 0.02, "{edge}: {m}");
        }
        assert_eq!(c.sections.len(), 4);
        assert!(c.is_stable());
    }

    #[test]
    fn rejects_cutoff_above_nyquist() {
        assert!(matches!(
            design_butterworth(&FilterSpec::bandpass(1.0, 100.0), 125.0),
            Err(DspError::AboveNyquist { .. })
        ));
        assert!(design_butterworth(&FilterSpec::lowpass(12.5), 25.0).is_err());
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = FilterSpec::bandpass(1.0, 10.0);
        s.order = 3;
        assert!(design_butterworth(&s, 100.0).is_err());
        assert!(design_butterworth(&FilterSpec::bandpass(0.0, 10.0), 100.0).is_err());
        assert!(design_butterworth(&FilterSpec::bandpass(5.0, 2.0), 100.0).is_err());
    }

    #[test]
    fn filtfilt_removes_dc() {
        let c = design_butterworth(&FilterSpec::bandpass(1.0, 50.0), 125.0).unwrap();
        let y = filtfilt(&c, &vec![3.0; 2000]).unwrap();
        assert!(y.iter().all(|v| v.abs() < 0.03), "{}", y.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn filtfilt_passes_10hz_with_zero_lag() {
        let c = design_butterworth(&FilterSpec::bandpass(1.0, 50.0), 125.0).unwrap();
        let x = sine(10.0, 125.0, 5000, 1.0);
        let y = filtfilt(&c, &x).unwrap();
        let core = 500..4500;
        let ratio = rms(&y[core.clone()]) / rms(&x[core.clone()]);
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
        let xc = |lag: isize| -> f64 {
            core.clone()
                .map(|i| x[i] * y[(i as isize + lag) as usize])
                .sum()
        };
        let best = (-6..=6).max_by(|a, b| xc(*a).partial_cmp(&xc(*b)).unwrap()).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn filtfilt_too_short() {
        let c = design_butterworth(&FilterSpec::lowpass(1.0), 25.0).unwrap();
        assert!(matches!(filtfilt(&c, &[1.0; 6]), Err(DspError::TooShort { .. })));
    }

    #[test]
    fn filtfilt_output_length_matches() {
        let c = design_butterworth(&FilterSpec::lowpass(1.0), 25.0).unwrap();
        assert_eq!(filtfilt(&c, &vec![0.5; 37]).unwrap().len(), 37);
    }

    #[test]
    fn lowpass_attenuates_twice_cutoff_by_40db() {
        let c = design_butterworth(&FilterSpec::lowpass(1.0), 25.0).unwrap();
        let x = sine(2.0, 25.0, 4000, 1.0);
        let y = filtfilt(&c, &x).unwrap();
        let db = 20.0 * (rms(&y[500..3500]) / rms(&x[500..3500])).log10();
        assert!(db <= -40.0, "{db}");
    }

    #[test]
    fn resample_identity_constant_and_sine() {
        let x = sine(1.0, 125.0, 1250, 1.0);
        assert_eq!(resample_linear(&x, 125.0, 125.0).unwrap(), x);
        let c = resample_linear(&[2.5; 100], 10.0, 25.0).unwrap();
        assert_eq!(c.len(), 250);
        assert!(c.iter().all(|&v| v == 2.5));
        let y = resample_linear(&x, 125.0, 25.0).unwrap();
        assert_eq!(y.len(), 250);
        let truth = sine(1.0, 25.0, 250, 1.0);
        let err: Vec<f64> = y.iter().zip(&truth).map(|(a, b)| a - b).collect();
        assert!(rms(&err) < 0.01);
        assert!(resample_linear(&x, 0.0, 25.0).is_err());
        assert!(resample_linear(&x, 125.0, -1.0).is_err());
    }
}
