//! Second-order-section IIR filters and zero-phase application.
//!
//! Every dataset goes through the same chain before alignment: a biquad notch at
//! the power-line frequency followed by a Butterworth bandpass. Both are applied
//! forward and backward so evoked responses keep their latency.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{EadError, Result};
use crate::signal::Recording;

/// One biquad, `H(z) = (b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    /// `a[0]` is always 1.
    pub a: [f64; 3],
}

impl Biquad {
    pub const IDENTITY: Biquad = Biquad {
        b: [1.0, 0.0, 0.0],
        a: [1.0, 0.0, 0.0],
    };

    /// Both poles strictly inside the unit circle (Jury conditions for a quadratic).
    pub fn is_stable(&self) -> bool {
        let [_, a1, a2] = self.a;
        a2.abs() < 1.0 && a1.abs() < 1.0 + a2
    }

    pub fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let num = self.b[0] + zi * (self.b[1] + zi * self.b[2]);
        let den = self.a[0] + zi * (self.a[1] + zi * self.a[2]);
        num / den
    }

    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }

    /// Transposed direct-form II state that a unit step reaches at steady state.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z1 = self.b[2] - self.a[2] * g;
        let z0 = self.b[1] - self.a[1] * g + z1;
        [z0, z1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FilterDesign {
    Identity,
    Notch { center_hz: f64, quality: f64 },
    Bandpass { low_hz: f64, high_hz: f64, order: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SosChain {
    sections: Vec<Biquad>,
    design: FilterDesign,
    sample_rate_hz: f64,
}

impl SosChain {
    pub fn new(sections: Vec<Biquad>, design: FilterDesign, sample_rate_hz: f64) -> Result<Self> {
        if sections.is_empty() {
            return Err(EadError::Domain("filter chain needs at least one section".into()));
        }
        for (i, s) in sections.iter().enumerate() {
            if s.b.iter().chain(&s.a).any(|v| !v.is_finite()) {
                return Err(EadError::Numeric(format!("section {i} has non-finite coefficients")));
            }
            if s.a[0] != 1.0 {
                return Err(EadError::Domain(format!("section {i} is not normalized (a0 != 1)")));
            }
            if !s.is_stable() {
                return Err(EadError::Domain(format!("section {i} is unstable")));
            }
        }
        Ok(SosChain {
            sections,
            design,
            sample_rate_hz,
        })
    }

    pub fn identity() -> Self {
        SosChain {
            sections: vec![Biquad::IDENTITY],
            design: FilterDesign::Identity,
            sample_rate_hz: 1.0,
        }
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    pub fn design(&self) -> &FilterDesign {
        &self.design
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    /// Edge padding used by [`filtfilt`]: three times the filter order.
    pub fn pad_len(&self) -> usize {
        3 * 2 * self.sections.len()
    }

    /// Complex frequency response of the cascade at `freq_hz`.
    pub fn response_at(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate_hz;
        let z = Complex64::from_polar(1.0, w);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z))
    }

    /// Causal single pass with state initialised to `x0` times the step steady state.
    fn filter_from_steady_state(&self, signal: &[f64]) -> Vec<f64> {
        let x0 = signal.first().copied().unwrap_or(0.0);
        let mut out = signal.to_vec();
        // DC level entering each section.
        let mut level = x0;
        for s in &self.sections {
            let [b0, b1, b2] = s.b;
            let [_, a1, a2] = s.a;
            let st = s.step_state();
            let (mut z0, mut z1) = (st[0] * level, st[1] * level);
            for v in out.iter_mut() {
                let x = *v;
                let y = b0 * x + z0;
                z0 = b1 * x - a1 * y + z1;
                z1 = b2 * x - a2 * y;
                *v = y;
            }
            level *= s.dc_gain();
        }
        out
    }
}

/// Biquad notch with a null at `center_hz`.
pub fn design_notch(center_hz: f64, sample_rate_hz: f64, quality: f64) -> Result<SosChain> {
    check_rate(sample_rate_hz)?;
    let nyquist = sample_rate_hz / 2.0;
    if !(center_hz > 0.0 && center_hz < nyquist) {
        return Err(EadError::Domain(format!(
            "notch frequency {center_hz} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    if !(quality > 0.0 && quality.is_finite()) {
        return Err(EadError::Domain(format!("notch quality must be positive, got {quality}")));
    }
    let w0 = 2.0 * PI * center_hz / sample_rate_hz;
    let alpha = w0.sin() / (2.0 * quality);
    let cos = w0.cos();
    let a0 = 1.0 + alpha;
    let section = Biquad {
        b: [1.0 / a0, -2.0 * cos / a0, 1.0 / a0],
        a: [1.0, -2.0 * cos / a0, (1.0 - alpha) / a0],
    };
    SosChain::new(
        vec![section],
        FilterDesign::Notch {
            center_hz,
            quality,
        },
        sample_rate_hz,
    )
}

/// Butterworth bandpass from an `order`-pole lowpass prototype; yields `order` biquads.
pub fn design_bandpass(
    low_hz: f64,
    high_hz: f64,
    order: usize,
    sample_rate_hz: f64,
) -> Result<SosChain> {
    check_rate(sample_rate_hz)?;
    let nyquist = sample_rate_hz / 2.0;
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < nyquist) {
        return Err(EadError::Domain(format!(
            "bandpass cutoffs must satisfy 0 < {low_hz} < {high_hz} < {nyquist}"
        )));
    }
    if order == 0 {
        return Err(EadError::Domain("filter order must be at least 1".into()));
    }

    let fs2 = 2.0 * sample_rate_hz;
    let warp = |f: f64| fs2 * (PI * f / sample_rate_hz).tan();
    let (w1, w2) = (warp(low_hz), warp(high_hz));
    let bw = w2 - w1;
    let w0_sq = w1 * w2;

    let mut poles = Vec::with_capacity(2 * order);
    for k in 0..order {
        let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let proto = Complex64::from_polar(1.0, theta);
        let half = proto * bw / 2.0;
        let disc = (half * half - w0_sq).sqrt();
        for s in [half + disc, half - disc] {
            poles.push((fs2 + s) / (fs2 - s));
        }
    }

    let mut sections: Vec<Biquad> = pair_poles(&poles)
        .into_iter()
        .map(|(p, q)| {
            let sum = p + q;
            let prod = p * q;
            Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -sum.re, prod.re],
            }
        })
        .collect();

    // Unity gain at the geometric centre of the band.
    let center = 2.0 * (w0_sq.sqrt() / fs2).atan();
    let z = Complex64::from_polar(1.0, center);
    let raw_gain = sections
        .iter()
        .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z))
        .norm();
    let per_section = raw_gain.powf(-1.0 / sections.len() as f64);
    for s in &mut sections {
        for b in &mut s.b {
            *b *= per_section;
        }
    }

    SosChain::new(
        sections,
        FilterDesign::Bandpass {
            low_hz,
            high_hz,
            order,
        },
        sample_rate_hz,
    )
}

fn check_rate(sample_rate_hz: f64) -> Result<()> {
    if sample_rate_hz > 0.0 && sample_rate_hz.is_finite() {
        Ok(())
    } else {
        Err(EadError::Domain(format!("sample rate must be positive, got {sample_rate_hz}")))
    }
}

/// Groups z-plane poles into conjugate pairs (complex) or adjacent pairs (real).
fn pair_poles(poles: &[Complex64]) -> Vec<(Complex64, Complex64)> {
    const IMAG_EPS: f64 = 1e-12;
    let mut pairs = Vec::new();
    let mut reals = Vec::new();
    for &p in poles {
        if p.im > IMAG_EPS {
            pairs.push((p, p.conj()));
        } else if p.im.abs() <= IMAG_EPS {
            reals.push(Complex64::new(p.re, 0.0));
        }
    }
    reals.sort_by(|a, b| a.re.total_cmp(&b.re));
    for chunk in reals.chunks(2) {
        match chunk {
            [p, q] => pairs.push((*p, *q)),
            [p] => pairs.push((*p, Complex64::new(0.0, 0.0))),
            _ => unreachable!(),
        }
    }
    pairs
}

/// Zero-phase filtering: forward pass, reverse, second pass, reverse.
///
/// The signal is extended at both ends by odd reflection over [`SosChain::pad_len`]
/// samples and each pass starts from the steady state of its first input sample.
pub fn filtfilt(chain: &SosChain, signal: &[f64]) -> Result<Vec<f64>> {
    let pad = chain.pad_len();
    let n = signal.len();
    if n <= pad {
        return Err(EadError::Domain(format!(
            "signal of {n} samples is too short for zero-phase filtering (needs > {pad})"
        )));
    }
    let first = signal[0];
    let last = signal[n - 1];
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

    let mut y = chain.filter_from_steady_state(&ext);
    y.reverse();
    let mut y = chain.filter_from_steady_state(&y);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

/// Notch and bandpass settings for the shared preprocessing stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSettings {
    pub notch_hz: f64,
    pub notch_quality: f64,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub band_order: usize,
}

impl Default for FilterSettings {
    fn default() -> Self {
        FilterSettings {
            notch_hz: 50.0,
            notch_quality: 30.0,
            band_low_hz: 0.1,
            band_high_hz: 75.0,
            band_order: 4,
        }
    }
}

impl FilterSettings {
    /// The notch chain followed by the bandpass chain, in application order.
    pub fn design(&self, sample_rate_hz: f64) -> Result<[SosChain; 2]> {
        Ok([
            design_notch(self.notch_hz, sample_rate_hz, self.notch_quality)?,
            design_bandpass(
                self.band_low_hz,
                self.band_high_hz,
                self.band_order,
                sample_rate_hz,
            )?,
        ])
    }

    /// Notch first, then bandpass, per channel.
    pub fn apply(&self, rec: &Recording) -> Result<Recording> {
        let chains = self.design(rec.sample_rate_hz)?;
        let mut out = rec.clone();
        for c in 0..rec.num_channels() {
            let mut row = rec.data.row(c).to_vec();
            for chain in &chains {
                row = filtfilt(chain, &row)?;
            }
            out.data.row_mut(c).copy_from_slice(&row);
        }
        Ok(out)
    }
}
