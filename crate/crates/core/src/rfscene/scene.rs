//! Complex-baseband scene simulation.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngState;

/// One capture: a slice of spectrum observed for `duration` seconds.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub sample_rate: f64,
    pub duration: f64,
    /// Width of the simulated slice, centred on DC; at most `sample_rate`.
    pub band_span: f64,
    /// Variance of the complex receiver noise.
    pub noise_power: f64,
    pub rng: RngState,
}

impl SceneConfig {
    /// Number of complex samples, `duration × sample_rate`.
    pub fn samples(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }

    /// Checks the invariants; `nfft` is the shortest usable capture.
    pub fn validate(&self, nfft: usize) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::invalid(format!("sample_rate must be positive, got {}", self.sample_rate)));
        }
        if !(self.band_span > 0.0 && self.band_span <= self.sample_rate) {
            return Err(Error::invalid(format!("band_span must lie in (0, sample_rate], got {}", self.band_span)));
        }
        if !(self.noise_power > 0.0 && self.noise_power.is_finite()) {
            return Err(Error::invalid(format!("noise_power must be positive, got {}", self.noise_power)));
        }
        let n = self.duration * self.sample_rate;
        if !(n.is_finite() && (n - n.round()).abs() < 1e-6 && n.round() >= nfft as f64) {
            return Err(Error::invalid(format!(
                "duration × sample_rate must be an integer ≥ {nfft}, got {n}"
            )));
        }
        Ok(())
    }
}

/// On/off gating of a commercial carrier. `on == period` is continuous.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DutyPattern {
    pub period: f64,
    pub on: f64,
    /// Start of the first on-interval within the period.
    pub phase: f64,
}

impl DutyPattern {
    pub fn continuous() -> Self {
        DutyPattern { period: 1.0, on: 1.0, phase: 0.0 }
    }

    pub fn is_on(&self, t: f64) -> bool {
        if self.on >= self.period {
            return true;
        }
        (t - self.phase).rem_euclid(self.period) < self.on
    }

    /// Envelope in [0, 1]: 1 while on, with raised-cosine edges of length
    /// `ramp` placed inside the on-interval.
    pub fn gain(&self, t: f64, ramp: f64) -> f64 {
        if self.on >= self.period {
            return 1.0;
        }
        let u = (t - self.phase).rem_euclid(self.period);
        if u >= self.on {
            return 0.0;
        }
        let ramp = ramp.min(self.on / 2.0);
        let edge = u.min(self.on - u);
        if edge >= ramp {
            1.0
        } else {
            0.5 - 0.5 * (PI * edge / ramp).cos()
        }
    }

    pub fn duty(&self) -> f64 {
        (self.on / self.period).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmitterKind {
    /// Narrow multicarrier block.
    LteLike { subcarrier_spacing: f64, duty: DutyPattern },
    /// Wide multicarrier block.
    FivegLike { subcarrier_spacing: f64, duty: DutyPattern },
    /// Linear-FM pulse train with a rectangular envelope.
    Radar { pulse_width: f64, pri: f64, start_offset: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitterSpec {
    pub center_offset: f64,
    pub bandwidth: f64,
    /// Mean power while transmitting, same units as `noise_power`.
    pub power: f64,
    #[serde(flatten)]
    pub kind: EmitterKind,
}

impl EmitterSpec {
    pub fn is_radar(&self) -> bool {
        matches!(self.kind, EmitterKind::Radar { .. })
    }

    pub fn band(&self) -> (f64, f64) {
        (self.center_offset - self.bandwidth / 2.0, self.center_offset + self.bandwidth / 2.0)
    }

    pub fn validate(&self, band_span: f64) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.power >= 0.0 && self.power.is_finite()) {
            return Err(Error::invalid(format!("emitter needs bandwidth > 0 and power ≥ 0: {self:?}")));
        }
        let (lo, hi) = self.band();
        let half = band_span / 2.0;
        if lo < -half - 1e-9 || hi > half + 1e-9 {
            return Err(Error::invalid(format!("emitter band [{lo}, {hi}] Hz lies outside ±{half} Hz")));
        }
        match self.kind {
            EmitterKind::Radar { pulse_width, pri, start_offset } => {
                if !(pulse_width > 0.0 && pulse_width < pri && start_offset >= 0.0) {
                    return Err(Error::invalid(format!(
                        "radar needs 0 < pulse_width < pri and start_offset ≥ 0, got {pulse_width}, {pri}, {start_offset}"
                    )));
                }
            }
            EmitterKind::LteLike { subcarrier_spacing, duty } | EmitterKind::FivegLike { subcarrier_spacing, duty } => {
                if !(subcarrier_spacing > 0.0 && subcarrier_spacing <= self.bandwidth) {
                    return Err(Error::invalid(format!("subcarrier spacing {subcarrier_spacing} outside (0, bandwidth]")));
                }
                if !(duty.period > 0.0 && duty.on > 0.0) {
                    return Err(Error::invalid(format!("duty pattern needs positive period and on-time: {duty:?}")));
                }
            }
        }
        Ok(())
    }
}

/// Sums emitter waveforms and circular complex Gaussian noise.
///
/// Noise draws from `rng.derive(0)`; emitter `i` from `rng.derive(i + 1)`.
pub fn synth_iq(config: &SceneConfig, emitters: &[EmitterSpec]) -> Result<Vec<Complex64>> {
    config.validate(1)?;
    for e in emitters {
        e.validate(config.band_span)?;
    }
    let n = config.samples();
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    let mut noise = config.rng.derive(0);
    let s = (config.noise_power / 2.0).sqrt();
    for x in out.iter_mut() {
        *x = Complex64::new(s * noise.normal(), s * noise.normal());
    }
    for (i, e) in emitters.iter().enumerate() {
        let mut rng = config.rng.derive(i as u64 + 1);
        match e.kind {
            EmitterKind::Radar { pulse_width, pri, start_offset } => {
                add_radar(&mut out, config.sample_rate, e, pulse_width, pri, start_offset)
            }
            EmitterKind::LteLike { subcarrier_spacing, duty } | EmitterKind::FivegLike { subcarrier_spacing, duty } => {
                add_multicarrier(&mut out, config.sample_rate, e, subcarrier_spacing, duty, &mut rng)
            }
        }
    }
    Ok(out)
}

fn add_radar(out: &mut [Complex64], fs: f64, e: &EmitterSpec, pw: f64, pri: f64, start: f64) {
    let amp = e.power.sqrt();
    let f0 = e.center_offset - e.bandwidth / 2.0;
    let rate = e.bandwidth / pw;
    let len = (pw * fs).round().max(1.0) as usize;
    let mut k = 0;
    loop {
        let s0 = ((start + k as f64 * pri) * fs).round() as usize;
        if s0 >= out.len() {
            break;
        }
        for (j, x) in out[s0..].iter_mut().take(len).enumerate() {
            let tau = j as f64 / fs;
            let phase = 2.0 * PI * (f0 * tau + 0.5 * rate * tau * tau);
            *x += Complex64::from_polar(amp, phase);
        }
        k += 1;
    }
}

/// Edge length of the raised-cosine ramps applied when a carrier gates on or off.
const RAMP: f64 = 8e-6;

/// Random-phase QPSK subcarriers re-drawn every symbol (`1 / spacing`),
/// brick-wall filtered to the emitter band (unfiltered symbol edges splatter
/// across the whole span) and gated by the duty pattern with short ramps.
fn add_multicarrier(out: &mut [Complex64], fs: f64, e: &EmitterSpec, spacing: f64, duty: DutyPattern, rng: &mut RngState) {
    let n = out.len();
    let k = ((e.bandwidth / spacing).floor() as usize).max(1);
    let (lo, hi) = e.band();
    let freqs: Vec<f64> = (0..k).map(|i| lo + (i as f64 + 0.5) * spacing).collect();
    let symbol = ((fs / spacing).round() as usize).max(1);
    let steps: Vec<Complex64> = freqs.iter().map(|f| Complex64::from_polar(1.0, 2.0 * PI * f / fs)).collect();
    let mut sym = vec![Complex64::new(0.0, 0.0); k];
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for (start, chunk) in (0..n).step_by(symbol).zip(x.chunks_mut(symbol)) {
        for (c, f) in sym.iter_mut().zip(&freqs) {
            let q = rng.below(4) as f64;
            // Phase referenced to absolute time keeps every symbol on one frequency grid.
            *c = Complex64::from_polar(1.0, PI / 4.0 + q * PI / 2.0 + 2.0 * PI * f * start as f64 / fs);
        }
        for v in chunk.iter_mut() {
            for (c, step) in sym.iter_mut().zip(&steps) {
                *v += *c;
                *c *= step;
            }
        }
    }

    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(n).process(&mut x);
    for (i, v) in x.iter_mut().enumerate() {
        let f = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 } * fs / n as f64;
        if f < lo || f > hi {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut x);

    let mean_power = x.iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
    if mean_power == 0.0 {
        return;
    }
    let scale = (e.power / mean_power).sqrt();
    for (i, (o, v)) in out.iter_mut().zip(&x).enumerate() {
        let g = duty.gain(i as f64 / fs, RAMP);
        if g > 0.0 {
            *o += v * (scale * g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(noise: f64) -> SceneConfig {
        SceneConfig { sample_rate: 1e6, duration: 0.016, band_span: 1e6, noise_power: noise, rng: RngState::new(1) }
    }

    #[test]
    fn duty_pattern() {
        let d = DutyPattern { period: 2e-3, on: 1e-3, phase: 0.5e-3 };
        assert!(!d.is_on(0.0));
        assert!(d.is_on(0.6e-3));
        assert!(!d.is_on(1.6e-3));
        assert!(d.is_on(2.6e-3));
        assert!(DutyPattern::continuous().is_on(123.0));
    }

    #[test]
    fn multicarrier_power_and_gating() {
        let c = cfg(1e-12);
        let e = EmitterSpec {
            center_offset: 1e5,
            bandwidth: 2e5,
            power: 4.0,
            kind: EmitterKind::FivegLike { subcarrier_spacing: 3e4, duty: DutyPattern { period: 4e-3, on: 2e-3, phase: 0.0 } },
        };
        let x = synth_iq(&c, &[e]).unwrap();
        let on: Vec<f64> = x[..2000].iter().map(|v| v.norm_sqr()).collect();
        let off: Vec<f64> = x[2000..4000].iter().map(|v| v.norm_sqr()).collect();
        let m = on.iter().sum::<f64>() / on.len() as f64;
        assert!((m - 4.0).abs() < 0.6, "mean on-power {m}");
        assert!(off.iter().all(|&p| p < 1e-9));
    }

    #[test]
    fn rejects_out_of_band_and_bad_radar() {
        let c = cfg(1.0);
        let wide = EmitterSpec {
            center_offset: 4e5,
            bandwidth: 3e5,
            power: 1.0,
            kind: EmitterKind::LteLike { subcarrier_spacing: 1.5e4, duty: DutyPattern::continuous() },
        };
        assert!(synth_iq(&c, &[wide]).is_err());
        let bad = EmitterSpec {
            center_offset: 0.0,
            bandwidth: 1e5,
            power: 1.0,
            kind: EmitterKind::Radar { pulse_width: 2e-3, pri: 1e-3, start_offset: 0.0 },
        };
        assert!(synth_iq(&c, &[bad]).is_err());
    }

    #[test]
    fn duration_must_give_integer_sample_count() {
        let mut c = cfg(1.0);
        c.duration = 1.5e-6;
        assert!(c.validate(1).is_err());
        c.duration = 32e-6;
        assert!(c.validate(64).is_err());
        assert!(c.validate(32).is_ok());
    }
}
