use std::f64::consts::PI;
use std::str::FromStr;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Rectangular,
    /// Periodic Hann, `0.5 − 0.5·cos(2πn/N)`.
    Hann,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect(),
        }
    }
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangular" | "rect" => Ok(Window::Rectangular),
            "hann" => Ok(Window::Hann),
            other => Err(Error::Config(format!("unknown window `{other}` (expected rectangular or hann)"))),
        }
    }
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Window::Rectangular => "rectangular",
            Window::Hann => "hann",
        })
    }
}

/// Time × frequency power, row-major by frame.
///
/// Bins are in natural DFT order: bin `k` holds frequency `k·fs/nfft` for
/// `k < nfft/2` and `(k − nfft)·fs/nfft` above, so a tone at `f` peaks at
/// `round(f/fs·nfft) mod nfft`. Rendering re-centres DC for display.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerMatrix {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl PowerMatrix {
    pub fn new(frames: usize, bins: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || bins == 0 || data.len() != frames * bins {
            return Err(Error::shape("power matrix", &[frames, bins], &[data.len()]));
        }
        Ok(PowerMatrix { frames, bins, data })
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.bins..(i + 1) * self.bins]
    }

    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.data[frame * self.bins + bin]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Squared-magnitude DFT of each windowed frame.
pub fn stft(iq: &[Complex64], nfft: usize, hop: usize, window: Window) -> Result<PowerMatrix> {
    if !nfft.is_power_of_two() {
        return Err(Error::invalid(format!("nfft must be a power of two, got {nfft}")));
    }
    if hop == 0 || hop > nfft {
        return Err(Error::invalid(format!("hop must lie in 1..={nfft}, got {hop}")));
    }
    if iq.len() < nfft {
        return Err(Error::invalid(format!("signal of {} samples is shorter than nfft {nfft}", iq.len())));
    }
    let frames = (iq.len() - nfft) / hop + 1;
    let w = window.coefficients(nfft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(frames * nfft);
    for f in 0..frames {
        let start = f * hop;
        for ((b, x), &c) in buf.iter_mut().zip(&iq[start..start + nfft]).zip(&w) {
            *b = x * c;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend(buf.iter().map(|z| z.norm_sqr()));
    }
    PowerMatrix::new(frames, nfft, data)
}
