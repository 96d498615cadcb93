use crate::error::{Error, Result};
use crate::image::Image;

/// `10·log10(max² / MSE)` in dB; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, max_value: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", &[a.height(), a.width()], &[b.height(), b.width()]));
    }
    if !(max_value > 0.0 && max_value.is_finite()) {
        return Err(Error::invalid(format!("psnr max_value must be positive, got {max_value}")));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// Structural-similarity settings: a `window × window` uniform window slid
/// over every valid position, `C1 = (K1·L)²`, `C2 = (K2·L)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel representation (1 for [0, 1] images).
    pub l: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 7, k1: 0.01, k2: 0.03, l: 1.0 }
    }
}

/// Inclusive-exclusive summed-area table with a zero border.
struct Integral {
    w: usize,
    data: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Self {
        let stride = w + 1;
        let mut data = vec![0.0; (h + 1) * stride];
        for r in 0..h {
            let mut row = 0.0;
            for c in 0..w {
                row += f(r * w + c);
                data[(r + 1) * stride + c + 1] = data[r * stride + c + 1] + row;
            }
        }
        Integral { w, data }
    }

    fn window(&self, r: usize, c: usize, n: usize) -> f64 {
        let s = self.w + 1;
        self.data[(r + n) * s + c + n] - self.data[r * s + c + n] - self.data[(r + n) * s + c] + self.data[r * s + c]
    }
}

/// Mean SSIM over all window positions. Window variances and covariance use
/// the unbiased `1/(N−1)` normalisation.
pub fn ssim(a: &Image, b: &Image, params: SsimParams) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", &[a.height(), a.width()], &[b.height(), b.width()]));
    }
    let SsimParams { window: n, k1, k2, l } = params;
    if n < 2 || n > a.height() || n > a.width() {
        return Err(Error::invalid(format!("ssim window {n} does not fit a {}×{} image", a.height(), a.width())));
    }
    if !(k1 > 0.0 && k2 > 0.0 && l > 0.0) {
        return Err(Error::invalid("ssim needs K1, K2, L > 0"));
    }
    let (h, w) = a.shape();
    let (x, y) = (a.data(), b.data());
    let sx = Integral::new(h, w, |i| x[i]);
    let sy = Integral::new(h, w, |i| y[i]);
    let sxx = Integral::new(h, w, |i| x[i] * x[i]);
    let syy = Integral::new(h, w, |i| y[i] * y[i]);
    let sxy = Integral::new(h, w, |i| x[i] * y[i]);
    let (c1, c2) = ((k1 * l).powi(2), (k2 * l).powi(2));
    let count = (n * n) as f64;
    let unbias = count / (count - 1.0);
    let mut total = 0.0;
    let positions = (h - n + 1) * (w - n + 1);
    for r in 0..=h - n {
        for c in 0..=w - n {
            let mx = sx.window(r, c, n) / count;
            let my = sy.window(r, c, n) / count;
            let vx = (sxx.window(r, c, n) / count - mx * mx) * unbias;
            let vy = (syy.window(r, c, n) / count - my * my) * unbias;
            let cov = (sxy.window(r, c, n) / count - mx * my) * unbias;
            total += ((2.0 * (mx * my) + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / positions as f64)
}
