use super::stft::PowerMatrix;
use crate::error::{Error, Result};
use crate::image::Image;

/// Renders a square spectrogram image: frequency on rows (highest at the
/// top, DC centred), time on columns, intensity in [0, 1].
///
/// Power is first area-averaged onto the output grid, then mapped to dB and
/// clipped to `[max − dyn_range_db, max]`. Averaging before the logarithm
/// keeps short pulses visible when several frames share a column.
pub fn render_image(power: &PowerMatrix, dyn_range_db: f64, resolution: usize) -> Result<Image> {
    if !(dyn_range_db > 0.0 && dyn_range_db.is_finite()) {
        return Err(Error::invalid(format!("dyn_range_db must be positive, got {dyn_range_db}")));
    }
    if resolution == 0 {
        return Err(Error::invalid("resolution must be positive"));
    }
    if power.data.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(Error::invalid("power matrix must be finite and non-negative"));
    }
    if power.data.iter().all(|&p| p == 0.0) {
        return Err(Error::invalid("all-zero power matrix has no dB scale"));
    }
    let (frames, bins) = (power.frames, power.bins);
    // Row r ↔ display frequency index bins−1−r after the DC-centering shift.
    let half = bins / 2;
    let mut display = vec![0.0; bins * frames];
    for r in 0..bins {
        let k = (bins - 1 - r + half) % bins;
        for t in 0..frames {
            display[r * frames + t] = power.get(t, k);
        }
    }
    let rows = resample_weights(bins, resolution);
    let cols = resample_weights(frames, resolution);
    let mut grid = vec![0.0; resolution * resolution];
    for (i, rw) in rows.iter().enumerate() {
        for (j, cw) in cols.iter().enumerate() {
            let mut acc = 0.0;
            for &(r, a) in rw {
                for &(c, b) in cw {
                    acc += a * b * display[r * frames + c];
                }
            }
            grid[i * resolution + j] = acc;
        }
    }
    let db: Vec<f64> = grid.iter().map(|&p| if p > 0.0 { 10.0 * p.log10() } else { f64::NEG_INFINITY }).collect();
    let max = db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floor = max - dyn_range_db;
    let data = db.iter().map(|&d| ((d.max(floor) - floor) / dyn_range_db).clamp(0.0, 1.0)).collect();
    Image::new(resolution, resolution, data)
}

/// Area-overlap weights mapping `n` input cells onto `m` output cells.
/// Each output row of weights sums to 1.
fn resample_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut k = lo.floor() as usize;
            while (k as f64) < hi && k < n {
                let overlap = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((k, overlap / scale));
                }
                k += 1;
            }
            w
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        for (n, m) in [(250, 32), (64, 32), (16, 32), (7, 3)] {
            for row in resample_weights(n, m) {
                assert!((row.iter().map(|w| w.1).sum::<f64>() - 1.0).abs() < 1e-12, "{n}->{m}");
            }
        }
    }

    #[test]
    fn high_frequencies_render_at_the_top() {
        // 4 frames × 8 bins; energy only in bin 3 (positive, just below Nyquist).
        let mut data = vec![1e-6; 32];
        for t in 0..4 {
            data[t * 8 + 3] = 1.0;
        }
        let img = render_image(&PowerMatrix::new(4, 8, data).unwrap(), 30.0, 8).unwrap();
        // Display order top→bottom: bins 3,2,1,0,7,6,5,4.
        assert_eq!(img.get(0, 0), 1.0);
        assert_eq!(img.get(1, 0), 0.0);
        assert_eq!(img.get(7, 2), 0.0);
    }
}
