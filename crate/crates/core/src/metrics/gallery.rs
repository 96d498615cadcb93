use std::path::{Path, PathBuf};

use super::report::{EvalReport, MatchRecord, Metric, NamedImage};
use crate::error::{Error, Result};
use crate::image::{write_color_png, Image};

const GAP: usize = 2;
const SCALE: usize = 4;

fn upscale(im: &Image, f: usize) -> Image {
    let (h, w) = im.shape();
    let data = (0..h * f).flat_map(|r| (0..w * f).map(move |c| (r / f, c / f))).map(|(r, c)| im.get(r, c)).collect();
    Image::new(h * f, w * f, data).expect("consistent shape")
}

fn panel(rows: &[&MatchRecord], generated: &[NamedImage], reference: &[NamedImage]) -> Result<Image> {
    let pairs = rows
        .iter()
        .map(|r| {
            let g = upscale(&generated[r.generated].image, SCALE);
            let q = upscale(&reference[r.reference].image, SCALE);
            Image::hstack(&[&g, &q], GAP, 1.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Image::vstack(&pairs.iter().collect::<Vec<_>>(), GAP, 1.0)
}

/// Writes `{best,worst}_{ssim,psnr}.png`; each row shows a generated image
/// (left) beside its matched reference (right), 4× enlarged, colour-mapped.
pub fn match_gallery(
    report: &EvalReport,
    generated: &[NamedImage],
    reference: &[NamedImage],
    k: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if k == 0 || k > report.records.len() {
        return Err(Error::invalid(format!("gallery k must lie in 1..={}, got {k}", report.records.len())));
    }
    for r in &report.records {
        if r.generated >= generated.len() || r.reference >= reference.len() {
            return Err(Error::invalid("report does not index the supplied images"));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for metric in [Metric::Ssim, Metric::Psnr] {
        for (tag, rows) in [("best", report.top(metric, k)), ("worst", report.bottom(metric, k))] {
            let path = out_dir.join(format!("{tag}_{}.png", metric.name()));
            write_color_png(&path, &panel(&rows, generated, reference)?)?;
            written.push(path);
        }
    }
    Ok(written)
}
