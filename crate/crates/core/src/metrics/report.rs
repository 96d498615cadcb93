use std::fmt::Write as _;
use std::path::Path;

use super::quality::{psnr, ssim, SsimParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rfscene::ClassLabel;

/// An image with a stable identifier (usually its file name).
#[derive(Debug, Clone, PartialEq)]
pub struct NamedImage {
    pub id: String,
    pub image: Image,
}

impl NamedImage {
    pub fn new(id: impl Into<String>, image: Image) -> Self {
        NamedImage { id: id.into(), image }
    }
}

/// Best reference match of one generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    pub generated: usize,
    pub generated_id: String,
    pub reference: usize,
    pub reference_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    Ssim,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
        }
    }

    fn of(self, r: &MatchRecord) -> f64 {
        match self {
            Metric::Psnr => r.psnr,
            Metric::Ssim => r.ssim,
        }
    }
}

/// Mean and 95 % half-width, `1.96·s/√n` with the sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
}

impl Summary {
    /// A single value has zero half-width; identical values (including all
    /// infinite) also do. Mixed infinite and finite values give an infinite
    /// half-width.
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if values.len() < 2 || values.iter().all(|&v| v == values[0]) {
            return Summary { mean, ci95: 0.0 };
        }
        if !mean.is_finite() {
            return Summary { mean, ci95: f64::INFINITY };
        }
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        Summary { mean, ci95: 1.96 * var.sqrt() / n.sqrt() }
    }
}

/// Reference numbers for the same comparison on captured 256×256 data with a
/// full-scale model; context only.
pub const CONTEXT_PSNR_DB: f64 = 10.36;
pub const CONTEXT_SSIM: f64 = 0.29;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: Vec<MatchRecord>,
    pub psnr: Summary,
    pub ssim: Summary,
    pub reference_count: usize,
    pub ssim_params: SsimParams,
    /// Generated images labelled noise by a probe classifier, when attached.
    pub noise_count: Option<usize>,
    /// Generated images labelled as a radar-plus-commercial overlap.
    pub overlap_count: Option<usize>,
}

/// Pairs every generated image with the reference of highest SSIM (ties go
/// to the lexicographically smallest id) and reports PSNR for that pair.
/// Pixel values are taken to span [0, 1].
pub fn batch_compare(
    generated: &[NamedImage],
    reference: &[NamedImage],
    params: SsimParams,
    workers: usize,
) -> Result<EvalReport> {
    let first = generated.first().ok_or_else(|| Error::invalid("no generated images"))?;
    if reference.is_empty() {
        return Err(Error::invalid("no reference images"));
    }
    let shape = first.image.shape();
    for im in generated.iter().chain(reference) {
        if im.image.shape() != shape {
            return Err(Error::shape(
                "batch_compare",
                &[shape.0, shape.1],
                &[im.image.height(), im.image.width()],
            ));
        }
    }
    let workers = workers.clamp(1, generated.len());
    let chunk = generated.len().div_ceil(workers);
    let parts: Vec<Result<Vec<MatchRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = generated
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                s.spawn(move || {
                    part.iter().enumerate().map(|(j, g)| best_match(ci * chunk + j, g, reference, params)).collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("compare worker panicked")).collect()
    });
    let mut records = Vec::with_capacity(generated.len());
    for p in parts {
        records.extend(p?);
    }
    let psnr = Summary::of(&records.iter().map(|r| r.psnr).collect::<Vec<_>>());
    let ssim = Summary::of(&records.iter().map(|r| r.ssim).collect::<Vec<_>>());
    Ok(EvalReport {
        records,
        psnr,
        ssim,
        reference_count: reference.len(),
        ssim_params: params,
        noise_count: None,
        overlap_count: None,
    })
}

fn best_match(index: usize, g: &NamedImage, reference: &[NamedImage], params: SsimParams) -> Result<MatchRecord> {
    let mut best: Option<(f64, usize)> = None;
    for (i, r) in reference.iter().enumerate() {
        let s = ssim(&g.image, &r.image, params)?;
        let better = match best {
            None => true,
            Some((bs, bi)) => s > bs || (s == bs && r.id < reference[bi].id),
        };
        if better {
            best = Some((s, i));
        }
    }
    let (s, i) = best.expect("non-empty reference");
    Ok(MatchRecord {
        generated: index,
        generated_id: g.id.clone(),
        reference: i,
        reference_id: reference[i].id.clone(),
        psnr: psnr(&g.image, &reference[i].image, 1.0)?,
        ssim: s,
    })
}

impl EvalReport {
    /// Records by metric, best first; ties keep generated order.
    pub fn ranked(&self, metric: Metric) -> Vec<&MatchRecord> {
        let mut v: Vec<&MatchRecord> = self.records.iter().collect();
        v.sort_by(|a, b| metric.of(b).total_cmp(&metric.of(a)).then(a.generated.cmp(&b.generated)));
        v
    }

    pub fn top(&self, metric: Metric, k: usize) -> Vec<&MatchRecord> {
        self.ranked(metric).into_iter().take(k).collect()
    }

    /// The `k` worst records, worst first.
    pub fn bottom(&self, metric: Metric, k: usize) -> Vec<&MatchRecord> {
        let mut v = self.ranked(metric);
        v.reverse();
        v.truncate(k);
        v
    }

    /// Fills the class counts from per-record labels.
    pub fn attach_labels(&mut self, labels: &[ClassLabel]) -> Result<()> {
        if labels.len() != self.records.len() {
            return Err(Error::invalid(format!("{} labels for {} records", labels.len(), self.records.len())));
        }
        self.noise_count = Some(labels.iter().filter(|l| l.is_noise()).count());
        self.overlap_count = Some(labels.iter().filter(|l| l.is_overlap()).count());
        Ok(())
    }

    /// One row per generated image.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("generated,reference,psnr_db,ssim\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{:.6}", r.generated_id, r.reference_id, fmt_db(r.psnr), r.ssim);
        }
        out
    }

    pub fn summary(&self, k: usize) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# reference context (full-scale model, captured data): mean PSNR {CONTEXT_PSNR_DB} dB, mean SSIM {CONTEXT_SSIM}"
        );
        let p = self.ssim_params;
        let _ = writeln!(s, "generated: {}  reference: {}", self.records.len(), self.reference_count);
        let _ = writeln!(s, "ssim: window {}x{} uniform, K1 {}, K2 {}, L {}", p.window, p.window, p.k1, p.k2, p.l);
        let _ = writeln!(s, "mean PSNR: {} dB ± {} (95% CI)", fmt_db(self.psnr.mean), fmt_db(self.psnr.ci95));
        let _ = writeln!(s, "mean SSIM: {:.4} ± {:.4} (95% CI)", self.ssim.mean, self.ssim.ci95);
        if let (Some(noise), Some(overlap)) = (self.noise_count, self.overlap_count) {
            let n = self.records.len() as f64;
            let _ = writeln!(
                s,
                "probe labels: {noise} noise ({:.1}% non-noise), {overlap} overlapping ({:.1}%)",
                100.0 * (1.0 - noise as f64 / n),
                100.0 * overlap as f64 / n
            );
        }
        for metric in [Metric::Ssim, Metric::Psnr] {
            for (tag, list) in [("best", self.top(metric, k)), ("worst", self.bottom(metric, k))] {
                let _ = writeln!(s, "{tag} {}:", metric.name());
                for r in list {
                    let _ = writeln!(
                        s,
                        "  {} ~ {}  psnr {} dB  ssim {:.4}",
                        r.generated_id,
                        r.reference_id,
                        fmt_db(r.psnr),
                        r.ssim
                    );
                }
            }
        }
        s
    }

    /// Writes `report.csv` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path, k: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let txt = dir.join("summary.txt");
        std::fs::write(&txt, self.summary(k)).map_err(|e| Error::io(&txt, e))
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}
