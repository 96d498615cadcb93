//! Fidelity of generated spectrograms against a reference set.

mod gallery;
mod quality;
mod report;

pub use gallery::match_gallery;
pub use quality::{psnr, ssim, SsimParams};
pub use report::{batch_compare, EvalReport, MatchRecord, Metric, NamedImage, Summary, CONTEXT_PSNR_DB, CONTEXT_SSIM};
