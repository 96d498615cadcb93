//! Labelled RF spectrogram synthesis: baseband scenes, STFT, rendering and
//! dataset export.

mod dataset;
mod render;
mod scene;
mod stft;

pub use dataset::{
    generate_dataset, load_dataset, read_manifest, synthesize, synthesize_sample, write_manifest, ClassLabel,
    DatasetConfig, LabeledImage, ManifestRow, SampleMeta, SceneRanges, SpectrogramSample, simulate_scene, TargetLabel, Task, MANIFEST,
};
pub use render::render_image;
pub use scene::{synth_iq, DutyPattern, EmitterKind, EmitterSpec, SceneConfig};
pub use stft::{stft, PowerMatrix, Window};
pub use rustfft::num_complex::Complex64;
