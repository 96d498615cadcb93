//! Labelled spectrogram datasets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::render::render_image;
use super::scene::{synth_iq, DutyPattern, EmitterKind, EmitterSpec, SceneConfig};
use super::stft::{stft, PowerMatrix, Window};
use crate::error::{Error, Result};
use crate::image::{read_png, write_gray_png, Image};
use crate::numerics::RngState;

const SCENE_STREAM: u64 = 0x5C3E;

/// The five generator classes, with stable codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Noise = 0,
    FiveG = 1,
    Lte = 2,
    FiveGPlusRadar = 3,
    LtePlusRadar = 4,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 5] =
        [ClassLabel::Noise, ClassLabel::FiveG, ClassLabel::Lte, ClassLabel::FiveGPlusRadar, ClassLabel::LtePlusRadar];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        self.content().name
    }

    pub fn is_noise(self) -> bool {
        self == ClassLabel::Noise
    }

    /// Contains both a commercial block and radar.
    pub fn is_overlap(self) -> bool {
        matches!(self, ClassLabel::FiveGPlusRadar | ClassLabel::LtePlusRadar)
    }

    fn content(self) -> ClassContent {
        use Commercial::*;
        let (name, commercial, radar) = match self {
            ClassLabel::Noise => ("noise", None, false),
            ClassLabel::FiveG => ("fiveg", Some(FiveG), false),
            ClassLabel::Lte => ("lte", Some(Lte), false),
            ClassLabel::FiveGPlusRadar => ("fiveg_plus_radar", Some(FiveG), true),
            ClassLabel::LtePlusRadar => ("lte_plus_radar", Some(Lte), true),
        };
        ClassContent { code: self.code(), name, commercial, radar }
    }
}

/// Classes of the shifted three-way detection task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TargetLabel {
    Radar = 0,
    FiveG = 1,
    FiveGPlusRadar = 2,
}

impl TargetLabel {
    pub const ALL: [TargetLabel; 3] = [TargetLabel::Radar, TargetLabel::FiveG, TargetLabel::FiveGPlusRadar];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        self.content().name
    }

    fn content(self) -> ClassContent {
        let (name, commercial, radar) = match self {
            TargetLabel::Radar => ("radar", None, true),
            TargetLabel::FiveG => ("fiveg", Some(Commercial::FiveG), false),
            TargetLabel::FiveGPlusRadar => ("fiveg_plus_radar", Some(Commercial::FiveG), true),
        };
        ClassContent { code: self.code(), name, commercial, radar }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Commercial {
    Lte,
    FiveG,
}

#[derive(Debug, Clone, Copy)]
struct ClassContent {
    code: usize,
    name: &'static str,
    commercial: Option<Commercial>,
    radar: bool,
}

/// Which label space a dataset uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Noise / 5G / LTE / 5G+radar / LTE+radar.
    Source,
    /// Radar / 5G / 5G+radar, drawn from shifted parameter ranges.
    Target,
}

impl Task {
    pub fn class_names(self) -> Vec<&'static str> {
        self.classes().iter().map(|c| c.name).collect()
    }

    pub fn class_count(self) -> usize {
        self.classes().len()
    }

    fn classes(self) -> Vec<ClassContent> {
        match self {
            Task::Source => ClassLabel::ALL.iter().map(|c| c.content()).collect(),
            Task::Target => TargetLabel::ALL.iter().map(|c| c.content()).collect(),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Task::Source),
            "target" => Ok(Task::Target),
            other => Err(Error::Config(format!("unknown task `{other}` (expected source or target)"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Source => "source",
            Task::Target => "target",
        })
    }
}

/// Uniform ranges for randomized scene parameters. SNRs are in-band:
/// emitter power spectral density over noise power spectral density.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRanges {
    pub lte_bandwidth: (f64, f64),
    pub fiveg_bandwidth: (f64, f64),
    /// Slot period of the 5G-like gating, seconds.
    pub fiveg_period: (f64, f64),
    /// Fraction of each slot period that is on.
    pub fiveg_duty: (f64, f64),
    pub commercial_snr_db: (f64, f64),
    pub radar_bandwidth: (f64, f64),
    pub radar_pulse_width: (f64, f64),
    pub radar_pri: (f64, f64),
    pub radar_snr_db: (f64, f64),
}

impl SceneRanges {
    pub fn source() -> Self {
        SceneRanges {
            lte_bandwidth: (100e3, 200e3),
            fiveg_bandwidth: (350e3, 550e3),
            fiveg_period: (2e-3, 4e-3),
            fiveg_duty: (0.35, 0.6),
            commercial_snr_db: (12.0, 22.0),
            radar_bandwidth: (120e3, 200e3),
            radar_pulse_width: (15e-6, 50e-6),
            radar_pri: (0.8e-3, 1.6e-3),
            radar_snr_db: (28.0, 36.0),
        }
    }

    /// Lower SNRs, longer pulse intervals, wider chirps and different slot
    /// timing than [`SceneRanges::source`].
    pub fn target() -> Self {
        SceneRanges {
            lte_bandwidth: (100e3, 200e3),
            fiveg_bandwidth: (300e3, 500e3),
            fiveg_period: (1.5e-3, 3e-3),
            fiveg_duty: (0.4, 0.7),
            commercial_snr_db: (6.0, 16.0),
            radar_bandwidth: (180e3, 280e3),
            radar_pulse_width: (25e-6, 55e-6),
            radar_pri: (1.2e-3, 2.4e-3),
            radar_snr_db: (24.0, 32.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            ("lte_bandwidth", self.lte_bandwidth),
            ("fiveg_bandwidth", self.fiveg_bandwidth),
            ("fiveg_period", self.fiveg_period),
            ("fiveg_duty", self.fiveg_duty),
            ("commercial_snr_db", self.commercial_snr_db),
            ("radar_bandwidth", self.radar_bandwidth),
            ("radar_pulse_width", self.radar_pulse_width),
            ("radar_pri", self.radar_pri),
            ("radar_snr_db", self.radar_snr_db),
        ];
        for (name, (lo, hi)) in all {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("range {name} = ({lo}, {hi}) is not ordered")));
            }
        }
        for (name, (lo, _)) in [
            ("lte_bandwidth", self.lte_bandwidth),
            ("fiveg_bandwidth", self.fiveg_bandwidth),
            ("fiveg_period", self.fiveg_period),
            ("radar_bandwidth", self.radar_bandwidth),
            ("radar_pulse_width", self.radar_pulse_width),
        ] {
            if lo <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.fiveg_duty.0 > 0.0 && self.fiveg_duty.1 <= 1.0) {
            return Err(Error::Config("fiveg_duty must lie in (0, 1]".into()));
        }
        if self.radar_pulse_width.1 >= self.radar_pri.0 {
            return Err(Error::Config("radar pulse width must stay below the PRI".into()));
        }
        Ok(())
    }
}

/// Everything that determines a dataset, apart from the per-class count.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub task: Task,
    pub sample_rate: f64,
    pub duration: f64,
    pub band_span: f64,
    pub noise_power: f64,
    pub nfft: usize,
    pub hop: usize,
    pub window: Window,
    pub resolution: usize,
    pub dyn_range_db: f64,
    pub ranges: SceneRanges,
}

impl DatasetConfig {
    /// 1 MHz over 16 ms, 64-point Hann frames without overlap, 32 × 32
    /// images over 40 dB.
    pub fn new(task: Task, seed: u64) -> Self {
        DatasetConfig {
            seed,
            task,
            sample_rate: 1e6,
            duration: 16e-3,
            band_span: 1e6,
            noise_power: 1.0,
            nfft: 64,
            hop: 64,
            window: Window::Hann,
            resolution: 32,
            dyn_range_db: 40.0,
            ranges: match task {
                Task::Source => SceneRanges::source(),
                Task::Target => SceneRanges::target(),
            },
        }
    }

    fn scene(&self, rng: RngState) -> SceneConfig {
        SceneConfig {
            sample_rate: self.sample_rate,
            duration: self.duration,
            band_span: self.band_span,
            noise_power: self.noise_power,
            rng,
        }
    }

    /// Duration of one hop, seconds.
    pub fn hop_time(&self) -> f64 {
        self.hop as f64 / self.sample_rate
    }

    pub fn validate(&self) -> Result<()> {
        self.scene(RngState::new(0)).validate(self.nfft)?;
        if !self.nfft.is_power_of_two() || self.hop == 0 || self.hop > self.nfft {
            return Err(Error::Config(format!("need nfft a power of two and 1 ≤ hop ≤ nfft, got {} / {}", self.nfft, self.hop)));
        }
        if self.resolution == 0 || !(self.dyn_range_db > 0.0) {
            return Err(Error::Config("resolution and dyn_range_db must be positive".into()));
        }
        self.ranges.validate()?;
        if self.ranges.radar_pulse_width.1 > 0.9 * self.hop_time() {
            return Err(Error::Config("radar pulses must fit inside one STFT hop".into()));
        }
        if self.ranges.radar_pri.1 > self.duration {
            return Err(Error::Config("radar PRI exceeds the capture duration".into()));
        }
        let widest = self.ranges.fiveg_bandwidth.1.max(self.ranges.lte_bandwidth.1) + self.ranges.radar_bandwidth.1;
        if widest + GUARD > usable_half(self.band_span) * 2.0 {
            return Err(Error::Config(format!("commercial plus radar bandwidth {widest} Hz does not fit in band_span")));
        }
        Ok(())
    }
}

/// Minimum spectral gap between a commercial block and a radar chirp.
const GUARD: f64 = 60e3;

fn usable_half(span: f64) -> f64 {
    0.48 * span
}

/// One rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramSample {
    pub image: Image,
    pub label: usize,
    pub label_name: &'static str,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub noise_power: f64,
    pub emitters: Vec<EmitterSpec>,
}

/// Draws the emitter set for one scene.
fn draw_scene(content: ClassContent, cfg: &DatasetConfig, rng: &mut RngState) -> Vec<EmitterSpec> {
    let r = &cfg.ranges;
    let half = usable_half(cfg.band_span);
    let u = |rng: &mut RngState, (lo, hi): (f64, f64)| rng.uniform_range(lo, hi);
    let power = |snr_db: f64, bw: f64| cfg.noise_power * 10f64.powf(snr_db / 10.0) * bw / cfg.sample_rate;

    let mut out = Vec::new();
    let radar_bw = if content.radar { u(rng, r.radar_bandwidth) } else { 0.0 };
    // Radar takes one edge of the band; the commercial block sits in the rest.
    let radar_left = rng.below(2) == 0;
    let reserved = if content.radar && content.commercial.is_some() { radar_bw + GUARD } else { 0.0 };

    let mut block = None;
    if let Some(kind) = content.commercial {
        let (bw, spacing, duty) = match kind {
            Commercial::Lte => (u(rng, r.lte_bandwidth), 15e3, DutyPattern::continuous()),
            Commercial::FiveG => {
                let period = u(rng, r.fiveg_period);
                let on = period * u(rng, r.fiveg_duty);
                let phase = rng.uniform() * period;
                (u(rng, r.fiveg_bandwidth), 30e3, DutyPattern { period, on, phase })
            }
        };
        let (lo, hi) = if radar_left { (-half + reserved + bw / 2.0, half - bw / 2.0) } else { (-half + bw / 2.0, half - reserved - bw / 2.0) };
        let center = rng.uniform_range(lo, hi.max(lo));
        let p = power(u(rng, r.commercial_snr_db), bw);
        let kind = match kind {
            Commercial::Lte => EmitterKind::LteLike { subcarrier_spacing: spacing, duty },
            Commercial::FiveG => EmitterKind::FivegLike { subcarrier_spacing: spacing, duty },
        };
        block = Some((center - bw / 2.0, center + bw / 2.0));
        out.push(EmitterSpec { center_offset: center, bandwidth: bw, power: p, kind });
    }
    if content.radar {
        let (lo, hi) = match block {
            Some((b_lo, _)) if radar_left => (-half + radar_bw / 2.0, b_lo - GUARD - radar_bw / 2.0),
            Some((_, b_hi)) => (b_hi + GUARD + radar_bw / 2.0, half - radar_bw / 2.0),
            None => (-half + radar_bw / 2.0, half - radar_bw / 2.0),
        };
        let center = rng.uniform_range(lo, hi.max(lo));
        // Pulses sit centred in hop-aligned slots so each lands in one frame,
        // away from the window taper.
        let hop = cfg.hop_time();
        let pri_hops = (u(rng, r.radar_pri) / hop).round().max(2.0);
        let pri = pri_hops * hop;
        let pulse_width = u(rng, r.radar_pulse_width);
        let centring = ((hop - pulse_width) / 2.0 * cfg.sample_rate).round() / cfg.sample_rate;
        // Start late enough in the first interval that exactly
        // floor(duration / pri) pulses fit.
        let pri_hops = pri_hops as usize;
        let total_hops = (cfg.duration / hop + 1e-9).floor() as usize;
        let first = total_hops % pri_hops;
        let start_offset = (first + rng.below(pri_hops - first)) as f64 * hop + centring;
        let p = power(u(rng, r.radar_snr_db), radar_bw);
        out.push(EmitterSpec {
            center_offset: center,
            bandwidth: radar_bw,
            power: p,
            kind: EmitterKind::Radar { pulse_width, pri, start_offset },
        });
    }
    out
}

/// Per-sample generator state: a function of the dataset seed, the class
/// code and the index within the class only.
fn sample_rng(seed: u64, class: usize, index: usize) -> RngState {
    RngState::with_stream(seed, SCENE_STREAM).derive(((class as u64) << 32) | index as u64)
}

fn class_content(cfg: &DatasetConfig, class: usize) -> Result<ClassContent> {
    cfg.task
        .classes()
        .get(class)
        .copied()
        .ok_or_else(|| Error::invalid(format!("class code {class} out of range for {} task", cfg.task)))
}

/// Draws and simulates sample `index` of class `class` (a code of the
/// config's task), returning its emitters and unrendered power matrix.
pub fn simulate_scene(cfg: &DatasetConfig, class: usize, index: usize) -> Result<(Vec<EmitterSpec>, PowerMatrix)> {
    let content = class_content(cfg, class)?;
    let rng = sample_rng(cfg.seed, class, index);
    let emitters = draw_scene(content, cfg, &mut rng.derive(0));
    let iq = synth_iq(&cfg.scene(rng.derive(1)), &emitters)?;
    let power = stft(&iq, cfg.nfft, cfg.hop, cfg.window)?;
    Ok((emitters, power))
}

/// Simulates and renders one sample; see [`simulate_scene`].
pub fn synthesize_sample(cfg: &DatasetConfig, class: usize, index: usize) -> Result<SpectrogramSample> {
    let content = class_content(cfg, class)?;
    let (emitters, power) = simulate_scene(cfg, class, index)?;
    let image = render_image(&power, cfg.dyn_range_db, cfg.resolution)?;
    Ok(SpectrogramSample {
        image,
        label: content.code,
        label_name: content.name,
        meta: SampleMeta { index, noise_power: cfg.noise_power, emitters },
    })
}

/// Generates `per_class` samples of every class, class-major, using up to
/// `workers` threads. The result does not depend on `workers`.
pub fn synthesize(per_class: usize, cfg: &DatasetConfig, workers: usize) -> Result<Vec<SpectrogramSample>> {
    if per_class == 0 {
        return Err(Error::invalid("per_class_count must be at least 1"));
    }
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> =
        (0..cfg.task.class_count()).flat_map(|c| (0..per_class).map(move |i| (c, i))).collect();
    let workers = workers.clamp(1, jobs.len());
    let chunk = jobs.len().div_ceil(workers);
    let parts: Vec<Result<Vec<SpectrogramSample>>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|&(c, i)| synthesize_sample(cfg, c, i)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("synthesis worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(jobs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub file: String,
    pub label_code: usize,
    pub label_name: String,
    pub seed: u64,
    pub params_json: String,
}

pub const MANIFEST: &str = "manifest.csv";

/// Writes `images/<label>_<index>.png` and `manifest.csv` under `out_dir`.
pub fn generate_dataset(per_class: usize, cfg: &DatasetConfig, out_dir: &Path, workers: usize) -> Result<Vec<ManifestRow>> {
    let samples = synthesize(per_class, cfg, workers)?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let file = format!("images/{}_{:04}.png", s.label_name, s.meta.index);
        write_gray_png(&out_dir.join(&file), &s.image)?;
        let params_json = serde_json::to_string(&s.meta).map_err(|e| Error::invalid(e.to_string()))?;
        rows.push(ManifestRow { file, label_code: s.label, label_name: s.label_name.to_string(), seed: cfg.seed, params_json });
    }
    write_manifest(&out_dir.join(MANIFEST), &rows)?;
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::invalid(format!("{}: {e}", path.display()))
}

/// An image with its integer label, as loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
    pub label_name: String,
    pub path: PathBuf,
}

/// Loads every manifest entry of a dataset directory, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    read_manifest(&dir.join(MANIFEST))?
        .into_iter()
        .map(|row| {
            let path = dir.join(&row.file);
            Ok(LabeledImage { image: read_png(&path)?, label: row.label_code, label_name: row.label_name, path })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_codes_are_stable() {
        let names: Vec<_> = ClassLabel::ALL.iter().map(|c| (c.code(), c.name())).collect();
        assert_eq!(
            names,
            [(0, "noise"), (1, "fiveg"), (2, "lte"), (3, "fiveg_plus_radar"), (4, "lte_plus_radar")]
        );
        assert_eq!(Task::Target.class_names(), ["radar", "fiveg", "fiveg_plus_radar"]);
        assert_eq!(ClassLabel::from_code(4), Some(ClassLabel::LtePlusRadar));
        assert_eq!(ClassLabel::from_code(5), None);
    }

    #[test]
    fn default_configs_validate() {
        DatasetConfig::new(Task::Source, 0).validate().unwrap();
        DatasetConfig::new(Task::Target, 0).validate().unwrap();
    }

    #[test]
    fn composite_scenes_keep_radar_clear_of_the_block() {
        let cfg = DatasetConfig::new(Task::Source, 3);
        for i in 0..200 {
            let mut rng = RngState::new(i);
            let e = draw_scene(ClassLabel::FiveGPlusRadar.content(), &cfg, &mut rng);
            assert_eq!(e.len(), 2);
            let (a, b) = (e[0].band(), e[1].band());
            assert!(b.1 + GUARD <= a.0 + 1e-6 || a.1 + GUARD <= b.0 + 1e-6, "{a:?} vs {b:?}");
            for x in &e {
                x.validate(cfg.band_span).unwrap();
            }
        }
    }
}
