use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use log::info;
use specgen_core::diffusion::{
    sample_loop_at, train as train_diffusion, Checkpoint, DiffusionConfig, TrainReport, TrainSettings, UNetDenoiser,
};
use specgen_core::image::{read_png, write_gray_png, Image};
use specgen_core::metrics::{batch_compare, match_gallery, NamedImage, SsimParams};
use specgen_core::numerics::{RngState, Tensor};
use specgen_core::rfscene::{generate_dataset, load_dataset, ClassLabel, DatasetConfig, LabeledImage, Task, MANIFEST};
use specgen_core::transfer::{
    predict, pretrain_source, run_study, ClassifierConfig, Criterion, LabeledSet, StudyConfig, TrainConfig,
};
use specgen_core::unet::{UNet, UNetConfig};

use crate::config::RunConfig;
use crate::{verify as oracles, Common, Usage};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const SAMPLE_SIDECAR: &str = "samples.json";

/// RNG stream for reverse-chain noise, kept apart from every training stream.
const SAMPLE_STREAM: u64 = 0x5A4D_504C;

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply("run", "seed", common.seed)?;
    cfg.apply("run", "workers", common.workers)?;
    cfg.apply("run", "out", common.out.as_ref().map(|p| p.display()))?;
    Ok(cfg)
}

fn workers(cfg: &RunConfig) -> Result<usize> {
    Ok(cfg.get::<usize>("run", "workers")?.max(1))
}

fn required_dir(cfg: &RunConfig, section: &str, key: &str) -> Result<PathBuf> {
    let dir: PathBuf = cfg.get(section, key)?;
    if !dir.is_dir() {
        return Err(Usage(format!("{} is not a directory", dir.display())).into());
    }
    Ok(dir)
}

fn dataset_config(cfg: &RunConfig, seed: u64) -> Result<DatasetConfig> {
    let task: Task = cfg.get("data", "task")?;
    Ok(DatasetConfig {
        duration: cfg.get("data", "duration")?,
        nfft: cfg.get("data", "nfft")?,
        hop: cfg.get("data", "hop")?,
        window: cfg.get("data", "window")?,
        resolution: cfg.get("data", "resolution")?,
        dyn_range_db: cfg.get("data", "dyn_range_db")?,
        ..DatasetConfig::new(task, seed)
    })
}

fn model_config(cfg: &RunConfig) -> Result<(UNetConfig, DiffusionConfig)> {
    let diffusion = DiffusionConfig {
        timesteps: cfg.get("diffusion", "timesteps")?,
        beta_start: cfg.get("diffusion", "beta_start")?,
        beta_end: cfg.get("diffusion", "beta_end")?,
        variance_mode: cfg.get("diffusion", "variance_mode")?,
        vlb_weight: cfg.get("diffusion", "vlb_weight")?,
    };
    let unet = UNetConfig {
        in_channels: 1,
        resolution: cfg.get("data", "resolution")?,
        base_channels: cfg.get("model", "base_channels")?,
        channel_mult: cfg.list("model", "channel_mult")?,
        res_blocks_per_level: cfg.get("model", "res_blocks")?,
        attention_resolutions: cfg.list::<usize>("model", "attention_resolutions")?.into_iter().collect::<BTreeSet<_>>(),
        attention_heads: cfg.get("model", "attention_heads")?,
        time_embed_dim: cfg.get("model", "time_embed_dim")?,
        learned_variance: diffusion.variance_mode.is_learned(),
    };
    Ok((unet, diffusion))
}

/// Configuration stored inside checkpoints: everything that shapes the
/// weights, without the output location or thread count.
fn checkpoint_text(cfg: &RunConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.set("run", "out", "")?;
    c.set("run", "workers", "")?;
    Ok(c.render(&["run", "data", "model", "diffusion", "train"]))
}

fn square_resolution(images: &[&Image]) -> Result<usize> {
    let first = images.first().context("dataset is empty")?;
    let (h, w) = first.shape();
    if h != w || images.iter().any(|i| i.shape() != (h, w)) {
        bail!("images must share one square size, found {h}×{w} and others");
    }
    Ok(h)
}

fn load_labeled(dir: &Path) -> Result<Vec<LabeledImage>> {
    if !dir.join(MANIFEST).is_file() {
        return Err(Usage(format!("{} has no {MANIFEST}", dir.display())).into());
    }
    Ok(load_dataset(dir)?)
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// `source` (five classes) or `target` (shifted four-class task).
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

pub fn synth(a: SynthArgs) -> Result<bool> {
    let mut cfg = resolve(&a.common)?;
    cfg.apply("data", "per_class", a.per_class)?;
    cfg.apply("data", "task", a.task)?;
    cfg.apply("data", "resolution", a.resolution)?;
    let seed: u64 = cfg.get("run", "seed")?;
    let out: PathBuf = cfg.get("run", "out")?;
    let dc = dataset_config(&cfg, seed)?;
    let rows = generate_dataset(cfg.get("data", "per_class")?, &dc, &out, workers(&cfg)?)?;
    cfg.write(&out, &["run", "data"])?;
    println!("{} {} images → {}", rows.len(), dc.task, out.display());
    Ok(true)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this step without changing the schedule.
    #[arg(long)]
    pub halt_at: Option<usize>,
}

pub fn train(a: TrainArgs) -> Result<bool> {
    let mut cfg = resolve(&a.common)?;
    cfg.apply("train", "data", a.data.as_ref().map(|p| p.display()))?;
    cfg.apply("train", "steps", a.steps)?;
    cfg.apply("train", "batch_size", a.batch_size)?;
    cfg.apply("train", "lr", a.lr)?;
    let seed: u64 = cfg.get("run", "seed")?;
    let out: PathBuf = cfg.get("run", "out")?;
    let data_dir = required_dir(&cfg, "train", "data")?;

    let items = load_labeled(&data_dir)?;
    let res = square_resolution(&items.iter().map(|i| &i.image).collect::<Vec<_>>())?;
    cfg.set("data", "resolution", res.to_string())?;
    let (ucfg, dcfg) = model_config(&cfg)?;
    let net = UNet::new(ucfg)?;
    let data: Vec<Tensor<f32>> = items
        .iter()
        .map(|i| Tensor::new(vec![1, res, res], i.image.data().iter().map(|&v| (2.0 * v - 1.0) as f32).collect()))
        .collect::<specgen_core::Result<_>>()?;
    let settings = TrainSettings {
        steps: cfg.get("train", "steps")?,
        batch_size: cfg.get("train", "batch_size")?,
        lr: cfg.get("train", "lr")?,
        lr_min: cfg.get("train", "lr_min")?,
        weight_decay: cfg.get("train", "weight_decay")?,
        ema_decay: cfg.get("train", "ema_decay")?,
        val_fraction: cfg.get("train", "val_fraction")?,
        val_interval: cfg.get("train", "val_interval")?,
        checkpoint_interval: cfg.get("train", "checkpoint_interval")?,
        workers: workers(&cfg)?,
        seed,
        log_interval: cfg.get("train", "log_interval")?,
        halt_at: a.halt_at,
    };
    let text = checkpoint_text(&cfg)?;
    if a.resume {
        let prev = Checkpoint::<f32>::load(&out.join(LAST_CHECKPOINT)).context("resuming")?;
        if prev.config != text {
            bail!("resolved configuration differs from the one stored in {}", out.join(LAST_CHECKPOINT).display());
        }
    }
    info!("{} images at {res}×{res}, {} parameters", data.len(), net.param_count());
    let mut report = TrainReport::default();
    train_diffusion(&net, &dcfg, &data, &settings, &out, &text, a.resume, &mut report)?;
    cfg.write(&out, &["run", "data", "model", "diffusion", "train"])?;
    let last = report.trace.last().map_or(String::from("-"), |r| format!("step {} simple {:.4}", r.step, r.simple));
    let best = match (report.best_step, report.best_val) {
        (Some(s), Some(v)) => format!("best validation {v:.4} at step {s}"),
        _ => "no validation split".into(),
    };
    println!("{last}; {best} → {}", out.display());
    Ok(true)
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint file, or a training directory (uses its `best.ckpt`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Images per reverse-chain batch; does not change the images.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Sample with the live weights instead of the EMA shadow.
    #[arg(long)]
    pub no_ema: bool,
}

pub fn sample(a: SampleArgs) -> Result<bool> {
    let mut cfg = resolve(&a.common)?;
    cfg.apply("sample", "checkpoint", a.checkpoint.as_ref().map(|p| p.display()))?;
    cfg.apply("sample", "count", a.count)?;
    cfg.apply("sample", "batch", a.batch)?;
    if a.no_ema {
        cfg.set("sample", "ema", "false")?;
    }
    let seed: u64 = cfg.get("run", "seed")?;
    let out: PathBuf = cfg.get("run", "out")?;
    let mut path: PathBuf = cfg.get("sample", "checkpoint")?;
    if path.is_dir() {
        path = path.join(BEST_CHECKPOINT);
    }
    let count: usize = cfg.get("sample", "count")?;
    let batch: usize = cfg.get::<usize>("sample", "batch")?.max(1);
    let ema: bool = cfg.get("sample", "ema")?;

    let ck = Checkpoint::<f32>::load(&path)?;
    let stored = RunConfig::parse(&ck.config).context("configuration stored in checkpoint")?;
    let (ucfg, dcfg) = model_config(&stored)?;
    let res = ucfg.resolution;
    let net = UNet::new(ucfg)?;
    let den = UNetDenoiser { net: &net, params: if ema { &ck.ema } else { &ck.weights } };
    let sched = dcfg.schedule()?;
    let rng = RngState::with_stream(seed, SAMPLE_STREAM);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut files = Vec::with_capacity(count);
    for first in (0..count).step_by(batch) {
        let n = batch.min(count - first);
        let start = Instant::now();
        let x = sample_loop_at(&den, &[n, 1, res, res], &rng, first, &sched, dcfg.variance_mode, workers(&cfg)?)?;
        info!("samples {first}..{}: {:.2}s per sample", first + n, start.elapsed().as_secs_f64() / n as f64);
        for (i, px) in x.data().chunks(res * res).enumerate() {
            let name = format!("sample_{:04}.png", first + i);
            write_gray_png(&out.join(&name), &Image::new(res, res, px.iter().map(|&v| v as f64).collect())?)?;
            files.push(name);
        }
    }
    let sidecar = serde_json::json!({
        "checkpoint": path.display().to_string(),
        "checkpoint_id": format!("{:08x}", ck.id()),
        "weights": if ema { "ema" } else { "live" },
        "seed": seed,
        "count": count,
        "files": files,
    });
    std::fs::write(out.join(SAMPLE_SIDECAR), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    cfg.write(&out, &["run", "sample"])?;
    println!("{count} samples from checkpoint {:08x} → {}", ck.id(), out.display());
    Ok(true)
}

/// PNGs directly inside `dir`, sorted by name, keyed by file stem.
fn png_dir(dir: &Path) -> Result<Vec<NamedImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(NamedImage::new(stem(p), read_png(p)?))).collect()
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of generated PNGs.
    #[arg(long)]
    pub generated: Option<PathBuf>,
    /// Dataset directory (with manifest) or a plain PNG directory.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Best and worst matches shown per gallery.
    #[arg(long)]
    pub k: Option<usize>,
    /// Labelled source dataset for a probe classifier that labels each
    /// generated image; needs `--seed`.
    #[arg(long)]
    pub probe_data: Option<PathBuf>,
}

pub fn eval(a: EvalArgs) -> Result<bool> {
    let mut cfg = resolve(&a.common)?;
    cfg.apply("eval", "generated", a.generated.as_ref().map(|p| p.display()))?;
    cfg.apply("eval", "reference", a.reference.as_ref().map(|p| p.display()))?;
    cfg.apply("eval", "k", a.k)?;
    cfg.apply("eval", "probe_data", a.probe_data.as_ref().map(|p| p.display()))?;
    let out: PathBuf = cfg.get("run", "out")?;
    let gen = png_dir(&required_dir(&cfg, "eval", "generated")?)?;
    if gen.is_empty() {
        return Err(Usage("generated directory holds no PNG images".into()).into());
    }
    let ref_dir = required_dir(&cfg, "eval", "reference")?;
    let refs = if ref_dir.join(MANIFEST).is_file() {
        load_dataset(&ref_dir)?.into_iter().map(|i| NamedImage::new(stem(&i.path), i.image)).collect()
    } else {
        png_dir(&ref_dir)?
    };
    if refs.is_empty() {
        return Err(Usage("reference directory holds no images".into()).into());
    }
    let params = SsimParams {
        window: cfg.get("eval", "window")?,
        k1: cfg.get("eval", "k1")?,
        k2: cfg.get("eval", "k2")?,
        l: cfg.get("eval", "dynamic_range")?,
    };
    let k: usize = cfg.get("eval", "k")?;
    let mut report = batch_compare(&gen, &refs, params, workers(&cfg)?)?;

    if let Some(dir) = cfg.get_opt::<PathBuf>("eval", "probe_data")? {
        let seed: u64 = cfg.get("run", "seed")?;
        let set = LabeledSet::from_labeled(Task::Source, &load_labeled(&dir)?)?;
        let res = square_resolution(&set.images.iter().collect::<Vec<_>>())?;
        let ccfg = ClassifierConfig::new(res, Task::Source.class_count());
        let (theta, run) = pretrain_source::<f32>(&set, &ccfg, &TrainConfig::new(seed, cfg.get("eval", "probe_epochs")?))?;
        info!("probe classifier: best validation accuracy {:?}", run.best_val_accuracy());
        let images: Vec<&Image> = gen.iter().map(|g| &g.image).collect();
        let labels = predict(&ccfg, &theta, &images, 64)?
            .into_iter()
            .map(|c| ClassLabel::from_code(c).context("probe predicted an unknown class"))
            .collect::<Result<Vec<_>>>()?;
        report.attach_labels(&labels)?;
    }

    report.write(&out, k)?;
    match_gallery(&report, &gen, &refs, k, &out)?;
    cfg.write(&out, &["run", "eval"])?;
    print!("{}", report.summary(k));
    Ok(true)
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[command(flatten)]
    pub common: Common,
    /// Source-task dataset directory.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Target-task dataset directory.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Number of seeds, counting up from `--seed`.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub source_epochs: Option<usize>,
    #[arg(long)]
    pub target_epochs: Option<usize>,
    /// Train only the from-scratch control arm.
    #[arg(long)]
    pub scratch_only: bool,
}

pub fn transfer(a: TransferArgs) -> Result<bool> {
    let mut cfg = resolve(&a.common)?;
    cfg.apply("transfer", "source", a.source.as_ref().map(|p| p.display()))?;
    cfg.apply("transfer", "target", a.target.as_ref().map(|p| p.display()))?;
    cfg.apply("transfer", "seeds", a.seeds)?;
    cfg.apply("transfer", "source_epochs", a.source_epochs)?;
    cfg.apply("transfer", "target_epochs", a.target_epochs)?;
    if a.scratch_only {
        cfg.set("transfer", "scratch_only", "true")?;
    }
    let seed: u64 = cfg.get("run", "seed")?;
    let out: PathBuf = cfg.get("run", "out")?;
    let scratch_only: bool = cfg.get("transfer", "scratch_only")?;
    let target = LabeledSet::from_labeled(Task::Target, &load_labeled(&required_dir(&cfg, "transfer", "target")?)?)?;
    // The control arm never touches the source data.
    let source = if scratch_only && cfg.raw("transfer", "source").is_empty() {
        LabeledSet::new(Task::Source, Vec::new(), Vec::new())?
    } else {
        LabeledSet::from_labeled(Task::Source, &load_labeled(&required_dir(&cfg, "transfer", "source")?)?)?
    };
    let n: usize = cfg.get("transfer", "seeds")?;
    if n == 0 {
        return Err(Usage("--seeds must be at least 1".into()).into());
    }
    let criterion = Criterion::with_fraction(cfg.get("transfer", "criterion")?);
    let study_cfg = StudyConfig {
        source_epochs: cfg.get("transfer", "source_epochs")?,
        target_epochs: cfg.get("transfer", "target_epochs")?,
        batch_size: cfg.get("transfer", "batch_size")?,
        lr: cfg.get("transfer", "lr")?,
        finetune_factor: cfg.get("transfer", "finetune_factor")?,
        val_fraction: cfg.get("transfer", "val_fraction")?,
        scratch_only,
        criterion,
        ..StudyConfig::new(square_resolution(&target.images.iter().collect::<Vec<_>>())?, (seed..seed + n as u64).collect())
    };
    let study = run_study(&source, &target, &study_cfg, workers(&cfg)?)?;
    let files = study.write(&out, criterion)?;
    cfg.write(&out, &["run", "transfer"])?;
    print!("{}", std::fs::read_to_string(&files[0])?);
    Ok(true)
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run only checks whose name contains this text.
    #[arg(long)]
    pub filter: Option<String>,
}

/// Seed 0 unless given: the checks are fixed oracles, not experiments.
pub fn verify(a: VerifyArgs) -> Result<bool> {
    let mut cfg = resolve(&a.common)?;
    cfg.apply("verify", "filter", a.filter)?;
    let seed = cfg.get_opt::<u64>("run", "seed")?.unwrap_or(0);
    let filter = cfg.raw("verify", "filter").to_string();
    let outcomes = oracles::run(seed, &filter).ok_or_else(|| Usage(format!("no check matches `{filter}`")))??;
    let (text, ok) = oracles::render(&outcomes);
    print!("{text}");
    if let Some(out) = cfg.get_opt::<PathBuf>("run", "out")? {
        cfg.write(&out, &["run", "verify"])?;
    }
    Ok(ok)
}
