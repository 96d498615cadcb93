//! Training loop: hybrid objective, AdamW with cosine decay, EMA, validation
//! and checkpoint retention.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::{Checkpoint, OptimizerState};
use super::ema::EmaState;
use super::losses::{losses_with, NoiseDraw};
use super::schedule::{DiffusionConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::numerics::params::reduce_gradients;
use crate::numerics::{Gradients, ParamStore, RngState, Scalar, Tape, Tensor};
use crate::unet::UNet;

const SPLIT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const VAL_STREAM: u64 = 4;
const INIT_STREAM: u64 = 5;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const OPTIMIZER_FILE: &str = "last.opt";
pub const LOSS_FILE: &str = "loss.csv";
pub const VAL_FILE: &str = "val.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the final step.
    pub lr_min: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// Fraction of the dataset held out for validation, fixed by the seed.
    pub val_fraction: f64,
    pub val_interval: usize,
    /// Steps between `last.ckpt` writes; the final step always writes.
    pub checkpoint_interval: usize,
    pub workers: usize,
    pub seed: u64,
    pub log_interval: usize,
    /// Stop after this step (checkpointing it) without changing the
    /// schedule, so a later `resume` continues the same run.
    pub halt_at: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 3000,
            batch_size: 16,
            lr: 1e-4,
            lr_min: 0.0,
            weight_decay: 0.0,
            ema_decay: 0.999,
            val_fraction: 0.1,
            val_interval: 250,
            checkpoint_interval: 500,
            workers: 1,
            seed: 0,
            log_interval: 100,
            halt_at: None,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr {
            return bad("need 0 <= lr_min <= lr and lr > 0");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay <= 1.0) {
            return bad("ema_decay must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.val_interval == 0 {
            return bad("val_interval must be positive");
        }
        if self.workers == 0 {
            return bad("workers must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub simple: f64,
    pub vlb: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<StepRecord>,
    /// `(step, validation loss)` pairs.
    pub val_trace: Vec<(usize, f64)>,
    pub best_step: Option<usize>,
    pub best_val: Option<f64>,
    pub train_count: usize,
    pub val_count: usize,
}

/// Deterministic train/validation index split.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    RngState::with_stream(seed, SPLIT_STREAM).shuffle(&mut idx);
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    (train, val.into_iter().collect())
}

/// Initial weights for a run seeded with `seed`.
pub fn initial_weights<S: Scalar>(net: &UNet, seed: u64) -> ParamStore<S> {
    net.init(&mut RngState::with_stream(seed, INIT_STREAM))
}

struct Batcher {
    train: Vec<usize>,
    seed: u64,
    epoch: Option<(usize, Vec<usize>)>,
}

impl Batcher {
    /// Dataset index for global sample position `pos` (epoch-wise shuffles).
    fn index(&mut self, pos: usize) -> usize {
        let n = self.train.len();
        let epoch = pos / n;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order = self.train.clone();
            RngState::with_stream(self.seed, ORDER_STREAM).derive(epoch as u64).shuffle(&mut order);
            self.epoch = Some((epoch, order));
        }
        self.epoch.as_ref().unwrap().1[pos % n]
    }
}

struct Shard<S: Scalar> {
    x0: Tensor<S>,
    draw: NoiseDraw<S>,
    weight: f64,
}

/// Trains `net` on images `data` (each `[C, H, W]`, scaled to [-1, 1]).
///
/// Files written to `out_dir`: `last.ckpt`, `best.ckpt` (lowest validation
/// loss, or the final weights when nothing is held out), `last.opt`,
/// `loss.csv` and `val.csv`. With `resume`, training continues from
/// `last.ckpt`/`last.opt` and the existing traces. `config_text` is stored
/// in every checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train<S: Scalar>(
    net: &UNet,
    diffusion: &DiffusionConfig,
    data: &[Tensor<S>],
    settings: &TrainSettings,
    out_dir: &Path,
    config_text: &str,
    resume: bool,
    report: &mut TrainReport,
) -> Result<ParamStore<S>> {
    settings.validate()?;
    diffusion.validate()?;
    let sched = diffusion.schedule()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let sample_shape = data[0].shape().to_vec();
    let cfg = net.config();
    if sample_shape != [cfg.in_channels, cfg.resolution, cfg.resolution] {
        return Err(Error::shape("training data", &sample_shape, &[cfg.in_channels, cfg.resolution, cfg.resolution]));
    }
    if let Some(bad) = data.iter().find(|d| d.shape() != &sample_shape[..]) {
        return Err(Error::shape("training data", bad.shape(), &sample_shape));
    }
    if diffusion.variance_mode.is_learned() != cfg.learned_variance {
        return Err(Error::Config("variance mode and network output head disagree".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (train_idx, val_idx) = split_indices(data.len(), settings.val_fraction, settings.seed);
    report.train_count = train_idx.len();
    report.val_count = val_idx.len();
    let val_draws = validation_draws::<S>(&val_idx, &sample_shape, &sched, settings.seed);

    let (mut params, mut ema, mut opt, mut start, mut best) = if resume {
        let ckpt = Checkpoint::<S>::load(&out_dir.join(LAST_CHECKPOINT))?;
        let state = OptimizerState::<S>::load(&out_dir.join(OPTIMIZER_FILE))?;
        net.check_params(&ckpt.weights)?;
        let mut opt = AdamW::new(adam_config(settings), &ckpt.weights);
        opt.step = state.adam_step;
        opt.m = state.m;
        opt.v = state.v;
        let ema = EmaState { decay: settings.ema_decay, shadow: ckpt.ema };
        let best = (state.best_step > 0).then_some((state.best_step as usize, state.best_val));
        *report = TrainReport {
            trace: read_loss_trace(&out_dir.join(LOSS_FILE), state.step as usize)?,
            val_trace: read_val_trace(&out_dir.join(VAL_FILE), state.step as usize)?,
            best_step: best.map(|b| b.0),
            best_val: best.map(|b| b.1),
            train_count: train_idx.len(),
            val_count: val_idx.len(),
        };
        (ckpt.weights, ema, opt, state.step as usize, best)
    } else {
        let params: ParamStore<S> = initial_weights(net, settings.seed);
        let ema = EmaState::new(settings.ema_decay, &params)?;
        let opt = AdamW::new(adam_config(settings), &params);
        report.trace.clear();
        report.val_trace.clear();
        (params, ema, opt, 0, None)
    };

    let mut batcher = Batcher { train: train_idx, seed: settings.seed, epoch: None };
    let clock = Instant::now();
    while start < settings.steps {
        let step = start + 1;
        let lr = cosine_lr(settings.lr, settings.lr_min, step - 1, settings.steps);
        let shards = build_shards(&mut batcher, data, step, settings, &sample_shape, &sched);
        let (grads, loss, simple, vlb) = shard_gradients(net, &params, &shards, &sched, diffusion)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.update(&mut params, &grads, lr)?;
        let decay = settings.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64));
        ema.update_with(decay, &params)?;
        report.trace.push(StepRecord { step, loss, simple, vlb, lr });
        start = step;

        if settings.log_interval > 0 && step % settings.log_interval == 0 {
            let window = &report.trace[report.trace.len().saturating_sub(settings.log_interval)..];
            let mean = window.iter().map(|r| r.simple).sum::<f64>() / window.len() as f64;
            log::info!(
                "step {step}/{} simple {mean:.4} lr {lr:.2e} ({:.2}s/step)",
                settings.steps,
                clock.elapsed().as_secs_f64() / report.trace.len().max(1) as f64
            );
        }

        let halting = settings.halt_at == Some(step);
        let last = step == settings.steps;
        if !val_draws.is_empty() && (step % settings.val_interval == 0 || last) {
            let v = validation_loss(net, &params, data, &val_draws, &sched, diffusion, settings.batch_size)?;
            report.val_trace.push((step, v));
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((step, v));
                let c = Checkpoint { config: config_text.to_string(), weights: params.clone(), ema: ema.shadow.clone() };
                c.save(&out_dir.join(BEST_CHECKPOINT))?;
            }
        }
        if last || halting || (settings.checkpoint_interval > 0 && step % settings.checkpoint_interval == 0) {
            let c = Checkpoint { config: config_text.to_string(), weights: params.clone(), ema: ema.shadow.clone() };
            c.save(&out_dir.join(LAST_CHECKPOINT))?;
            if val_draws.is_empty() && last {
                c.save(&out_dir.join(BEST_CHECKPOINT))?;
            }
            let (best_step, best_val) = best.map_or((0, f64::INFINITY), |(s, v)| (s as u64, v));
            OptimizerState { step: step as u64, adam_step: opt.step, best_val, best_step, m: opt.m.clone(), v: opt.v.clone() }
                .save(&out_dir.join(OPTIMIZER_FILE))?;
            write_traces(out_dir, report)?;
        }
        if halting {
            break;
        }
    }
    report.best_step = best.map(|b| b.0);
    report.best_val = best.map(|b| b.1);
    Ok(params)
}

fn adam_config(s: &TrainSettings) -> AdamWConfig {
    AdamWConfig { lr: s.lr, weight_decay: s.weight_decay, ..AdamWConfig::default() }
}

fn build_shards<S: Scalar>(
    batcher: &mut Batcher,
    data: &[Tensor<S>],
    step: usize,
    settings: &TrainSettings,
    sample_shape: &[usize],
    sched: &NoiseSchedule,
) -> Vec<Shard<S>> {
    let b = settings.batch_size;
    let step_rng = RngState::with_stream(settings.seed, NOISE_STREAM).derive(step as u64);
    let mut one = vec![1];
    one.extend_from_slice(sample_shape);
    let items: Vec<(Tensor<S>, NoiseDraw<S>)> = (0..b)
        .map(|j| {
            let idx = batcher.index((step - 1) * b + j);
            let draw = NoiseDraw::sample(&mut step_rng.derive(j as u64), &one, sched.timesteps());
            (data[idx].clone(), draw)
        })
        .collect();
    let k = settings.workers.min(b);
    let per = b.div_ceil(k);
    items
        .chunks(per)
        .map(|chunk| {
            let x0 = Tensor::stack(&chunk.iter().map(|c| c.0.clone()).collect::<Vec<_>>()).unwrap();
            let eps = Tensor::stack(&chunk.iter().map(|c| c.1.eps.index_first(0)).collect::<Vec<_>>()).unwrap();
            let t = chunk.iter().map(|c| c.1.t[0]).collect();
            Shard { x0, draw: NoiseDraw { t, eps }, weight: chunk.len() as f64 / b as f64 }
        })
        .collect()
}

type ShardResult<S> = Result<(Gradients<S>, f64, f64, f64)>;

fn shard_gradients<S: Scalar>(
    net: &UNet,
    params: &ParamStore<S>,
    shards: &[Shard<S>],
    sched: &NoiseSchedule,
    diffusion: &DiffusionConfig,
) -> ShardResult<S> {
    let one = |s: &Shard<S>| -> ShardResult<S> {
        let tape = Tape::new();
        let b = params.bind(&tape);
        let parts = losses_with(&tape, |x, t| net.forward(&tape, &b, x, t), &s.x0, &s.draw, sched, diffusion)?;
        let scaled = parts.total.scale(s.weight)?;
        tape.backward(scaled)?;
        let vlb = parts.vlb.map_or(0.0, |v| v.item().as_f64());
        Ok((tape.gradients(), parts.total.item().as_f64() * s.weight, parts.simple.item().as_f64() * s.weight, vlb * s.weight))
    };
    let results: Vec<ShardResult<S>> = if shards.len() == 1 {
        vec![one(&shards[0])]
    } else {
        std::thread::scope(|sc| {
            let handles: Vec<_> = shards.iter().map(|s| sc.spawn(move || one(s))).collect();
            handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
        })
    };
    let mut grads = Vec::with_capacity(results.len());
    let (mut loss, mut simple, mut vlb) = (0.0, 0.0, 0.0);
    for r in results {
        let (g, l, s, v) = match r {
            Ok(x) => x,
            Err(Error::NonFinite { .. }) => return Ok((Gradients::new(), f64::NAN, f64::NAN, f64::NAN)),
            Err(e) => return Err(e),
        };
        grads.push(g);
        loss += l;
        simple += s;
        vlb += v;
    }
    Ok((reduce_gradients(&grads), loss, simple, vlb))
}

fn validation_draws<S: Scalar>(val_idx: &[usize], shape: &[usize], sched: &NoiseSchedule, seed: u64) -> Vec<(usize, NoiseDraw<S>)> {
    let rng = RngState::with_stream(seed, VAL_STREAM);
    let mut one = vec![1];
    one.extend_from_slice(shape);
    val_idx.iter().enumerate().map(|(j, &i)| (i, NoiseDraw::sample(&mut rng.derive(j as u64), &one, sched.timesteps()))).collect()
}

/// Mean training objective over the held-out set with noise fixed per run.
fn validation_loss<S: Scalar>(
    net: &UNet,
    params: &ParamStore<S>,
    data: &[Tensor<S>],
    draws: &[(usize, NoiseDraw<S>)],
    sched: &NoiseSchedule,
    diffusion: &DiffusionConfig,
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in draws.chunks(batch) {
        let x0 = Tensor::stack(&chunk.iter().map(|(i, _)| data[*i].clone()).collect::<Vec<_>>())?;
        let eps = Tensor::stack(&chunk.iter().map(|(_, d)| d.eps.index_first(0)).collect::<Vec<_>>())?;
        let draw = NoiseDraw { t: chunk.iter().map(|(_, d)| d.t[0]).collect(), eps };
        let tape = Tape::no_grad();
        let b = params.bind(&tape);
        let parts = losses_with(&tape, |x, t| net.forward(&tape, &b, x, t), &x0, &draw, sched, diffusion)?;
        total += parts.total.item().as_f64() * chunk.len() as f64;
    }
    Ok(total / draws.len() as f64)
}

fn write_traces(dir: &Path, report: &TrainReport) -> Result<()> {
    let mut s = String::from("step,loss,simple,vlb,lr\n");
    for r in &report.trace {
        let _ = writeln!(s, "{},{:e},{:e},{:e},{:e}", r.step, r.loss, r.simple, r.vlb, r.lr);
    }
    write_file(&dir.join(LOSS_FILE), &s)?;
    let mut s = String::from("step,val_loss\n");
    for (step, v) in &report.val_trace {
        let _ = writeln!(s, "{step},{v:e}");
    }
    write_file(&dir.join(VAL_FILE), &s)
}

fn write_file(path: &PathBuf, s: &str) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn parse<T: std::str::FromStr>(path: &Path, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Checkpoint(format!("{}: malformed value `{v}`", path.display())))
}

/// Loss rows up to and including `upto`.
pub fn read_loss_trace(path: &Path, upto: usize) -> Result<Vec<StepRecord>> {
    let mut out = Vec::new();
    for row in read_csv_rows(path)? {
        if row.len() != 5 {
            return Err(Error::Checkpoint(format!("{}: bad row", path.display())));
        }
        let step: usize = parse(path, &row[0])?;
        if step <= upto {
            out.push(StepRecord {
                step,
                loss: parse(path, &row[1])?,
                simple: parse(path, &row[2])?,
                vlb: parse(path, &row[3])?,
                lr: parse(path, &row[4])?,
            });
        }
    }
    Ok(out)
}

fn read_val_trace(path: &Path, upto: usize) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for row in read_csv_rows(path)? {
        if row.len() != 2 {
            return Err(Error::Checkpoint(format!("{}: bad row", path.display())));
        }
        let step: usize = parse(path, &row[0])?;
        if step <= upto {
            out.push((step, parse(path, &row[1])?));
        }
    }
    Ok(out)
}
