use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::classifier::ClassifierConfig;
use super::convergence::{compare_seeds, convergence_epoch, median, ConvergenceReport, Convergence, Criterion};
use super::plot::plot_curves;
use super::train::{adapt_target, pretrain_source, LabeledSet, TrainConfig, TrainRun};
use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::rfscene::Task;

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub resolution: usize,
    pub seeds: Vec<u64>,
    pub source_epochs: usize,
    pub target_epochs: usize,
    pub batch_size: usize,
    /// Pretraining learning rate; both target arms use `lr × finetune_factor`.
    pub lr: f64,
    pub finetune_factor: f64,
    pub val_fraction: f64,
    /// Skip pretraining and run only the from-scratch arm.
    pub scratch_only: bool,
    pub criterion: Criterion,
}

impl StudyConfig {
    pub fn new(resolution: usize, seeds: Vec<u64>) -> Self {
        StudyConfig {
            resolution,
            seeds,
            source_epochs: 30,
            target_epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            finetune_factor: 0.1,
            val_fraction: 0.2,
            scratch_only: false,
            criterion: Criterion::default(),
        }
    }

    fn train_config(&self, seed: u64, epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig { batch_size: self.batch_size, lr, val_fraction: self.val_fraction, ..TrainConfig::new(seed, epochs) }
    }

    pub fn source_config(&self, seed: u64) -> TrainConfig {
        self.train_config(seed, self.source_epochs, self.lr)
    }

    pub fn target_config(&self, seed: u64) -> TrainConfig {
        self.train_config(seed, self.target_epochs, self.lr * self.finetune_factor)
    }
}

/// Runs for one seed.
#[derive(Debug, Clone)]
pub struct SeedRuns {
    pub seed: u64,
    pub source: Option<TrainRun>,
    pub pretrained: Option<TrainRun>,
    pub scratch: TrainRun,
}

#[derive(Debug, Clone)]
pub struct Study {
    pub runs: Vec<SeedRuns>,
    /// Absent for scratch-only studies.
    pub report: Option<ConvergenceReport>,
    /// Median scratch convergence, always available.
    pub scratch_median: Convergence,
}

enum Job {
    Transfer(u64),
    Scratch(u64),
}

enum Done {
    Transfer(u64, TrainRun, TrainRun),
    Scratch(u64, TrainRun),
}

/// Pretrains on `source`, then fine-tunes on `target` against a scratch
/// baseline for every seed. Independent runs share `workers` threads; each
/// run is single-threaded, so results do not depend on the worker count.
pub fn run_study(source: &LabeledSet, target: &LabeledSet, cfg: &StudyConfig, workers: usize) -> Result<Study> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("transfer study needs at least one seed".into()));
    }
    if cfg.seeds.iter().enumerate().any(|(i, s)| cfg.seeds[..i].contains(s)) {
        return Err(Error::Config(format!("duplicate seeds in {:?}", cfg.seeds)));
    }
    if source.task != Task::Source || target.task != Task::Target {
        return Err(Error::invalid(format!(
            "expected source then target data, got {} and {}",
            source.task, target.task
        )));
    }
    let src_cfg = ClassifierConfig::new(cfg.resolution, Task::Source.class_count());
    let tgt_cfg = src_cfg.with_classes(Task::Target.class_count());
    let mut jobs = Vec::new();
    for &s in &cfg.seeds {
        if !cfg.scratch_only {
            jobs.push(Job::Transfer(s));
        }
        jobs.push(Job::Scratch(s));
    }
    let run_job = |job: &Job| -> Result<Done> {
        match *job {
            Job::Transfer(seed) => {
                let (theta, src_run) = pretrain_source::<f32>(source, &src_cfg, &cfg.source_config(seed))?;
                let (_, run) = adapt_target(Some(&theta), target, &tgt_cfg, &cfg.target_config(seed))?;
                Ok(Done::Transfer(seed, src_run, run))
            }
            Job::Scratch(seed) => {
                let (_, run) = adapt_target::<f32>(None::<&ParamStore<f32>>, target, &tgt_cfg, &cfg.target_config(seed))?;
                Ok(Done::Scratch(seed, run))
            }
        }
    };
    let workers = workers.clamp(1, jobs.len());
    let mut done = Vec::with_capacity(jobs.len());
    for wave in jobs.chunks(workers) {
        let results: Vec<Result<Done>> = std::thread::scope(|s| {
            let handles: Vec<_> = wave.iter().map(|j| s.spawn(|| run_job(j))).collect();
            handles.into_iter().map(|h| h.join().expect("transfer worker panicked")).collect()
        });
        for r in results {
            done.push(r?);
        }
    }

    let mut by_seed: BTreeMap<u64, (Option<TrainRun>, Option<TrainRun>, Option<TrainRun>)> = BTreeMap::new();
    for d in done {
        match d {
            Done::Transfer(s, src, run) => {
                let e = by_seed.entry(s).or_default();
                e.0 = Some(src);
                e.1 = Some(run);
            }
            Done::Scratch(s, run) => by_seed.entry(s).or_default().2 = Some(run),
        }
    }
    let runs: Vec<SeedRuns> = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let (source, pretrained, scratch) = by_seed.remove(&seed).expect("every seed ran");
            SeedRuns { seed, source, pretrained, scratch: scratch.expect("every seed has a scratch run") }
        })
        .collect();

    let scratch_conv = runs.iter().map(|r| convergence_epoch(&r.scratch, cfg.criterion)).collect::<Result<Vec<_>>>()?;
    let report = if cfg.scratch_only {
        None
    } else {
        let pairs: Vec<(&TrainRun, &TrainRun)> =
            runs.iter().map(|r| (r.pretrained.as_ref().expect("transfer arm ran"), &r.scratch)).collect();
        Some(compare_seeds(&pairs, cfg.criterion)?)
    };
    Ok(Study { runs, report, scratch_median: median(&scratch_conv).expect("non-empty") })
}

#[derive(Serialize)]
struct EpochRow<'a> {
    arm: &'a str,
    seed: u64,
    epoch: usize,
    train_loss: f64,
    train_accuracy: f64,
    val_loss: Option<f64>,
    val_accuracy: Option<f64>,
}

/// Per-epoch rows for every run, one CSV.
pub fn write_runs_csv(runs: &[(&str, &TrainRun)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for (arm, run) in runs {
        for e in &run.epochs {
            w.serialize(EpochRow {
                arm,
                seed: run.seed(),
                epoch: e.epoch,
                train_loss: e.train_loss,
                train_accuracy: e.train_accuracy,
                val_loss: e.val_loss,
                val_accuracy: e.val_accuracy,
            })
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl Study {
    /// `report.txt`, `runs.csv` and one `curves_seed{seed}.png` per seed
    /// (target arms only).
    pub fn write(&self, dir: &Path, criterion: Criterion) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = match &self.report {
            Some(r) => r.summary(),
            None => format!("criterion: {criterion}\nscratch only\n"),
        };
        let _ = writeln!(text, "median scratch: {}", self.scratch_median);
        for r in &self.runs {
            let pre = r.pretrained.as_ref().map(|p| convergence_epoch(p, criterion)).transpose()?;
            let scr = convergence_epoch(&r.scratch, criterion)?;
            let src = r.source.as_ref().and_then(|s| s.best_val_accuracy());
            let _ = writeln!(
                text,
                "seed {}: pretrained {}, scratch {}{}",
                r.seed,
                pre.map_or("-".to_string(), |c| c.to_string()),
                scr,
                src.map_or(String::new(), |a| format!(", source best val acc {a:.3}"))
            );
        }
        let report = dir.join("report.txt");
        std::fs::write(&report, text).map_err(|e| Error::io(&report, e))?;

        let mut rows: Vec<(&str, &TrainRun)> = Vec::new();
        for r in &self.runs {
            if let Some(s) = &r.source {
                rows.push(("source", s));
            }
            if let Some(p) = &r.pretrained {
                rows.push(("pretrained", p));
            }
            rows.push(("scratch", &r.scratch));
        }
        let csv = dir.join("runs.csv");
        write_runs_csv(&rows, &csv)?;
        let mut out = vec![report, csv];
        for r in &self.runs {
            let path = dir.join(format!("curves_seed{}.png", r.seed));
            let mut arms: Vec<&TrainRun> = r.pretrained.iter().collect();
            arms.push(&r.scratch);
            plot_curves(&arms, &path)?;
            out.push(path);
        }
        Ok(out)
    }
}
