use std::fmt;

use super::train::TrainRun;
use crate::error::{Error, Result};

/// When a run counts as converged: validation accuracy at or above
/// `fraction` × the mean of its last `tail` epochs, held for `persistence`
/// consecutive epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Criterion {
    pub fraction: f64,
    pub tail: usize,
    pub persistence: usize,
}

impl Default for Criterion {
    fn default() -> Self {
        Criterion { fraction: 0.95, tail: 5, persistence: 3 }
    }
}

impl Criterion {
    pub fn with_fraction(fraction: f64) -> Self {
        Criterion { fraction, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) || self.tail == 0 || self.persistence == 0 {
            return Err(Error::invalid(format!("bad convergence criterion {self:?}")));
        }
        Ok(())
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "first epoch with validation accuracy ≥ {} × mean of the final {} epochs, held for {} consecutive epochs",
            self.fraction, self.tail, self.persistence
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Convergence {
    /// 1-based epoch.
    Epoch(usize),
    /// Orders after every epoch.
    Never,
}

impl Convergence {
    pub fn epoch(self) -> Option<usize> {
        match self {
            Convergence::Epoch(e) => Some(e),
            Convergence::Never => None,
        }
    }
}

impl fmt::Display for Convergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Convergence::Epoch(e) => write!(f, "{e}"),
            Convergence::Never => f.write_str("no convergence"),
        }
    }
}

/// Applies `criterion` to a validation-accuracy trace.
pub fn convergence_of(acc: &[f64], criterion: Criterion) -> Result<Convergence> {
    criterion.validate()?;
    if acc.is_empty() {
        return Err(Error::invalid("convergence of an empty run"));
    }
    let tail = &acc[acc.len().saturating_sub(criterion.tail)..];
    let threshold = criterion.fraction * tail.iter().sum::<f64>() / tail.len() as f64;
    let p = criterion.persistence;
    Ok((0..acc.len())
        .find(|&e| e + p <= acc.len() && acc[e..e + p].iter().all(|&a| a >= threshold))
        .map_or(Convergence::Never, |e| Convergence::Epoch(e + 1)))
}

pub fn convergence_epoch(run: &TrainRun, criterion: Criterion) -> Result<Convergence> {
    let acc = run.val_accuracies().ok_or_else(|| Error::invalid("run has no validation accuracy"))?;
    convergence_of(&acc, criterion)
}

/// Relative speed-up `(scratch − pretrained) / scratch` in percent; undefined
/// unless both converged.
pub fn improvement_percent(pretrained: Convergence, scratch: Convergence) -> Option<f64> {
    let (p, s) = (pretrained.epoch()?, scratch.epoch()?);
    Some(100.0 * (s as f64 - p as f64) / s as f64)
}

/// Published reference point: 32 vs 66 epochs on captured lab data.
pub const CONTEXT_EPOCHS: (usize, usize) = (32, 66);

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub criterion: Criterion,
    pub pretrained: Convergence,
    pub scratch: Convergence,
    pub improvement_percent: Option<f64>,
    /// Seeds behind the figures; more than one means per-arm medians.
    pub seeds: Vec<u64>,
}

impl ConvergenceReport {
    pub fn from_epochs(pretrained: Convergence, scratch: Convergence, criterion: Criterion, seeds: Vec<u64>) -> Self {
        ConvergenceReport {
            criterion,
            pretrained,
            scratch,
            improvement_percent: improvement_percent(pretrained, scratch),
            seeds,
        }
    }

    pub fn summary(&self) -> String {
        let (cp, cs) = CONTEXT_EPOCHS;
        let ctx = improvement_percent(Convergence::Epoch(cp), Convergence::Epoch(cs)).unwrap_or(f64::NAN);
        let imp = match self.improvement_percent {
            Some(v) => format!("{v:.1}%"),
            None => "undefined".into(),
        };
        format!(
            "# reference context (captured lab data): pretrained {cp} vs scratch {cs} epochs, {ctx:.1}% faster\n\
             criterion: {}\n\
             seeds: {:?}{}\n\
             pretrained: {}\n\
             scratch: {}\n\
             improvement: {imp}\n",
            self.criterion,
            self.seeds,
            if self.seeds.len() > 1 { " (per-arm medians)" } else { "" },
            self.pretrained,
            self.scratch,
        )
    }
}

fn check_protocol(a: &TrainRun, b: &TrainRun) -> Result<()> {
    let (ca, cb) = (&a.config, &b.config);
    let same = a.data_digest == b.data_digest
        && a.task == b.task
        && a.classifier == b.classifier
        && a.val_indices == b.val_indices
        && ca.epochs == cb.epochs
        && ca.batch_size == cb.batch_size
        && ca.lr == cb.lr
        && ca.weight_decay == cb.weight_decay
        && ca.seed == cb.seed
        && a.epochs.len() == b.epochs.len();
    if !same {
        return Err(Error::invalid("runs differ in data, model, schedule or seed and cannot be compared"));
    }
    Ok(())
}

/// Compares two runs that share data, model, schedule and seed.
pub fn compare_runs(pretrained: &TrainRun, scratch: &TrainRun, criterion: Criterion) -> Result<ConvergenceReport> {
    check_protocol(pretrained, scratch)?;
    Ok(ConvergenceReport::from_epochs(
        convergence_epoch(pretrained, criterion)?,
        convergence_epoch(scratch, criterion)?,
        criterion,
        vec![pretrained.seed()],
    ))
}

/// Lower median; `Never` sorts last.
pub fn median(values: &[Convergence]) -> Option<Convergence> {
    let mut v = values.to_vec();
    v.sort();
    v.get((v.len().max(1) - 1) / 2).copied()
}

/// Per-arm medians across seed-paired runs.
pub fn compare_seeds(pairs: &[(&TrainRun, &TrainRun)], criterion: Criterion) -> Result<ConvergenceReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no runs to compare"));
    }
    let mut pre = Vec::new();
    let mut scr = Vec::new();
    for (p, s) in pairs {
        let r = compare_runs(p, s, criterion)?;
        pre.push(r.pretrained);
        scr.push(r.scratch);
    }
    Ok(ConvergenceReport::from_epochs(
        median(&pre).expect("non-empty"),
        median(&scr).expect("non-empty"),
        criterion,
        pairs.iter().map(|(p, _)| p.seed()).collect(),
    ))
}
