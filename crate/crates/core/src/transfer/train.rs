use serde::{Deserialize, Serialize};

use super::classifier::{argmax_rows, batch_tensor, check_params, forward, init_classifier, is_head, ClassifierConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::optim::{AdamW, AdamWConfig};
use crate::numerics::{ParamStore, RngState, Scalar, Tape};
use crate::rfscene::{LabeledImage, SpectrogramSample, Task};

/// Images with labels in one task's label space.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub task: Task,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(task: Task, images: Vec<Image>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!("{} images but {} labels", images.len(), labels.len())));
        }
        let k = task.class_count();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} outside the {k}-class {task} task")));
        }
        if let Some(first) = images.first() {
            if let Some(im) = images.iter().find(|im| im.shape() != first.shape()) {
                return Err(Error::shape("labeled set", &[first.height(), first.width()], &[im.height(), im.width()]));
            }
        }
        Ok(LabeledSet { task, images, labels })
    }

    pub fn from_samples(task: Task, samples: &[SpectrogramSample]) -> Result<Self> {
        Self::new(task, samples.iter().map(|s| s.image.clone()).collect(), samples.iter().map(|s| s.label).collect())
    }

    /// Checks each entry's label name against the task's class names.
    pub fn from_labeled(task: Task, items: &[LabeledImage]) -> Result<Self> {
        let names = task.class_names();
        for it in items {
            if names.get(it.label).copied() != Some(it.label_name.as_str()) {
                return Err(Error::invalid(format!(
                    "{}: label {} `{}` is not a {task} class",
                    it.path.display(),
                    it.label,
                    it.label_name
                )));
            }
        }
        Self::new(task, items.iter().map(|s| s.image.clone()).collect(), items.iter().map(|s| s.label).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.task.class_count()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// CRC32 over labels and pixel bits; identifies the data a run used.
    pub fn digest(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(self.task.to_string().as_bytes());
        for (im, &l) in self.images.iter().zip(&self.labels) {
            h.update(&(l as u64).to_le_bytes());
            for v in im.data() {
                h.update(&v.to_bits().to_le_bytes());
            }
        }
        h.finalize()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Per-class share held out for validation.
    pub val_fraction: f64,
    /// Drives initialisation, the split and batch order.
    pub seed: u64,
    /// Layer names (`conv1`, `fc1`, `head`, ...) kept at their initial values.
    pub frozen: Vec<String>,
}

impl TrainConfig {
    pub fn new(seed: u64, epochs: usize) -> Self {
        TrainConfig { epochs, batch_size: 16, lr: 1e-3, weight_decay: 0.0, val_fraction: 0.2, seed, frozen: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch.
    pub train_loss: f64,
    /// Accuracy of the in-epoch mini-batch predictions.
    pub train_accuracy: f64,
    /// Absent when the validation split is empty.
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    /// Indexed like `TrainRun::train_indices`.
    pub train_predictions: Vec<usize>,
    /// Indexed like `TrainRun::val_indices`.
    pub val_predictions: Vec<usize>,
}

/// Everything a training run did, enough to audit its accuracies.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub task: Task,
    pub classifier: ClassifierConfig,
    pub config: TrainConfig,
    pub data_digest: u32,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub train_labels: Vec<usize>,
    pub val_labels: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    /// Whether non-head layers started from supplied weights.
    pub pretrained: bool,
}

impl TrainRun {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn val_accuracies(&self) -> Option<Vec<f64>> {
        self.epochs.iter().map(|e| e.val_accuracy).collect()
    }

    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_accuracy)
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.val_accuracies()?.into_iter().reduce(f64::max)
    }
}

/// Stratified split: each class gives `round(n·fraction)` items to
/// validation, keeping at least one for training.
fn split(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = RngState::with_stream(seed, 0x5B17);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut idx);
        let n_val = ((idx.len() as f64 * fraction).round() as usize).min(idx.len().saturating_sub(1));
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

fn evaluate<S: Scalar>(
    cfg: &ClassifierConfig,
    params: &ParamStore<S>,
    images: &[&Image],
    labels: &[usize],
) -> Result<(f64, Vec<usize>)> {
    let mut loss = 0.0;
    let mut pred = Vec::with_capacity(images.len());
    for (chunk, lab) in images.chunks(64).zip(labels.chunks(64)) {
        let tape = Tape::no_grad();
        let b = params.bind(&tape);
        let logits = forward(cfg, &b, tape.constant(batch_tensor(cfg, chunk)?))?;
        pred.extend(argmax_rows(&logits.value()));
        loss += logits.cross_entropy(lab)?.item().as_f64() * lab.len() as f64;
    }
    Ok((loss / labels.len() as f64, pred))
}

/// Mini-batch AdamW on softmax cross-entropy at a constant learning rate.
/// Returns the final weights, the weights of the best validation epoch
/// (earliest on ties; the final weights without a validation split) and
/// the run record.
pub fn train_classifier<S: Scalar>(
    cfg: &ClassifierConfig,
    init: ParamStore<S>,
    data: &LabeledSet,
    tc: &TrainConfig,
    pretrained: bool,
) -> Result<(ParamStore<S>, ParamStore<S>, TrainRun)> {
    cfg.validate()?;
    tc.validate()?;
    check_params(cfg, &init)?;
    if cfg.classes != data.task.class_count() {
        return Err(Error::Config(format!(
            "classifier head has {} outputs but the {} task has {} classes",
            cfg.classes,
            data.task,
            data.task.class_count()
        )));
    }
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for f in &tc.frozen {
        if !init.names().any(|n| n.split('.').next() == Some(f.as_str())) {
            return Err(Error::Config(format!("frozen layer `{f}` does not exist")));
        }
    }
    let is_frozen = |name: &str| tc.frozen.iter().any(|f| name.split('.').next() == Some(f.as_str()));

    let (train_idx, val_idx) = split(&data.labels, cfg.classes, tc.val_fraction, tc.seed);
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| data.labels[i]).collect();
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| data.labels[i]).collect();
    let val_images: Vec<&Image> = val_idx.iter().map(|&i| &data.images[i]).collect();

    let mut params = init;
    let frozen_values: Vec<(String, _)> =
        params.iter().filter(|(n, _)| is_frozen(n)).map(|(n, t)| (n.clone(), t.clone())).collect();
    let mut opt = AdamW::new(AdamWConfig { lr: tc.lr, weight_decay: tc.weight_decay, ..AdamWConfig::default() }, &params);
    let mut best = (f64::NEG_INFINITY, params.clone());
    let mut records = Vec::with_capacity(tc.epochs);

    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..train_idx.len()).collect();
        RngState::with_stream(tc.seed, 0x0BA7).derive(epoch as u64).shuffle(&mut order);
        let mut train_pred = vec![0; train_idx.len()];
        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let images: Vec<&Image> = batch.iter().map(|&j| &data.images[train_idx[j]]).collect();
            let labels: Vec<usize> = batch.iter().map(|&j| train_labels[j]).collect();
            let tape = Tape::new();
            let b = params.bind(&tape);
            let logits = forward(cfg, &b, tape.constant(batch_tensor(cfg, &images)?))?;
            let loss = logits.cross_entropy(&labels)?;
            let lv = loss.item().as_f64();
            if !lv.is_finite() {
                return Err(Error::Diverged { step: epoch, loss: lv });
            }
            loss_sum += lv * batch.len() as f64;
            for (&j, p) in batch.iter().zip(argmax_rows(&logits.value())) {
                train_pred[j] = p;
            }
            tape.backward(loss)?;
            opt.update(&mut params, &tape.gradients(), tc.lr)?;
            for (n, t) in &frozen_values {
                *params.get_mut(n).expect("frozen name present") = t.clone();
            }
        }
        let (val_loss, val_pred) = if val_idx.is_empty() {
            (None, Vec::new())
        } else {
            let (l, p) = evaluate(cfg, &params, &val_images, &val_labels)?;
            (Some(l), p)
        };
        let val_accuracy = val_loss.map(|_| accuracy(&val_pred, &val_labels));
        let score = val_accuracy.unwrap_or(f64::INFINITY);
        if score > best.0 || val_accuracy.is_none() {
            best = (score, params.clone());
        }
        log::debug!(
            "epoch {epoch}: train loss {:.4} acc {:.3}, val acc {:?}",
            loss_sum / train_idx.len() as f64,
            accuracy(&train_pred, &train_labels),
            val_accuracy
        );
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            train_accuracy: accuracy(&train_pred, &train_labels),
            val_loss,
            val_accuracy,
            train_predictions: train_pred,
            val_predictions: val_pred,
        });
    }

    let run = TrainRun {
        task: data.task,
        classifier: cfg.clone(),
        config: tc.clone(),
        data_digest: data.digest(),
        train_indices: train_idx,
        val_indices: val_idx,
        train_labels,
        val_labels,
        epochs: records,
        pretrained,
    };
    Ok((params, best.1, run))
}

/// Trains the five-class source classifier from scratch and returns its
/// best-validation weights.
pub fn pretrain_source<S: Scalar>(data: &LabeledSet, cfg: &ClassifierConfig, tc: &TrainConfig) -> Result<(ParamStore<S>, TrainRun)> {
    if data.task != Task::Source {
        return Err(Error::invalid("pretraining needs source-task data"));
    }
    if let Some(missing) = data.class_counts().iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("source data has no `{}` examples", Task::Source.class_names()[missing])));
    }
    let init = init_classifier(cfg, tc.seed)?;
    let (_, best, run) = train_classifier(cfg, init, data, tc, false)?;
    Ok((best, run))
}

/// Fine-tunes every layer on `data`. With `source` weights, all non-head
/// layers start from them and the head is drawn fresh for `cfg.classes`;
/// without, this is the from-scratch baseline. Returns the final weights.
pub fn adapt_target<S: Scalar>(
    source: Option<&ParamStore<S>>,
    data: &LabeledSet,
    cfg: &ClassifierConfig,
    tc: &TrainConfig,
) -> Result<(ParamStore<S>, TrainRun)> {
    let mut init: ParamStore<S> = init_classifier(cfg, tc.seed)?;
    if let Some(src) = source {
        for (name, t) in init.iter_mut().filter(|(n, _)| !is_head(n)) {
            let s = src.get(name).ok_or_else(|| Error::Config(format!("source weights lack `{name}`")))?;
            if s.shape() != t.shape() {
                return Err(Error::shape("adapt_target", t.shape(), s.shape()));
            }
            *t = s.clone();
        }
    }
    let (last, _, run) = train_classifier(cfg, init, data, tc, source.is_some())?;
    Ok((last, run))
}
