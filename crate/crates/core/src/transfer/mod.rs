//! Classifier pretraining on synthetic spectrograms and fine-tuning on a
//! shifted target task, with a convergence comparison against training
//! from scratch.

mod classifier;
mod convergence;
mod plot;
mod study;
mod train;

pub use classifier::{argmax_rows, batch_tensor, forward, init_classifier, is_head, predict, reinit_head, ClassifierConfig, ConvLayer, HEAD};
pub use convergence::{
    compare_runs, compare_seeds, convergence_epoch, convergence_of, improvement_percent, median, Convergence,
    ConvergenceReport, Criterion, CONTEXT_EPOCHS,
};
pub use plot::plot_curves;
pub use study::{run_study, write_runs_csv, SeedRuns, Study, StudyConfig};
pub use train::{adapt_target, pretrain_source, train_classifier, EpochRecord, LabeledSet, TrainConfig, TrainRun};
