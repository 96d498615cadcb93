use proptest::prelude::*;
use specgen_core::image::Image;
use specgen_core::numerics::{gradcheck, GradcheckOptions, ParamStore, RngState};
use specgen_core::rfscene::{synthesize, DatasetConfig, Task};
use specgen_core::transfer::*;

fn dataset(task: Task, seed: u64, per_class: usize) -> LabeledSet {
    LabeledSet::from_samples(task, &synthesize(per_class, &DatasetConfig::new(task, seed), 1).unwrap()).unwrap()
}

fn source_cfg() -> ClassifierConfig {
    ClassifierConfig::new(32, 5)
}

fn scalar_accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let mut correct = 0;
    for i in 0..labels.len() {
        if pred[i] == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

#[test]
fn plateau_trace_converges_where_it_flattens() {
    let acc: Vec<f64> = (1..=30).map(|e| (e as f64 / 10.0).min(1.0)).collect();
    assert_eq!(convergence_of(&acc, Criterion::default()).unwrap(), Convergence::Epoch(10));
}

#[test]
fn constant_trace_converges_at_once() {
    assert_eq!(convergence_of(&[0.6; 12], Criterion::default()).unwrap(), Convergence::Epoch(1));
}

#[test]
fn late_jump_without_persistence_never_converges() {
    assert_eq!(convergence_of(&[0.1, 0.1, 1.0, 1.0], Criterion::default()).unwrap(), Convergence::Never);
    assert!(convergence_of(&[], Criterion::default()).is_err());
    assert!(convergence_of(&[0.5; 4], Criterion::with_fraction(0.0)).is_err());
}

#[test]
fn improvement_arithmetic() {
    let (p, s) = CONTEXT_EPOCHS;
    let v = improvement_percent(Convergence::Epoch(p), Convergence::Epoch(s)).unwrap();
    assert_eq!(format!("{v:.1}"), "51.5");
    assert!((v - 100.0 * 34.0 / 66.0).abs() < 1e-12);
    assert_eq!(improvement_percent(Convergence::Epoch(20), Convergence::Epoch(20)), Some(0.0));
    assert_eq!(improvement_percent(Convergence::Never, Convergence::Epoch(20)), None);
    let r = ConvergenceReport::from_epochs(Convergence::Never, Convergence::Epoch(9), Criterion::default(), vec![1]);
    let text = r.summary();
    assert!(text.contains("improvement: undefined"));
    assert!(text.contains("pretrained: no convergence"));
    assert!(text.contains("scratch: 9"));
}

#[test]
fn median_sorts_never_last() {
    use Convergence::*;
    assert_eq!(median(&[Epoch(9), Never, Epoch(3)]), Some(Epoch(9)));
    assert_eq!(median(&[Never, Never, Epoch(3)]), Some(Never));
    assert_eq!(median(&[]), None);
}

#[test]
fn classifier_gradients_match_finite_differences() {
    let cfg = ClassifierConfig {
        convs: [2, 3, 4].map(|channels| ConvLayer { channels, kernel: 3, stride: 2 }),
        hidden: 5,
        resolution: 16,
        classes: 3,
    };
    let params: ParamStore<f64> = init_classifier(&cfg, 4).unwrap();
    let mut rng = RngState::new(9);
    let images: Vec<Image> = (0..2).map(|_| Image::new(16, 16, (0..256).map(|_| rng.uniform()).collect()).unwrap()).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let x = batch_tensor::<f64>(&cfg, &refs).unwrap();
    let report = gradcheck(&params, GradcheckOptions::f64_default(), |tape, b| {
        forward(&cfg, b, tape.constant(x.clone()))?.cross_entropy(&[0, 2])
    })
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err());
}

#[test]
fn layout_validation() {
    assert_eq!(source_cfg().features(), 256);
    assert!(ClassifierConfig::new(24, 5).validate().is_err());
    assert!(ClassifierConfig::new(32, 1).validate().is_err());
    assert!(ClassifierConfig::new(64, 3).validate().is_ok());
}

#[test]
fn backbone_init_ignores_class_count() {
    let a: ParamStore<f32> = init_classifier(&source_cfg(), 3).unwrap();
    let b: ParamStore<f32> = init_classifier(&source_cfg().with_classes(3), 3).unwrap();
    for (name, t) in a.iter().filter(|(n, _)| !is_head(n)) {
        assert_eq!(b.get(name), Some(t), "{name}");
    }
    assert_ne!(a.get("head.w").unwrap().shape(), b.get("head.w").unwrap().shape());
}

#[test]
fn pretraining_learns_the_source_classes() {
    let data = dataset(Task::Source, 21, 100);
    let (theta, run) = pretrain_source::<f32>(&data, &source_cfg(), &TrainConfig::new(5, 30)).unwrap();
    assert_eq!(run.epochs.len(), 30);
    let best = run.best_val_accuracy().unwrap();
    assert!(best >= 0.80, "best validation accuracy {best}");
    // Returned weights are the best-validation ones.
    let val: Vec<&Image> = run.val_indices.iter().map(|&i| &data.images[i]).collect();
    let pred = predict(&source_cfg(), &theta, &val, 32).unwrap();
    assert_eq!(scalar_accuracy(&pred, &run.val_labels), best);
}

#[test]
fn reported_accuracies_match_stored_predictions() {
    let data = dataset(Task::Target, 22, 12);
    let cfg = source_cfg().with_classes(3);
    let (_, run) = adapt_target::<f32>(None, &data, &cfg, &TrainConfig::new(2, 4)).unwrap();
    for e in &run.epochs {
        assert_eq!(e.train_accuracy, scalar_accuracy(&e.train_predictions, &run.train_labels));
        assert_eq!(e.val_accuracy.unwrap(), scalar_accuracy(&e.val_predictions, &run.val_labels));
        assert!((0.0..=1.0).contains(&e.train_accuracy));
    }
    for (k, &i) in run.train_indices.iter().enumerate() {
        assert_eq!(run.train_labels[k], data.labels[i]);
    }
    // Stratified: every class appears on both sides.
    for c in 0..3 {
        assert!(run.val_labels.contains(&c) && run.train_labels.contains(&c));
    }
}

#[test]
fn tiny_run_is_recorded() {
    let data = dataset(Task::Source, 23, 1);
    let (_, run) = pretrain_source::<f32>(&data, &source_cfg(), &TrainConfig::new(1, 1)).unwrap();
    assert_eq!(run.epochs.len(), 1);
    assert_eq!(run.epochs[0].val_accuracy, None);
    assert!((0.0..=1.0).contains(&run.epochs[0].train_accuracy));
}

#[test]
fn same_seed_same_run() {
    let data = dataset(Task::Source, 24, 8);
    let tc = TrainConfig::new(8, 3);
    let (a, ra) = pretrain_source::<f32>(&data, &source_cfg(), &tc).unwrap();
    let (b, rb) = pretrain_source::<f32>(&data, &source_cfg(), &tc).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.as_map(), b.as_map());
}

#[test]
fn bad_inputs_are_rejected() {
    let data = dataset(Task::Source, 25, 4);
    let missing = LabeledSet::new(
        Task::Source,
        data.images.iter().zip(&data.labels).filter(|(_, &l)| l != 2).map(|(im, _)| im.clone()).collect(),
        data.labels.iter().copied().filter(|&l| l != 2).collect(),
    )
    .unwrap();
    assert!(pretrain_source::<f32>(&missing, &source_cfg(), &TrainConfig::new(1, 1)).is_err());
    let target = dataset(Task::Target, 26, 4);
    assert!(pretrain_source::<f32>(&target, &source_cfg(), &TrainConfig::new(1, 1)).is_err());
    // Five-class head on three-class data.
    assert!(adapt_target::<f32>(None, &target, &source_cfg(), &TrainConfig::new(1, 1)).is_err());
    assert!(LabeledSet::new(Task::Target, vec![Image::filled(32, 32, 0.0)], vec![3]).is_err());
    let frozen = TrainConfig { frozen: vec!["conv9".into()], ..TrainConfig::new(1, 1) };
    assert!(adapt_target::<f32>(None, &target, &source_cfg().with_classes(3), &frozen).is_err());
}

#[test]
fn null_pretraining_is_a_no_op() {
    let source = dataset(Task::Source, 27, 4);
    let target = dataset(Task::Target, 28, 10);
    let tcfg = source_cfg().with_classes(3);
    let (theta, run0) = pretrain_source::<f32>(&source, &source_cfg(), &TrainConfig::new(6, 0)).unwrap();
    assert!(run0.epochs.is_empty());
    let tc = TrainConfig { lr: 1e-4, ..TrainConfig::new(6, 5) };
    let (wa, ra) = adapt_target(Some(&theta), &target, &tcfg, &tc).unwrap();
    let (wb, rb) = adapt_target::<f32>(None, &target, &tcfg, &tc).unwrap();
    assert_eq!(wa.as_map(), wb.as_map());
    assert_eq!(ra.epochs, rb.epochs);
    assert!(ra.pretrained && !rb.pretrained);
}

#[test]
fn eight_samples_are_memorised() {
    let full = dataset(Task::Source, 29, 2);
    let data = LabeledSet::new(Task::Source, full.images[..8].to_vec(), full.labels[..8].to_vec()).unwrap();
    let tc = TrainConfig { val_fraction: 0.0, batch_size: 8, ..TrainConfig::new(30, 200) };
    let (w, _, run) = train_classifier::<f32>(&source_cfg(), init_classifier(&source_cfg(), 30).unwrap(), &data, &tc, false).unwrap();
    let first = run.epochs.iter().position(|e| e.train_accuracy == 1.0);
    assert!(first.is_some(), "never reached 100% training accuracy");
    let refs: Vec<&Image> = data.images.iter().collect();
    assert_eq!(predict(&source_cfg(), &w, &refs, 8).unwrap(), data.labels);
}

#[test]
fn adapting_on_source_data_recovers_source_accuracy() {
    let data = dataset(Task::Source, 31, 60);
    let tc = TrainConfig::new(3, 20);
    let (theta, src) = pretrain_source::<f32>(&data, &source_cfg(), &tc).unwrap();
    let (_, again) = adapt_target(Some(&theta), &data, &source_cfg(), &TrainConfig { lr: tc.lr / 10.0, epochs: 10, ..tc }).unwrap();
    let (s, a) = (src.best_val_accuracy().unwrap(), again.final_val_accuracy().unwrap());
    assert!(a >= s - 0.05, "source {s}, re-adapted {a}");
}

// Frozen random convolutions are a weaker starting point than pretrained
// ones; fine-tuning from pretrained features should get there sooner.
#[test]
fn pretrained_beats_frozen_random_features() {
    let source = dataset(Task::Source, 41, 100);
    let target = dataset(Task::Target, 42, 100);
    let tcfg = source_cfg().with_classes(3);
    let mut pre = Vec::new();
    let mut frozen = Vec::new();
    for seed in [1, 2, 3] {
        let (theta, _) = pretrain_source::<f32>(&source, &source_cfg(), &TrainConfig::new(seed, 30)).unwrap();
        let tc = TrainConfig { lr: 1e-4, ..TrainConfig::new(seed, 60) };
        let (_, p) = adapt_target(Some(&theta), &target, &tcfg, &tc).unwrap();
        let fz = TrainConfig { frozen: vec!["conv1".into(), "conv2".into(), "conv3".into()], ..tc };
        let (_, f) = adapt_target::<f32>(None, &target, &tcfg, &fz).unwrap();
        pre.push(convergence_epoch(&p, Criterion::default()).unwrap());
        frozen.push(convergence_epoch(&f, Criterion::default()).unwrap());
    }
    let (p, f) = (median(&pre).unwrap(), median(&frozen).unwrap());
    assert!(p <= f, "pretrained {pre:?} vs frozen {frozen:?}");
}

#[test]
fn frozen_layers_stay_put() {
    let target = dataset(Task::Target, 43, 6);
    let cfg = source_cfg().with_classes(3);
    let tc = TrainConfig { frozen: vec!["conv1".into(), "fc1".into()], ..TrainConfig::new(4, 2) };
    let init: ParamStore<f32> = init_classifier(&cfg, 4).unwrap();
    let (w, _) = adapt_target::<f32>(None, &target, &cfg, &tc).unwrap();
    for (name, t) in init.iter() {
        let moved = w.get(name).unwrap() != t;
        let layer = name.split('.').next().unwrap();
        assert_eq!(moved, !(layer == "conv1" || layer == "fc1"), "{name}");
    }
}

#[test]
fn study_compares_paired_runs_and_writes_outputs() {
    let source = dataset(Task::Source, 51, 20);
    let target = dataset(Task::Target, 52, 20);
    let mut cfg = StudyConfig::new(32, vec![1, 2, 3]);
    cfg.source_epochs = 4;
    cfg.target_epochs = 8;
    let one = run_study(&source, &target, &cfg, 1).unwrap();
    let two = run_study(&source, &target, &cfg, 3).unwrap();
    assert_eq!(one.report, two.report);
    for (a, b) in one.runs.iter().zip(&two.runs) {
        assert_eq!(a.pretrained, b.pretrained);
        assert_eq!(a.scratch, b.scratch);
    }
    let report = one.report.clone().unwrap();
    let per_seed: Vec<_> = one.runs.iter().map(|r| compare_runs(r.pretrained.as_ref().unwrap(), &r.scratch, cfg.criterion).unwrap()).collect();
    assert_eq!(report.pretrained, median(&per_seed.iter().map(|r| r.pretrained).collect::<Vec<_>>()).unwrap());
    assert_eq!(report.scratch, median(&per_seed.iter().map(|r| r.scratch).collect::<Vec<_>>()).unwrap());
    assert_eq!(report.seeds, vec![1, 2, 3]);

    let dir = tempfile::tempdir().unwrap();
    let files = one.write(dir.path(), cfg.criterion).unwrap();
    assert_eq!(files.len(), 5);
    let csv = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * (4 + 8 + 8));
    assert!(std::fs::read_to_string(dir.path().join("report.txt")).unwrap().contains("51.5%"));
    let png = specgen_core::image::read_png(&dir.path().join("curves_seed2.png")).unwrap();
    assert_eq!(png.shape(), (640, 640));

    let mut scratch = cfg.clone();
    scratch.scratch_only = true;
    let s = run_study(&source, &target, &scratch, 1).unwrap();
    assert!(s.report.is_none());
    assert!(s.runs.iter().all(|r| r.pretrained.is_none() && r.source.is_none()));
    assert_eq!(s.runs[0].scratch, one.runs[0].scratch);
}

#[test]
fn mismatched_protocols_are_rejected() {
    let target = dataset(Task::Target, 53, 6);
    let cfg = source_cfg().with_classes(3);
    let (_, a) = adapt_target::<f32>(None, &target, &cfg, &TrainConfig::new(1, 3)).unwrap();
    let (_, b) = adapt_target::<f32>(None, &target, &cfg, &TrainConfig::new(2, 3)).unwrap();
    let (_, c) = adapt_target::<f32>(None, &target, &cfg, &TrainConfig::new(1, 4)).unwrap();
    assert!(compare_runs(&a, &b, Criterion::default()).is_err());
    assert!(compare_runs(&a, &c, Criterion::default()).is_err());
    let same = compare_runs(&a, &a, Criterion::default()).unwrap();
    assert_eq!(same.improvement_percent.unwrap_or(0.0), 0.0);
    let other = dataset(Task::Target, 54, 6);
    let (_, d) = adapt_target::<f32>(None, &other, &cfg, &TrainConfig::new(1, 3)).unwrap();
    assert!(compare_runs(&a, &d, Criterion::default()).is_err());
    let source = dataset(Task::Source, 55, 2);
    assert!(run_study(&target, &source, &StudyConfig::new(32, vec![1]), 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn higher_criterion_never_converges_earlier(
        acc in proptest::collection::vec(0.0f64..1.0, 1..40),
        lo in 0.05f64..1.0,
        hi in 0.05f64..1.0,
    ) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let a = convergence_of(&acc, Criterion::with_fraction(lo)).unwrap();
        let b = convergence_of(&acc, Criterion::with_fraction(hi)).unwrap();
        prop_assert!(a <= b);
    }
}
