use super::*;
use crate::config::Mode as RunMode;
use crate::data::synthetic::{generate, SyntheticSpec};
use crate::data::{split, SplitSpec};

fn tiny_config(mode: RunMode) -> RunConfig {
    let mut c = RunConfig::desk().with_mode(mode);
    c.detector.stage_channels = [4, 4, 8, 8];
    c.detector.stem_channels = 4;
    c.detector.fpn_channels = 8;
    c.detector.anchor_scales = vec![1.0];
    c.detector.anchor_ratios = vec![1.0];
    c.train.batch_size = 2;
    c.train.epochs = 2;
    c.train.val_every = 1;
    c.detect.max_detections = 20;
    c.seed = 3;
    c
}

fn tiny_data(config: &RunConfig, count: usize) -> (TrainData, Preprocess) {
    let spec = SyntheticSpec {
        image_size: 32,
        min_objects: 1,
        max_objects: 3,
        radius_min: 2.0,
        radius_max: 4.0,
        ..Default::default()
    };
    let ds = generate(&spec, count).unwrap();
    let sp = split(
        count,
        &SplitSpec {
            labeled_ratio: 0.5,
            ..Default::default()
        },
    )
    .unwrap();
    let sd = SplitData::from_dataset(&ds, &sp);
    let pre = fit_preprocess(&sd, config).unwrap();
    (TrainData::new(&sd, &pre).unwrap(), pre)
}

fn without_wall(rows: &[StepMetrics]) -> Vec<StepMetrics> {
    rows.iter().map(|r| StepMetrics { wall_ms: 0.0, ..*r }).collect()
}

#[test]
fn supervised_step_matches_direct_computation() {
    let mut cfg = tiny_config(RunMode::Supervised);
    cfg.train.ema_alpha = 1.0;
    let (data, pre) = tiny_data(&cfg, 10);
    let mut t = Trainer::new(cfg.clone(), pre).unwrap();
    let before = t.state.student.clone();
    let teacher_before = t.state.ema.teacher.clone();
    let (li, ui) = t.batch_indices(&data, 0);
    assert!(ui.is_empty());
    let row = t.step(&data).unwrap();
    assert_eq!(row.lambda, 0.0);
    assert_eq!(row.loss_cont, 0.0);

    // Same views, same loss, plain Adam.
    let det = Detector::new(cfg.resolve().detector).unwrap();
    let resolved = cfg.resolve();
    let mut grad = vec![0.0; before.num_params()];
    let mut sup = 0.0;
    for (s, &i) in li.iter().enumerate() {
        let mut aug = stream_rng(cfg.seed, Stream::Augment, &[0, LABELED, s as u64]);
        let sample = &data.labeled[i];
        let (img, boxes) = random_hflip(&sample.image, Some(&sample.boxes), &mut aug);
        let views = build_views(&img, boxes.as_deref(), &resolved.augment, &mut aug).unwrap();
        let mut g = Graph::new();
        let x = g.input(views.student.to_tensor(), false);
        let levels = det.build(&mut g, &before, x, Mode::Train, None, true).unwrap();
        let out = det.collect(&g, &levels);
        let grid = det.anchor_grid(32, 32).unwrap();
        let labels = assign_anchors(views.boxes.as_ref().unwrap(), &grid, 0.5, 0.4).unwrap();
        let l = supervised_loss(&out, &labels, &grid.anchors(), cfg.detector.loss, &cfg.supervised).unwrap();
        sup += l.value / 2.0;
        let mut gl = l.grad;
        gl.scale(0.5);
        let p = det.backward(&g, &levels, &gl).unwrap().into_params();
        let mut off = 0;
        for (v, spec) in p.into_iter().zip(before.specs()) {
            if let Some(v) = v {
                grad[off..off + spec.len()].iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            }
            off += spec.len();
        }
    }
    assert!((row.loss_sup - sup).abs() < 1e-12, "{} vs {sup}", row.loss_sup);
    let mut expect = before.clone();
    Adam::new(&cfg.train, grad.len()).step(&mut expect, &grad, cfg.train.lr).unwrap();
    assert_eq!(t.state.student, expect);
    assert_eq!(t.state.ema.teacher, teacher_before);
}

#[test]
fn background_teacher_gives_no_unlabeled_gradient() {
    let mut cfg = tiny_config(RunMode::Ssmd);
    cfg.features.nrb = false;
    let (data, pre) = tiny_data(&cfg, 10);
    let mut t = Trainer::new(cfg, pre).unwrap();
    // A huge background bias makes every prediction exactly background in
    // both networks, so every adaptive weight is zero.
    let idx = t.state.student.index_of("head.cls_out.bias").unwrap();
    let kc = t.detector.config().class_channels();
    for w in [&mut t.state.student, &mut t.state.ema.teacher] {
        let b = w.tensors_mut()[idx].data_mut();
        for (i, v) in b.iter_mut().enumerate() {
            *v = if i % kc == 0 { 1e3 } else { 0.0 };
        }
    }
    let task = Task {
        stream: UNLABELED,
        slot: 0,
        image: &data.unlabeled[0],
        boxes: None,
    };
    let r = t.sample_pass(&task, 0, 1.0).unwrap();
    assert_eq!(r.cont, 0.0);
    assert!(r.grad.iter().all(|g| *g == 0.0));
}

#[test]
fn equal_seeds_give_equal_traces_across_thread_counts() {
    let cfg = tiny_config(RunMode::Ssmd);
    let (data, pre) = tiny_data(&cfg, 10);
    let run = |threads: usize| {
        let mut c = cfg.clone();
        c.train.threads = threads;
        let mut t = Trainer::new(c, pre).unwrap();
        let rows: Vec<StepMetrics> = (0..10).map(|_| t.step(&data).unwrap()).collect();
        (without_wall(&rows), t.state.student)
    };
    let (a, wa) = run(1);
    let (b, wb) = run(1);
    let (c, wc) = run(3);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(wa, wb);
    assert_eq!(wa, wc);
    assert!(a.iter().all(|r| r.loss_cont > 0.0 && r.lambda > 0.0));
    let mut other = cfg.clone();
    other.seed += 1;
    let mut t = Trainer::new(other, pre).unwrap();
    assert_ne!(without_wall(&[t.step(&data).unwrap()]), a[..1].to_vec());
}

#[test]
fn zero_epochs_writes_initial_checkpoint_only() {
    let mut cfg = tiny_config(RunMode::Ssmd);
    cfg.train.epochs = 0;
    let (data, pre) = tiny_data(&cfg, 10);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg, pre).unwrap();
    let s = t.fit(&data, Some(dir.path())).unwrap();
    assert!(s.metrics.is_empty());
    let loaded = TrainState::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded, t.state);
    assert!(read_rows::<StepMetrics>(&dir.path().join(METRICS_FILE)).unwrap().is_empty());
}

#[test]
fn tiny_run_logs_every_step_and_keeps_best() {
    let cfg = tiny_config(RunMode::Ssmd);
    let (data, pre) = tiny_data(&cfg, 10);
    assert_eq!(data.labeled.len(), 4);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg, pre).unwrap();
    let s = t.fit(&data, Some(dir.path())).unwrap();
    assert_eq!(s.iterations, 4);
    let rows: Vec<StepMetrics> = read_rows(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 0, 1, 1]);
    // lr drops from epoch round(0.75 * 2) = 2 on, i.e. never here.
    assert!(rows.iter().all(|r| r.lr == 2e-3));
    assert_eq!(s.validation.len(), 2);
    let best = t.state.best.as_ref().unwrap();
    assert_eq!(Some(best.map), s.validation.iter().map(|v| v.map).reduce(f64::max));
    let loaded = TrainState::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded, t.state);
}

#[test]
fn resumed_run_continues_the_trace() {
    let mut cfg = tiny_config(RunMode::Ssmd);
    cfg.train.epochs = 3;
    let (data, pre) = tiny_data(&cfg, 10);
    let full_dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(cfg.clone(), pre).unwrap();
    full.fit(&data, Some(full_dir.path())).unwrap();

    // Interrupt mid-epoch: the checkpoint is at iteration 2, the log at 3.
    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(cfg, pre).unwrap();
    first.fit_until(&data, Some(dir.path()), 3).unwrap();
    assert_eq!(read_rows::<StepMetrics>(&dir.path().join(METRICS_FILE)).unwrap().len(), 3);
    let state = TrainState::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(state.iteration, 2);
    let mut resumed = Trainer::from_state(state).unwrap();
    resumed.fit(&data, Some(dir.path())).unwrap();

    let a: Vec<StepMetrics> = read_rows(&full_dir.path().join(METRICS_FILE)).unwrap();
    let b: Vec<StepMetrics> = read_rows(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(without_wall(&a), without_wall(&b));
    assert_eq!(
        read_rows::<ValidationRow>(&full_dir.path().join(VALIDATION_FILE)).unwrap(),
        read_rows::<ValidationRow>(&dir.path().join(VALIDATION_FILE)).unwrap()
    );
    assert_eq!(full.state, resumed.state);
}

#[test]
fn checkpoint_rejects_other_versions_and_garbage() {
    let cfg = tiny_config(RunMode::Csd);
    let (_, pre) = tiny_data(&cfg, 10);
    let t = Trainer::new(cfg, pre).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    t.state.save(&p).unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[8] = 9;
    std::fs::write(&p, &bytes).unwrap();
    let err = TrainState::load(&p).unwrap_err().to_string();
    assert!(err.contains("version 9"), "{err}");
    std::fs::write(&p, b"not a checkpoint").unwrap();
    assert!(matches!(TrainState::load(&p), Err(Error::Checkpoint(_))));
    bytes[8] = 1;
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(TrainState::load(&p), Err(Error::Checkpoint(_))));
}

#[test]
fn inference_refuses_teacher_weights() {
    let cfg = tiny_config(RunMode::Ssmd);
    let (data, pre) = tiny_data(&cfg, 10);
    let t = Trainer::new(cfg, pre).unwrap();
    let params = t.config().detect;
    assert!(predict(t.detector(), &t.state.ema.teacher, &data.val, &params, false).is_err());
    assert!(predict(t.detector(), &t.state.ema.teacher, &data.val, &params, true).is_ok());
    assert!(predict(t.detector(), &t.state.student, &data.val, &params, false).is_ok());
}

#[test]
fn independent_teacher_init_differs() {
    let mut cfg = tiny_config(RunMode::Ssmd);
    cfg.train.teacher_init = TeacherInit::Independent;
    let (_, pre) = tiny_data(&cfg, 10);
    let t = Trainer::new(cfg, pre).unwrap();
    assert_ne!(t.state.student.flat(), t.state.ema.teacher.flat());
}
