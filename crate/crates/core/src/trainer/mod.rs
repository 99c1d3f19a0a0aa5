//! The mean-teacher training loop.
//!
//! Each step: move the teacher toward the student, build paired views for
//! a labeled and an unlabeled batch, compute the supervised loss on labeled
//! student views and the consistency cost on every pair, then take one Adam
//! step on the student.
//!
//! All randomness is derived from `(seed, iteration, stream, slot)`, so a run
//! resumed from a checkpoint replays exactly the steps the original would
//! have taken.

mod checkpoint;
mod metrics;
mod optim;
mod schedule;

pub use checkpoint::{Best, TrainState, MAGIC, VERSION};
pub use metrics::{append_rows, read_rows, truncate_from, LogRow, StepMetrics, ValidationRow};
pub use optim::{Adam, EmaTracker};
pub use schedule::{lambda_at, lr_at, lr_drop_epoch, Schedule};

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::adversarial;
use crate::augment::{build_views, random_hflip};
use crate::autograd::Graph;
use crate::config::{Resolved, RunConfig, TeacherInit};
use crate::data::{Preprocess, Sample, SplitData};
use crate::detector::{Detection, Detector, Mode, ModelWeights, WeightRole};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::geometry::{assign_anchors, GtBox};
use crate::image::Image;
use crate::losses::{consistency_cost, supervised_loss};
use crate::rng::{derive_seed, stream_rng, Stream};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const VALIDATION_FILE: &str = "validation.csv";

const LABELED: u64 = 0;
const UNLABELED: u64 = 1;

/// Standardized training inputs.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Image>,
    pub val: Vec<Sample>,
    pub num_classes: usize,
}

impl TrainData {
    /// Applies `preprocess` to every image; boxes are unchanged.
    pub fn new(split: &SplitData, preprocess: &Preprocess) -> Result<Self> {
        let prep = |s: &[Sample]| -> Result<Vec<Sample>> {
            s.iter()
                .map(|x| {
                    Ok(Sample {
                        image: preprocess.apply(&x.image)?,
                        boxes: x.boxes.clone(),
                    })
                })
                .collect()
        };
        Ok(Self {
            labeled: prep(&split.labeled)?,
            unlabeled: split
                .unlabeled
                .iter()
                .map(|s| preprocess.apply(&s.image))
                .collect::<Result<_>>()?,
            val: prep(&split.val)?,
            num_classes: split.num_classes(),
        })
    }
}

/// Fits the intensity pipeline on the training partitions.
pub fn fit_preprocess(split: &SplitData, config: &RunConfig) -> Result<Preprocess> {
    Preprocess::fit(split.train_images(), config.data.window_lo, config.data.window_hi)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    pub iterations: u64,
    /// Rows produced by this call (resumed runs only report new steps).
    pub metrics: Vec<StepMetrics>,
    pub validation: Vec<ValidationRow>,
    pub best_map: Option<f64>,
}

/// Per-sample contribution to a step.
struct SampleResult {
    grad: Vec<f64>,
    sup: f64,
    cont: f64,
}

struct Task<'a> {
    stream: u64,
    slot: u64,
    image: &'a Image,
    boxes: Option<&'a [GtBox]>,
}

pub struct Trainer {
    detector: Detector,
    resolved: Resolved,
    pub state: TrainState,
}

impl Trainer {
    /// Fresh student and teacher weights.
    pub fn new(config: RunConfig, preprocess: Preprocess) -> Result<Self> {
        config.validate()?;
        let resolved = config.resolve();
        let detector = Detector::new(resolved.detector.clone())?;
        let student = detector.init_weights(&mut stream_rng(config.seed, Stream::Init, &[0]));
        let teacher = match config.train.teacher_init {
            TeacherInit::Copy => student.clone(),
            TeacherInit::Independent => detector.init_weights(&mut stream_rng(config.seed, Stream::Init, &[1])),
        };
        let adam = Adam::new(&config.train, student.num_params());
        let ema = EmaTracker::new(config.train.ema_alpha, teacher)?;
        Ok(Self {
            detector,
            resolved,
            state: TrainState {
                config,
                preprocess,
                student,
                ema,
                adam,
                iteration: 0,
                best: None,
            },
        })
    }

    pub fn from_state(state: TrainState) -> Result<Self> {
        state.config.validate()?;
        let resolved = state.config.resolve();
        let detector = Detector::new(resolved.detector.clone())?;
        if state.student.specs() != detector.param_specs() {
            return Err(Error::Checkpoint("checkpoint weights do not match its detector config".into()));
        }
        Ok(Self { detector, resolved, state })
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn config(&self) -> &RunConfig {
        &self.state.config
    }

    pub fn iterations_per_epoch(&self, data: &TrainData) -> u64 {
        data.labeled.len().div_ceil(self.config().train.batch_size) as u64
    }

    pub fn total_iterations(&self, data: &TrainData) -> u64 {
        self.iterations_per_epoch(data) * self.config().train.epochs as u64
    }

    /// Labeled and unlabeled indices used at iteration `j`.
    fn batch_indices(&self, data: &TrainData, j: u64) -> (Vec<usize>, Vec<usize>) {
        let seed = self.config().seed;
        let b = self.config().train.batch_size;
        let ipe = self.iterations_per_epoch(data);
        let (epoch, pos) = (j / ipe, (j % ipe) as usize);
        let nl = data.labeled.len();
        let mut perm: Vec<usize> = (0..nl).collect();
        perm.shuffle(&mut stream_rng(seed, Stream::Shuffle, &[LABELED, epoch]));
        let labeled = (0..b).map(|s| perm[(pos * b + s) % nl]).collect();

        let nu = data.unlabeled.len();
        let mut unlabeled = Vec::new();
        if nu > 0 && self.state.config.features.consistency {
            let mut cycle = u64::MAX;
            let mut perm: Vec<usize> = Vec::new();
            for s in 0..b as u64 {
                let k = j * b as u64 + s;
                if k / nu as u64 != cycle {
                    cycle = k / nu as u64;
                    perm = (0..nu).collect();
                    perm.shuffle(&mut stream_rng(seed, Stream::Shuffle, &[UNLABELED, cycle]));
                }
                unlabeled.push(perm[(k % nu as u64) as usize]);
            }
        }
        (labeled, unlabeled)
    }

    fn sample_pass(&self, task: &Task, j: u64, lambda: f64) -> Result<SampleResult> {
        let cfg = &self.state.config;
        let seed = cfg.seed;
        let key = [j, task.stream, task.slot];
        let numerical = |message: String| Error::Numerical {
            iteration: j,
            seed: derive_seed(seed, Stream::Augment, &key),
            message,
        };
        let scale = 1.0 / cfg.train.batch_size as f64;

        let mut aug = stream_rng(seed, Stream::Augment, &key);
        let (image, boxes) = if self.resolved.augment.random_flip {
            random_hflip(task.image, task.boxes, &mut aug)
        } else {
            (task.image.clone(), task.boxes.map(<[GtBox]>::to_vec))
        };
        let views = build_views(&image, boxes.as_deref(), &self.resolved.augment, &mut aug)?;

        let mut g = Graph::new();
        let x = g.input(views.student.to_tensor(), false);
        let mut noise = stream_rng(seed, Stream::Noise, &[j, task.stream, task.slot, 0]);
        let levels = self
            .detector
            .build(&mut g, &self.state.student, x, Mode::Train, Some(&mut noise), true)?;
        let out = self.detector.collect(&g, &levels);
        let mut grad = out.zeros_like();

        let mut sup = 0.0;
        if let Some(gt) = &views.boxes {
            let grid = self.detector.anchor_grid(views.student.height, views.student.width)?;
            let labels = assign_anchors(gt, &grid, cfg.supervised.pos_iou, cfg.supervised.neg_iou)?;
            let l = supervised_loss(&out, &labels, &grid.anchors(), cfg.detector.loss, &cfg.supervised)?;
            if !l.value.is_finite() {
                return Err(numerical(format!("supervised loss is {}", l.value)));
            }
            sup = l.value;
            let mut g_sup = l.grad;
            g_sup.scale(scale);
            grad.add_assign(&g_sup);
        }

        let mut cont = 0.0;
        if cfg.features.consistency {
            let teacher = &self.state.ema.teacher;
            let corr = views.correspondence;
            let mut teacher_input = views.teacher.clone();
            if let Some(pcfg) = &self.resolved.adversarial {
                let mut adv = stream_rng(seed, Stream::Adversarial, &key);
                let mut probe_noise = stream_rng(seed, Stream::Noise, &[j, task.stream, task.slot, 1]);
                let state = adversarial::synthesize(
                    &self.detector,
                    teacher,
                    &views.teacher,
                    &out,
                    corr,
                    pcfg,
                    &self.resolved.consistency,
                    &mut adv,
                    Some(&mut probe_noise),
                )
                .map_err(|e| match e {
                    Error::Numerical { message, .. } => numerical(message),
                    other => other,
                })?;
                teacher_input = views.teacher.add(&state.r_adv)?;
            }
            let mut tnoise = stream_rng(seed, Stream::Noise, &[j, task.stream, task.slot, 2]);
            let t = self.detector.forward(teacher, &teacher_input, Mode::Train, Some(&mut tnoise))?;
            let c = consistency_cost(&out, &corr.apply(&t), &self.resolved.consistency, None)?;
            if !c.value.is_finite() {
                return Err(numerical(format!("consistency cost is {}", c.value)));
            }
            cont = c.value;
            let mut g_cont = c.grad_student;
            g_cont.scale(lambda * scale);
            grad.add_assign(&g_cont);
        }

        let grads = self.detector.backward(&g, &levels, &grad)?;
        let mut flat = Vec::with_capacity(self.state.student.num_params());
        for (slot, spec) in grads.into_params().into_iter().zip(self.state.student.specs()) {
            match slot {
                Some(v) => flat.extend(v),
                None => flat.extend(std::iter::repeat_n(0.0, spec.len())),
            }
        }
        Ok(SampleResult { grad: flat, sup, cont })
    }

    fn run_tasks(&self, tasks: &[Task], j: u64, lambda: f64) -> Result<Vec<SampleResult>> {
        let threads = worker_count(self.config().train.threads).min(tasks.len()).max(1);
        if threads == 1 {
            return tasks.iter().map(|t| self.sample_pass(t, j, lambda)).collect();
        }
        let mut slots: Vec<Option<Result<SampleResult>>> = (0..tasks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    s.spawn(move || {
                        (w..tasks.len())
                            .step_by(threads)
                            .map(|i| (i, self.sample_pass(&tasks[i], j, lambda)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("training worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every task ran")).collect()
    }

    /// One optimizer step at the current iteration.
    pub fn step(&mut self, data: &TrainData) -> Result<StepMetrics> {
        let start = Instant::now();
        if data.labeled.is_empty() {
            return Err(Error::Data("training needs at least one labeled image".into()));
        }
        let j = self.state.iteration;
        let ipe = self.iterations_per_epoch(data);
        let total = self.total_iterations(data).max(j + 1);
        let epoch = (j / ipe) as usize;
        let cfg = self.state.config.clone();
        let lambda = if cfg.features.consistency {
            Schedule {
                total,
                literal_rampdown: cfg.train.literal_rampdown,
            }
            .lambda(j)
        } else {
            0.0
        };
        let lr = lr_at(&cfg.train, epoch);

        self.state.ema.update(&self.state.student)?;

        let (li, ui) = self.batch_indices(data, j);
        let mut tasks: Vec<Task> = li
            .iter()
            .enumerate()
            .map(|(s, &i)| Task {
                stream: LABELED,
                slot: s as u64,
                image: &data.labeled[i].image,
                boxes: Some(&data.labeled[i].boxes),
            })
            .collect();
        tasks.extend(ui.iter().enumerate().map(|(s, &i)| Task {
            stream: UNLABELED,
            slot: s as u64,
            image: &data.unlabeled[i],
            boxes: None,
        }));
        let results = self.run_tasks(&tasks, j, lambda)?;

        let b = cfg.train.batch_size as f64;
        let mut grad = vec![0.0; self.state.student.num_params()];
        let (mut sup, mut cont) = (0.0, 0.0);
        for r in &results {
            grad.iter_mut().zip(&r.grad).for_each(|(a, g)| *a += g);
            sup += r.sup / b;
            cont += r.cont / b;
        }
        let grad_norm = adversarial::l2_norm(&grad);
        if !grad_norm.is_finite() {
            return Err(Error::Numerical {
                iteration: j,
                seed: derive_seed(cfg.seed, Stream::Augment, &[j]),
                message: format!("gradient norm is {grad_norm}"),
            });
        }

        let teacher_before = cfg!(debug_assertions).then(|| self.state.ema.teacher.flat());
        self.state.adam.step(&mut self.state.student, &grad, lr)?;
        if let Some(before) = teacher_before {
            debug_assert_eq!(before, self.state.ema.teacher.flat(), "optimizer touched the teacher");
        }
        self.state.iteration += 1;
        Ok(StepMetrics {
            iteration: j,
            epoch,
            lambda,
            loss_sup: sup,
            loss_cont: cont,
            lr,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Validation mAP of the current student.
    pub fn validate(&self, data: &TrainData) -> Result<f64> {
        let dets = predict(&self.detector, &self.state.student, &data.val, &self.config().detect, false)?;
        let gts: Vec<Vec<GtBox>> = data.val.iter().map(|s| s.boxes.clone()).collect();
        Ok(evaluate(&dets, &gts, data.num_classes, &self.config().eval)?.map)
    }

    /// Trains up to the configured epoch count, continuing from the current
    /// iteration. With a run directory, the metrics and validation logs are
    /// appended there and a checkpoint is written before the first step and
    /// after every epoch.
    pub fn fit(&mut self, data: &TrainData, run_dir: Option<&Path>) -> Result<FitSummary> {
        self.fit_until(data, run_dir, u64::MAX)
    }

    /// Like [`Trainer::fit`], but stops once `stop` iterations are done,
    /// leaving the run resumable from its last epoch checkpoint.
    pub fn fit_until(&mut self, data: &TrainData, run_dir: Option<&Path>, stop: u64) -> Result<FitSummary> {
        if data.labeled.is_empty() {
            return Err(Error::Data("training needs at least one labeled image".into()));
        }
        let ipe = self.iterations_per_epoch(data);
        let total = self.total_iterations(data);
        let epochs = self.config().train.epochs;
        let val_every = self.config().train.val_every.max(1);
        let mut summary = FitSummary {
            iterations: total,
            metrics: Vec::new(),
            validation: Vec::new(),
            best_map: self.state.best.as_ref().map(|b| b.map),
        };
        if let Some(dir) = run_dir {
            let it = self.state.iteration;
            truncate_from::<StepMetrics>(&dir.join(METRICS_FILE), it)?;
            // Validation rows carry the iteration count they were taken at,
            // so the one logged with the checkpoint itself stays.
            truncate_from::<ValidationRow>(&dir.join(VALIDATION_FILE), it + 1)?;
            append_rows::<StepMetrics>(&dir.join(METRICS_FILE), &[])?;
            append_rows::<ValidationRow>(&dir.join(VALIDATION_FILE), &[])?;
            if it == 0 {
                self.state.save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
        while self.state.iteration < total.min(stop) {
            let row = self.step(data)?;
            if let Some(dir) = run_dir {
                append_rows(&dir.join(METRICS_FILE), &[row])?;
            }
            summary.metrics.push(row);
            if self.state.iteration % ipe != 0 {
                continue;
            }
            let epoch = (self.state.iteration / ipe) as usize;
            if (epoch % val_every == 0 || epoch == epochs) && !data.val.is_empty() {
                let map = self.validate(data)?;
                let v = ValidationRow {
                    epoch,
                    iteration: self.state.iteration,
                    map,
                };
                log::info!("epoch {epoch}: validation mAP {map:.4}");
                if self.state.best.as_ref().is_none_or(|b| map > b.map) {
                    self.state.best = Some(Best {
                        map,
                        iteration: self.state.iteration,
                        student: self.state.student.clone(),
                    });
                }
                if let Some(dir) = run_dir {
                    append_rows(&dir.join(VALIDATION_FILE), &[v])?;
                }
                summary.validation.push(v);
            }
            if let Some(dir) = run_dir {
                self.state.save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
        summary.best_map = self.state.best.as_ref().map(|b| b.map);
        Ok(summary)
    }
}

/// Resolves a thread count; 0 means all available cores.
pub fn worker_count(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// Runs detection over already standardized samples. Teacher weights are
/// refused unless `allow_teacher` is set.
pub fn predict(
    detector: &Detector,
    weights: &ModelWeights,
    samples: &[Sample],
    params: &crate::detector::DetectParams,
    allow_teacher: bool,
) -> Result<Vec<Vec<Detection>>> {
    if weights.role == WeightRole::Teacher && !allow_teacher {
        return Err(Error::config("refusing to run inference with teacher weights"));
    }
    samples.iter().map(|s| detector.detect(weights, &s.image, params)).collect()
}

/// Evaluates `weights` on raw-intensity samples.
pub fn evaluate_weights(
    state: &TrainState,
    weights: &ModelWeights,
    samples: &[Sample],
    num_classes: usize,
    allow_teacher: bool,
) -> Result<(EvalReport, Vec<Vec<Detection>>)> {
    let detector = Detector::new(state.config.resolve().detector)?;
    let prepared: Vec<Sample> = samples
        .iter()
        .map(|s| {
            Ok(Sample {
                image: state.preprocess.apply(&s.image)?,
                boxes: s.boxes.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let dets = predict(&detector, weights, &prepared, &state.config.detect, allow_teacher)?;
    let gts: Vec<Vec<GtBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    Ok((evaluate(&dets, &gts, num_classes, &state.config.eval)?, dets))
}

#[cfg(test)]
mod tests;
