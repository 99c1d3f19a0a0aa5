use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;
use ssmd_core::config::{apply_overrides, Mode, RunConfig, TrainConfig};
use ssmd_core::data::{load_annotations, read_dataset_dir, write_dataset_dir, ClassLabel, DatasetMeta, SplitData, SPLIT_FILES};
use ssmd_core::evaluation::{evaluate_files, save_detections, write_report, DetectionRecord, EvalConfig, EvalReport, MetricSet, Overlap};
use ssmd_core::experiment::{flag_distance, ladder, run_ladder, DataPlan, LadderStep};
use ssmd_core::trainer::{evaluate_weights, fit_preprocess, TrainData, TrainState, Trainer, CHECKPOINT_FILE};

use crate::{usage, AblateArgs, ConfigArgs, EvalArgs, GenDataArgs, MetricArg, ModeArg, OverlapArg, SplitArg, TrainArgs, WeightsArg};

pub const THREADS_ENV: &str = "SSMD_KIT_THREADS";

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Supervised => Mode::Supervised,
            ModeArg::Csd => Mode::Csd,
            ModeArg::Ssmd => Mode::Ssmd,
        }
    }
}

/// Makes `dir` ready for writing. A non-empty directory needs `force`, and
/// then only the entries `owned` claims are removed.
fn prepare_out(dir: &Path, force: bool, owned: impl Fn(&str) -> bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(usage(format!("{} exists and is not a directory", dir.display())));
        }
        let entries: Vec<fs::DirEntry> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        if !entries.is_empty() && !force {
            return Err(usage(format!("{} is not empty; pass --force to replace its contents", dir.display())));
        }
        for e in entries {
            let name = e.file_name().to_string_lossy().into_owned();
            if !owned(&name) {
                continue;
            }
            if e.file_type()?.is_dir() {
                fs::remove_dir_all(e.path())?;
            } else {
                fs::remove_file(e.path())?;
            }
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn is_dataset_entry(name: &str) -> bool {
    name == "images" || name == "dataset.json" || SPLIT_FILES.contains(&name)
}

const RUN_FILES: [&str; 11] = [
    "config.toml",
    CHECKPOINT_FILE,
    "metrics.csv",
    "validation.csv",
    "report.csv",
    "pr_curve.csv",
    "froc_curve.csv",
    "summary.json",
    "detections.jsonl",
    "overlay.png",
    "plots",
];

fn is_run_entry(name: &str) -> bool {
    RUN_FILES.contains(&name) || name.starts_with(CHECKPOINT_FILE)
}

fn is_ablation_entry(name: &str) -> bool {
    matches!(name, "runs.csv" | "summary.csv" | "data_plan.json")
        || name.split_once('_').is_some_and(|(i, _)| !i.is_empty() && i.bytes().all(|b| b.is_ascii_digit()))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut plan = apply_overrides(&DataPlan::default(), &a.set)?;
    if let Some(c) = a.count {
        plan.count = c;
    }
    if let Some(r) = a.labeled_ratio {
        plan.split.labeled_ratio = r;
    }
    if let Some(s) = a.seed {
        plan = plan.seeded(s);
    }
    plan.validate()?;
    let (dataset, split) = plan.generate()?;
    prepare_out(&a.out, a.force, is_dataset_entry)?;
    let meta = DatasetMeta {
        count: plan.count,
        synthetic: plan.synthetic.clone(),
        split: plan.split,
        class_names: dataset.class_names.clone(),
    };
    write_dataset_dir(&a.out, &dataset, &split, &meta)?;
    println!(
        "wrote {} images to {}: {} labeled, {} unlabeled, {} validation, {} test",
        plan.count,
        a.out.display(),
        split.labeled.len(),
        split.unlabeled.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

/// Preset, then the config file, then `--set`, then the named flags.
fn build_config(a: &ConfigArgs) -> Result<RunConfig> {
    let mut c = RunConfig::preset(a.preset.as_deref().unwrap_or("desk"))?;
    if let Some(p) = &a.config {
        c = c.overlay_file(p)?;
    }
    c = c.apply_overrides(&a.set)?;
    if let Some(e) = a.epochs {
        c.train.epochs = e;
    }
    if let Some(m) = a.mode {
        c = c.with_mode(m.into());
    }
    c.validate()?;
    Ok(c)
}

fn cap_threads(train: &mut TrainConfig) -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let cap: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    train.threads = if train.threads == 0 { cap } else { train.threads.min(cap) };
    Ok(())
}

fn data_dir(flag: &Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| config.data.path.as_ref().map(PathBuf::from))
        .ok_or_else(|| usage("no dataset given: pass --data or set data.path"))
}

fn load_split(dir: &Path) -> Result<SplitData> {
    read_dataset_dir(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let (mut trainer, split) = if a.resume {
        let c = &a.config;
        if c.config.is_some() || c.preset.is_some() || c.epochs.is_some() || c.mode.is_some() || !c.set.is_empty() || a.seed.is_some() {
            return Err(usage("--resume continues the saved configuration and takes no configuration flags"));
        }
        let path = a.out.join(CHECKPOINT_FILE);
        if !path.exists() {
            return Err(usage(format!("nothing to resume: {} does not exist", path.display())));
        }
        let mut state = TrainState::load(&path)?;
        let split = load_split(&data_dir(&a.data, &state.config)?)?;
        cap_threads(&mut state.config.train)?;
        log::info!("resuming {} at iteration {}", a.out.display(), state.iteration);
        (Trainer::from_state(state)?, split)
    } else {
        let mut config = build_config(&a.config)?;
        if let Some(s) = a.seed {
            config.seed = s;
        }
        if let Some(d) = &a.data {
            config.data.path = Some(d.display().to_string());
        }
        let split = load_split(&data_dir(&None, &config)?)?;
        prepare_out(&a.out, a.force, is_run_entry)?;
        fs::write(a.out.join("config.toml"), config.to_toml_string()?)?;
        cap_threads(&mut config.train)?;
        let pre = fit_preprocess(&split, &config)?;
        (Trainer::new(config, pre)?, split)
    };
    let data = TrainData::new(&split, &trainer.state.preprocess)?;
    let total = trainer.total_iterations(&data);
    let fit = trainer.fit_until(&data, Some(&a.out), a.stop_at.unwrap_or(u64::MAX))?;
    let state = &trainer.state;
    if state.iteration == 0 {
        println!("wrote the initial checkpoint to {}", a.out.display());
        return Ok(());
    }
    if state.iteration < total {
        println!("stopped at iteration {} of {total}", state.iteration);
        return Ok(());
    }
    let mut summary = json!({
        "iterations": state.iteration,
        "best_val_map": fit.best_map,
        "best_iteration": state.best.as_ref().map(|b| b.iteration),
    });
    let mut line = format!("trained {} iterations", state.iteration);
    if let Some(m) = fit.best_map {
        line += &format!(", best validation mAP {m:.4}");
    }
    if !split.test.is_empty() {
        let (report, _) = evaluate_weights(state, state.inference_weights(), &split.test, split.num_classes(), false)?;
        write_report(&a.out, &report, MetricSet::All)?;
        summary["test_map"] = json!(report.map);
        summary["test_sensitivity"] = json!(report.sensitivities);
        line += &format!(", test mAP {:.4}", report.map);
    }
    fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{line}");
    Ok(())
}

fn metric_set(m: MetricArg) -> MetricSet {
    match m {
        MetricArg::Map => MetricSet::Map,
        MetricArg::Froc => MetricSet::Froc,
        MetricArg::All => MetricSet::All,
    }
}

fn eval_config(mut c: EvalConfig, a: &EvalArgs) -> Result<EvalConfig> {
    if let Some(b) = &a.fp_budgets {
        c.fp_budgets = b.clone();
    }
    if let Some(t) = a.iou_threshold {
        c.iou_threshold = t;
    }
    if let Some(o) = a.overlap {
        c.overlap = match o {
            OverlapArg::Iou => Overlap::Iou,
            OverlapArg::Iobb => Overlap::Iobb,
        };
    }
    c.validate()?;
    Ok(c)
}

fn print_report(report: &EvalReport, metrics: MetricSet) {
    if metrics != MetricSet::Froc {
        println!("mAP\t{}", report.map);
        for (i, ap) in report.per_class_ap.iter().enumerate() {
            match ap {
                Some(v) => println!("AP_class_{}\t{v}", i + 1),
                None => println!("AP_class_{}\tabsent", i + 1),
            }
        }
    }
    if metrics != MetricSet::Map {
        for (b, s) in &report.sensitivities {
            println!("sensitivity@{b}\t{s}");
        }
    }
}

/// Checkpoint path from a file or a run directory.
pub fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn class_label(names: &[String], class: usize) -> ClassLabel {
    let name = &names[class - 1];
    name.parse().map_or_else(|_| ClassLabel::Name(name.clone()), ClassLabel::Id)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let metrics = metric_set(a.metric);
    if let (Some(pred), Some(gt)) = (&a.predictions, &a.ground_truth) {
        let report = evaluate_files(pred, gt, &eval_config(EvalConfig::default(), a)?)?;
        if let Some(out) = &a.out {
            write_report(out, &report, metrics)?;
        }
        print_report(&report, metrics);
        return Ok(());
    }
    let ckpt = a
        .checkpoint
        .as_ref()
        .ok_or_else(|| usage("pass --checkpoint, or --predictions with --ground-truth"))?;
    let mut state = TrainState::load(&checkpoint_path(ckpt))?;
    state.config.eval = eval_config(state.config.eval.clone(), a)?;
    let dir = data_dir(&a.data, &state.config)?;
    let split = load_split(&dir)?;
    let (samples, file) = match a.split {
        SplitArg::Labeled => (&split.labeled, SPLIT_FILES[0]),
        SplitArg::Val => (&split.val, SPLIT_FILES[2]),
        SplitArg::Test => (&split.test, SPLIT_FILES[3]),
    };
    let weights = match a.weights {
        WeightsArg::Best => state.inference_weights(),
        WeightsArg::Last => &state.student,
        WeightsArg::Teacher if !a.allow_teacher => {
            return Err(usage("teacher weights are for training only; add --allow-teacher to evaluate them anyway"))
        }
        WeightsArg::Teacher => &state.ema.teacher,
    };
    let (report, dets) = evaluate_weights(&state, weights, samples, split.num_classes(), a.allow_teacher)?;
    if let Some(out) = &a.out {
        write_report(out, &report, metrics)?;
        let records = load_annotations(&dir.join(file))?;
        let rows: Vec<DetectionRecord> = records
            .iter()
            .zip(&dets)
            .flat_map(|(r, ds)| {
                ds.iter().map(|d| DetectionRecord {
                    image: r.path.clone(),
                    class: class_label(&split.class_names, d.class),
                    score: d.score,
                    bbox: d.bbox.corners(),
                })
            })
            .collect();
        save_detections(&out.join("detections.jsonl"), &rows)?;
    }
    print_report(&report, metrics);
    Ok(())
}

fn select_steps(names: &Option<Vec<String>>) -> Result<Vec<LadderStep>> {
    let all = ladder();
    let Some(names) = names else {
        return Ok(all);
    };
    let bare = |s: &str| s.trim_start_matches('+').to_string();
    names
        .iter()
        .map(|n| {
            all.iter().find(|s| bare(&s.name) == bare(n)).cloned().ok_or_else(|| {
                let known: Vec<&str> = all.iter().map(|s| s.name.as_str()).collect();
                usage(format!("unknown ablation step {n:?}; expected one of {}", known.join(", ")))
            })
        })
        .collect()
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let mut base = build_config(&a.config)?;
    cap_threads(&mut base.train)?;
    let mut plan = apply_overrides(&DataPlan::ablation(), &a.data_set)?;
    if let Some(c) = a.count {
        plan.count = c;
    }
    if let Some(r) = a.labeled_ratio {
        plan.split.labeled_ratio = r;
    }
    plan.validate()?;
    let steps = select_steps(&a.steps)?;
    for w in steps.windows(2) {
        if flag_distance(&w[0].features, &w[1].features) != 1 {
            log::warn!("steps {} and {} differ in more than one flag", w[0].name, w[1].name);
        }
    }
    prepare_out(&a.out, a.force, is_ablation_entry)?;
    fs::write(a.out.join("data_plan.json"), serde_json::to_string_pretty(&plan)? + "\n")?;
    let (_, summary) = run_ladder(&base, &steps, &a.seeds, &plan, Some(&a.out))?;
    println!("{:<14} {:>6} {:>9} {:>8} {:>12}", "step", "seeds", "mean mAP", "std", "sensitivity");
    for s in &summary {
        println!(
            "{:<14} {:>6} {:>9.4} {:>8.4} {:>12.4}",
            s.step, s.seeds, s.mean_map, s.std_map, s.mean_sensitivity
        );
    }
    Ok(())
}
