//! Ablation sweeps: one training run per (feature set, seed), evaluated on
//! the held-out test split with the best validated student.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Features, Mode, RunConfig};
use crate::data::synthetic::{generate, SyntheticSpec};
use crate::data::{split, Dataset, Split, SplitData, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::trainer::{evaluate_weights, fit_preprocess, TrainData, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct LadderStep {
    pub name: String,
    pub features: Features,
}

/// Supervised baseline, consistency with a flip, then the adaptive weight,
/// noisy gates, adversarial perturbation and cutout added one at a time.
/// Consecutive steps differ in exactly one flag.
pub fn ladder() -> Vec<LadderStep> {
    let mut steps = vec![
        LadderStep {
            name: "supervised".into(),
            features: Mode::Supervised.features(),
        },
        LadderStep {
            name: "csd".into(),
            features: Mode::Csd.features(),
        },
    ];
    let add: [(&str, fn(&mut Features)); 4] = [
        ("+acc", |f| f.acc = true),
        ("+nrb", |f| f.nrb = true),
        ("+adversarial", |f| f.adversarial = true),
        ("+cutout", |f| f.cutout = true),
    ];
    for (name, set) in add {
        let mut f = steps.last().expect("non-empty").features;
        set(&mut f);
        steps.push(LadderStep {
            name: name.into(),
            features: f,
        });
    }
    steps
}

/// Number of feature flags that differ.
pub fn flag_distance(a: &Features, b: &Features) -> usize {
    [
        a.consistency != b.consistency,
        a.acc != b.acc,
        a.nrb != b.nrb,
        a.adversarial != b.adversarial,
        a.cutout != b.cutout,
        a.flip != b.flip,
    ]
    .iter()
    .filter(|d| **d)
    .count()
}

/// Dataset shared by every step of a sweep for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPlan {
    pub synthetic: SyntheticSpec,
    pub count: usize,
    pub split: SplitSpec,
}

impl Default for DataPlan {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            count: 100,
            split: SplitSpec::default(),
        }
    }
}

impl DataPlan {
    /// 200 training images (10% labeled) with 100 each for validation and
    /// test, so that mAP differences of a point are not lost in the noise
    /// of a small test split.
    pub fn ablation() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            count: 400,
            split: SplitSpec {
                labeled_ratio: 0.1,
                train: 0.5,
                val: 0.25,
                test: 0.25,
                seed: 0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        if self.count == 0 {
            return Err(Error::config("count must be at least 1"));
        }
        split(self.count, &self.split).map(|_| ())
    }

    /// The same plan with the generator and split seeded by `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut p = self.clone();
        p.synthetic.seed = seed;
        p.split.seed = seed;
        p
    }

    pub fn generate(&self) -> Result<(Dataset, Split)> {
        let ds = generate(&self.synthetic, self.count)?;
        let sp = split(self.count, &self.split)?;
        Ok((ds, sp))
    }

    /// Generates and splits the data for `seed`.
    pub fn build(&self, seed: u64) -> Result<SplitData> {
        let (ds, sp) = self.seeded(seed).generate()?;
        Ok(SplitData::from_dataset(&ds, &sp))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub step: String,
    pub seed: u64,
    pub val_map: f64,
    pub test_map: f64,
    /// Sensitivity at the largest configured false-positive budget.
    pub test_sensitivity: f64,
    pub iterations: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: String,
    pub features: String,
    pub seeds: usize,
    pub mean_map: f64,
    pub std_map: f64,
    pub mean_sensitivity: f64,
}

/// Trains one configuration and evaluates it on the test split.
pub fn run_one(config: &RunConfig, step: &str, data: &SplitData, out: Option<&Path>) -> Result<(RunResult, EvalReport)> {
    let start = Instant::now();
    let pre = fit_preprocess(data, config)?;
    let train = TrainData::new(data, &pre)?;
    let mut trainer = Trainer::new(config.clone(), pre)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), config.to_toml_string()?)?;
    }
    let summary = trainer.fit(&train, out)?;
    let state = &trainer.state;
    let (report, _) = evaluate_weights(state, state.inference_weights(), &data.test, data.num_classes(), false)?;
    if let Some(dir) = out {
        crate::evaluation::write_report(dir, &report, crate::evaluation::MetricSet::All)?;
    }
    let result = RunResult {
        step: step.to_string(),
        seed: config.seed,
        val_map: summary.best_map.unwrap_or(f64::NAN),
        test_map: report.map,
        test_sensitivity: report.sensitivities.last().map_or(f64::NAN, |s| s.1),
        iterations: summary.iterations,
        seconds: start.elapsed().as_secs_f64(),
    };
    log::info!(
        "{step} seed {}: test mAP {:.4}, sensitivity {:.4} ({:.1}s)",
        config.seed,
        result.test_map,
        result.test_sensitivity,
        result.seconds
    );
    Ok((result, report))
}

/// Runs every step for every seed. With `out`, each run gets
/// `out/<index>_<step>/seed<seed>/` and the sweep writes `runs.csv` and
/// `summary.csv`.
pub fn run_ladder(
    base: &RunConfig,
    steps: &[LadderStep],
    seeds: &[u64],
    plan: &DataPlan,
    out: Option<&Path>,
) -> Result<(Vec<RunResult>, Vec<StepSummary>)> {
    if steps.is_empty() || seeds.is_empty() {
        return Err(Error::config("an ablation needs at least one step and one seed"));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let data = plan.build(seed)?;
        for (i, step) in steps.iter().enumerate() {
            let config = RunConfig {
                seed,
                features: step.features,
                ..base.clone()
            };
            let dir: Option<PathBuf> = out.map(|o| o.join(format!("{i}_{}", step.name.trim_start_matches('+'))).join(format!("seed{seed}")));
            runs.push(run_one(&config, &step.name, &data, dir.as_deref())?.0);
        }
    }
    let summary = summarize(steps, &runs);
    if let Some(o) = out {
        write_csv(&o.join("runs.csv"), &runs)?;
        write_csv(&o.join("summary.csv"), &summary)?;
    }
    Ok((runs, summary))
}

pub fn summarize(steps: &[LadderStep], runs: &[RunResult]) -> Vec<StepSummary> {
    steps
        .iter()
        .map(|s| {
            let maps: Vec<f64> = runs.iter().filter(|r| r.step == s.name).map(|r| r.test_map).collect();
            let sens: Vec<f64> = runs.iter().filter(|r| r.step == s.name).map(|r| r.test_sensitivity).collect();
            let n = maps.len().max(1) as f64;
            let mean = maps.iter().sum::<f64>() / n;
            let var = maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
            StepSummary {
                step: s.name.clone(),
                features: describe(&s.features),
                seeds: maps.len(),
                mean_map: mean,
                std_map: var.sqrt(),
                mean_sensitivity: sens.iter().sum::<f64>() / n,
            }
        })
        .collect()
}

/// The enabled flags, joined with `+`.
pub fn describe(f: &Features) -> String {
    let names = [
        (f.consistency, "consistency"),
        (f.flip, "flip"),
        (f.acc, "acc"),
        (f.nrb, "nrb"),
        (f.adversarial, "adversarial"),
        (f.cutout, "cutout"),
    ];
    let on: Vec<&str> = names.iter().filter(|(b, _)| *b).map(|(_, n)| *n).collect();
    if on.is_empty() {
        "none".into()
    } else {
        on.join("+")
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_moves_one_flag_at_a_time() {
        let l = ladder();
        assert_eq!(l.first().unwrap().features, Mode::Supervised.features());
        assert_eq!(l[1].features, Mode::Csd.features());
        assert_eq!(l.last().unwrap().features, Mode::Ssmd.features());
        for w in l.windows(2) {
            assert_eq!(flag_distance(&w[0].features, &w[1].features), 1, "{} -> {}", w[0].name, w[1].name);
        }
    }

    #[test]
    fn summary_statistics() {
        let steps = &ladder()[..2];
        let run = |step: &str, m: f64| RunResult {
            step: step.into(),
            seed: 0,
            val_map: 0.0,
            test_map: m,
            test_sensitivity: 2.0 * m,
            iterations: 1,
            seconds: 0.0,
        };
        let s = summarize(steps, &[run("supervised", 0.2), run("supervised", 0.4), run("csd", 0.5)]);
        assert!((s[0].mean_map - 0.3).abs() < 1e-12 && (s[0].std_map - 0.1).abs() < 1e-12);
        assert_eq!(s[1].seeds, 1);
        assert!((s[1].mean_sensitivity - 1.0).abs() < 1e-12);
        assert_eq!(s[0].features, "flip");
    }
}
