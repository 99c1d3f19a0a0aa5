//! The run configuration: every tunable in one TOML document.
//!
//! Feature flags decide which parts of the method run; the per-module
//! sections only carry their constants. [`RunConfig::resolve`] folds the
//! flags into the module configs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversarial::PerturbationConfig;
use crate::augment::AugmentConfig;
use crate::detector::{DetectParams, DetectorConfig};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::losses::{Components, ConsistencyConfig, Reduction, SupervisedConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Features {
    /// Train on unlabeled data through the consistency cost at all.
    pub consistency: bool,
    /// Adaptive consistency weighting.
    pub acc: bool,
    /// Noisy residual gates in the backbone.
    pub nrb: bool,
    pub adversarial: bool,
    pub cutout: bool,
    /// Mirror the teacher view.
    pub flip: bool,
}

impl Default for Features {
    fn default() -> Self {
        Mode::Ssmd.features()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Supervised,
    Csd,
    Ssmd,
}

impl Mode {
    pub fn features(self) -> Features {
        match self {
            Mode::Supervised => Features {
                consistency: false,
                acc: false,
                nrb: false,
                adversarial: false,
                cutout: false,
                flip: true,
            },
            Mode::Csd => Features {
                consistency: true,
                acc: false,
                nrb: false,
                adversarial: false,
                cutout: false,
                flip: true,
            },
            Mode::Ssmd => Features {
                consistency: true,
                acc: true,
                nrb: true,
                adversarial: true,
                cutout: true,
                flip: true,
            },
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "csd" => Ok(Mode::Csd),
            "ssmd" => Ok(Mode::Ssmd),
            other => Err(Error::config(format!("unknown mode {other:?} (supervised, csd, ssmd)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Supervised => "supervised",
            Mode::Csd => "csd",
            Mode::Ssmd => "ssmd",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherInit {
    /// Teacher starts as a copy of the student.
    Copy,
    /// Teacher gets its own random initialization.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Fraction of the epochs after which the learning rate drops.
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_alpha: f64,
    pub teacher_init: TeacherInit,
    /// Use the ramp-down branch exactly as printed, `exp(-12.5 (1 - 7(N-j)/N)^2)`.
    pub literal_rampdown: bool,
    /// Validate (and maybe keep a best checkpoint) every this many epochs.
    pub val_every: usize,
    /// Worker threads for per-sample work; 0 uses the machine's parallelism.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 100,
            lr: 1e-5,
            lr_drop_at: 0.75,
            lr_drop_factor: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_alpha: 0.99,
            teacher_init: TeacherInit::Copy,
            literal_rampdown: false,
            val_every: 1,
            threads: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencySection {
    pub components: Components,
    pub reduction: Reduction,
}

impl Default for ConsistencySection {
    fn default() -> Self {
        Self {
            components: Components::default(),
            reduction: Reduction::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory as written by `gen-data`.
    pub path: Option<String>,
    pub window_lo: f64,
    pub window_hi: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            window_lo: 0.0,
            window_hi: 255.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub features: Features,
    pub detector: DetectorConfig,
    pub supervised: SupervisedConfig,
    pub consistency: ConsistencySection,
    pub adversarial: PerturbationConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub detect: DetectParams,
    pub eval: EvalConfig,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            features: Features::default(),
            detector: DetectorConfig::default(),
            supervised: SupervisedConfig::default(),
            consistency: ConsistencySection::default(),
            adversarial: PerturbationConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            detect: DetectParams::default(),
            eval: EvalConfig::default(),
            data: DataSection::default(),
        }
    }
}

/// Module configs with the feature flags applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub detector: DetectorConfig,
    pub consistency: ConsistencyConfig,
    pub augment: AugmentConfig,
    pub adversarial: Option<PerturbationConfig>,
}

impl RunConfig {
    /// Settings for 64 px synthetic data on a CPU: a learning rate suited to
    /// a few hundred steps, smaller batches and fewer, smaller cutout masks.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.train.lr = 2e-3;
        c.train.epochs = 100;
        c.train.batch_size = 4;
        c.train.val_every = 10;
        c.augment.cutout_n = 3;
        c.augment.cutout_s = 35.0;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::default()),
            other => Err(Error::config(format!("unknown preset {other:?} (desk, paper)"))),
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.features = mode.features();
        self
    }

    /// Parses a config; keys it leaves out take the default value.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::default().overlay_toml(text)
    }

    /// Parses a config whose missing keys are taken from `self`.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut doc, toml::Value::Table(overlay));
        let c: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::default().overlay_file(path)
    }

    pub fn overlay_file(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        self.overlay_toml(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Applies `dotted.key=value` overrides; see [`apply_overrides`].
    pub fn apply_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let c = apply_overrides(self, overrides)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolve();
        r.detector.validate()?;
        r.augment.validate()?;
        self.supervised.validate()?;
        self.adversarial.validate()?;
        self.eval.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(t.lr > 0.0) || !(0.0..=1.0).contains(&t.ema_alpha) || !(0.0..=1.0).contains(&t.lr_drop_at) {
            return Err(Error::config("need lr > 0, ema_alpha in [0, 1] and lr_drop_at in [0, 1]"));
        }
        if !(t.lr_drop_factor > 0.0) || !(t.adam_beta1 >= 0.0 && t.adam_beta1 < 1.0) || !(t.adam_beta2 >= 0.0 && t.adam_beta2 < 1.0) {
            return Err(Error::config("invalid optimizer constants"));
        }
        if !(self.data.window_lo < self.data.window_hi) {
            return Err(Error::config("data window needs lo < hi"));
        }
        Ok(())
    }

    pub fn resolve(&self) -> Resolved {
        let f = self.features;
        let mut detector = self.detector.clone();
        detector.nrb_enabled = f.nrb;
        let mut augment = self.augment;
        augment.flip = f.flip;
        if !f.cutout {
            augment.cutout_n = 0;
        }
        Resolved {
            detector,
            consistency: ConsistencyConfig {
                adaptive: f.acc,
                components: self.consistency.components,
                reduction: self.consistency.reduction,
            },
            augment,
            adversarial: (f.consistency && f.adversarial).then_some(self.adversarial),
        }
    }
}

/// Applies `dotted.key=value` overrides to any serializable settings. The
/// value is parsed as a TOML value, falling back to a bare string; unknown
/// keys are rejected.
pub fn apply_overrides<T, S>(settings: &T, overrides: &[S]) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
    S: AsRef<str>,
{
    let mut doc = toml::Value::try_from(settings).map_err(|e| Error::config(e.to_string()))?;
    for o in overrides {
        let o = o.as_ref();
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {o:?} is not KEY=VALUE")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        set_path(&mut doc, &parts, parse_value(raw.trim()), key)?;
    }
    doc.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(node: &mut toml::Value, parts: &[&str], value: toml::Value, key: &str) -> Result<()> {
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("{key}: {} is not a table", parts[0])))?;
    match parts {
        [] => Err(Error::config("empty override key")),
        // Optional fields are absent from the serialized form, so new leaf
        // keys are accepted here and deserialization rejects unknown ones.
        [leaf] => {
            table.insert(leaf.to_string(), value);
            Ok(())
        }
        [head, rest @ ..] => {
            let child = table
                .get_mut(*head)
                .ok_or_else(|| Error::config(format!("unknown config key {key}")))?;
            set_path(child, rest, value, key)
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
