//! Versioned checkpoint files.
//!
//! Layout: the magic `SSMDCKPT`, a little-endian `u32` version, a `u64`
//! header length, a JSON header, then the arrays listed in the header as
//! little-endian `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Preprocess;
use crate::detector::{ModelWeights, ParamSpec, WeightRole};
use crate::error::{Error, Result};

use super::optim::{Adam, EmaTracker};

pub const MAGIC: &[u8; 8] = b"SSMDCKPT";
pub const VERSION: u32 = 1;

/// Best validation result seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Best {
    pub map: f64,
    pub iteration: u64,
    pub student: ModelWeights,
}

/// Everything needed to continue or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub preprocess: Preprocess,
    pub student: ModelWeights,
    pub ema: EmaTracker,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub iteration: u64,
    pub best: Option<Best>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    preprocess: Preprocess,
    specs: Vec<ParamSpec>,
    iteration: u64,
    ema_alpha: f64,
    adam: Adam,
    best_map: Option<f64>,
    best_iteration: Option<u64>,
    /// Names of the arrays that follow, each `num_params` long.
    arrays: Vec<String>,
}

impl TrainState {
    /// Writes to a temporary sibling and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays: Vec<(&str, Vec<f64>)> = vec![
            ("student", self.student.flat()),
            ("teacher", self.ema.teacher.flat()),
            ("adam_m", self.adam.m.clone()),
            ("adam_v", self.adam.v.clone()),
        ];
        if let Some(b) = &self.best {
            arrays.push(("best_student", b.student.flat()));
        }
        let header = Header {
            config: self.config.clone(),
            preprocess: self.preprocess,
            specs: self.student.specs().to_vec(),
            iteration: self.iteration,
            ema_alpha: self.ema.alpha,
            adam: self.adam.clone(),
            best_map: self.best.as_ref().map(|b| b.map),
            best_iteration: self.best.as_ref().map(|b| b.iteration),
            arrays: arrays.iter().map(|(n, _)| n.to_string()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(20 + json.len() + arrays.iter().map(|a| a.1.len() * 8).sum::<usize>());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for (_, a) in &arrays {
            for v in a {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("checkpoint version {version}, this build reads version {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("bad header: {e}")))?;
        let n: usize = header.specs.iter().map(ParamSpec::len).sum();
        let data = &body[hlen..];
        if data.len() != header.arrays.len() * n * 8 {
            return Err(bad(&format!(
                "expected {} arrays of {n} values, found {} bytes",
                header.arrays.len(),
                data.len()
            )));
        }
        let mut arrays = std::collections::HashMap::new();
        for (i, name) in header.arrays.iter().enumerate() {
            let chunk = &data[i * n * 8..(i + 1) * n * 8];
            let values: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.insert(name.as_str(), values);
        }
        let mut take = |name: &str| arrays.remove(name).ok_or_else(|| bad(&format!("missing array {name}")));
        let student = ModelWeights::from_flat(WeightRole::Student, header.specs.clone(), &take("student")?)?;
        let teacher = ModelWeights::from_flat(WeightRole::Teacher, header.specs.clone(), &take("teacher")?)?;
        let mut adam = header.adam;
        adam.m = take("adam_m")?;
        adam.v = take("adam_v")?;
        let best = match (header.best_map, header.best_iteration) {
            (Some(map), Some(iteration)) => Some(Best {
                map,
                iteration,
                student: ModelWeights::from_flat(WeightRole::Student, header.specs.clone(), &take("best_student")?)?,
            }),
            _ => None,
        };
        Ok(Self {
            config: header.config,
            preprocess: header.preprocess,
            student,
            ema: EmaTracker::new(header.ema_alpha, teacher)?,
            adam,
            iteration: header.iteration,
            best,
        })
    }

    /// Weights used for inference: the best validated student if any,
    /// otherwise the latest one.
    pub fn inference_weights(&self) -> &ModelWeights {
        self.best.as_ref().map_or(&self.student, |b| &b.student)
    }
}
