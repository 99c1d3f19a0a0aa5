use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Which network a weight set belongs to. Evaluation refuses teacher weights
/// unless explicitly asked to run diagnostics on them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightRole {
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every learnable tensor of a detector, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub role: WeightRole,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor>,
}

impl ModelWeights {
    pub fn new(role: WeightRole, specs: Vec<ParamSpec>, tensors: Vec<Tensor>) -> Result<Self> {
        if specs.len() != tensors.len()
            || specs.iter().zip(&tensors).any(|(s, t)| s.shape != t.shape())
        {
            return Err(Error::Layout("tensors do not match their specs".into()));
        }
        Ok(Self {
            role,
            specs,
            tensors,
        })
    }

    pub fn from_flat(role: WeightRole, specs: Vec<ParamSpec>, flat: &[f64]) -> Result<Self> {
        let total: usize = specs.iter().map(ParamSpec::len).sum();
        if total != flat.len() {
            return Err(Error::Layout(format!(
                "layout needs {total} values, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let tensors = specs
            .iter()
            .map(|s| {
                let t = Tensor::new(s.shape.clone(), flat[offset..offset + s.len()].to_vec());
                offset += s.len();
                t
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(role, specs, tensors)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Number of tensors.
    pub fn num_slots(&self) -> usize {
        self.tensors.len()
    }

    /// Number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Layout(format!(
                "expected {} values, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn check_same_layout(&self, other: &ModelWeights) -> Result<()> {
        if self.specs != other.specs {
            return Err(Error::Layout(format!(
                "weight layouts differ ({} vs {} tensors)",
                self.specs.len(),
                other.specs.len()
            )));
        }
        Ok(())
    }

    pub fn with_role(&self, role: WeightRole) -> ModelWeights {
        ModelWeights {
            role,
            ..self.clone()
        }
    }
}
