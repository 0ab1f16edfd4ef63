use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::spec::{Init, ModelSpec, ParamSlot};
use crate::error::{Error, Result};

/// One named parameter: an n-d shape and its row-major `f32` payload.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Name-keyed parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, ParamTensor>,
}

/// Batch-norm running statistics are stored alongside the weights but are
/// not learned.
pub fn is_learnable(name: &str) -> bool {
    !(name.ends_with("running_mean") || name.ends_with("running_var"))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ParamTensor) -> Option<ParamTensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamTensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamTensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.values().map(ParamTensor::numel).sum()
    }

    pub fn learnable_numel(&self) -> usize {
        self.iter()
            .filter(|(n, _)| is_learnable(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// True when the store holds no batch-norm tensors, i.e. it has been through
    /// fusion.
    pub fn looks_fused(&self) -> bool {
        !self.names().any(|n| n.contains(".bn."))
    }

    /// Checks that the store holds exactly the tensors of `layout`, with
    /// matching shapes.
    pub fn check_layout(&self, layout: &[ParamSlot]) -> Result<()> {
        let mismatch = |detail: String| Error::NameSetMismatch {
            expected: format!("the {}-tensor layout", layout.len()),
            detail,
        };
        for slot in layout {
            match self.get(&slot.name) {
                None => return Err(mismatch(format!("missing tensor `{}`", slot.name))),
                Some(t) if t.shape != slot.shape => {
                    return Err(mismatch(format!(
                        "tensor `{}` has shape {:?}, expected {:?}",
                        slot.name, t.shape, slot.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if self.len() != layout.len() {
            let extra = self
                .names()
                .find(|n| !layout.iter().any(|s| s.name == *n))
                .unwrap_or_default()
                .to_string();
            return Err(mismatch(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}

/// Fresh unfused parameters for `spec`. Weights draw `N(0, 1) / sqrt(fan_in)`
/// from a ChaCha8 stream in layout order; batch norm starts as the identity,
/// biases and position tables at zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for slot in spec.param_layout(false) {
        let n = slot.numel();
        let data = match slot.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { fan_in } => {
                let scale = 1.0 / (fan_in.max(1) as f32).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f32 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                    .collect()
            }
        };
        store.insert(slot.name, ParamTensor::new(slot.shape, data)?);
    }
    Ok(store)
}
