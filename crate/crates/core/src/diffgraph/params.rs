use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a trainable tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable leaf with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Registry of the statistical parameters of a model.
///
/// Names are unique; insertion order is preserved and defines the
/// serialization and optimizer order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

/// On-disk form of one parameter tensor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SerializedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; a name may appear only once.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::domain(format!("parameter `{name}` registered twice")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `grad` into the accumulated gradient of `id`.
    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.len() != grad.len() {
            return Err(Error::shape(
                "accumulate",
                format!("gradient of length {} for `{}` of length {}", grad.len(), p.name, p.grad.len()),
            ));
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
        Ok(())
    }

    /// Flattened accumulated gradient, in registry order.
    pub fn flat_grad(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.grad.data().iter().copied()).collect()
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    /// Overwrites all values from a flat vector in registry order.
    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::domain(format!(
                "flat parameter vector has {} entries, store has {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `{name: {shape, data}}` view in registry order.
    pub fn to_serialized(&self) -> Vec<(String, SerializedTensor)> {
        self.params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    SerializedTensor {
                        shape: p.value.shape().to_vec(),
                        data: p.value.data().to_vec(),
                    },
                )
            })
            .collect()
    }

    /// Loads values by name; every registered parameter must be present with
    /// a matching shape.
    pub fn load_serialized<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a String, &'a SerializedTensor)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, t) in entries {
            let id = self
                .by_name
                .get(name)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let p = &mut self.params[id];
            if p.value.shape() != t.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    p.value.shape(),
                    t.shape
                )));
            }
            p.value = Tensor::new(t.shape.clone(), t.data.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
            seen[id] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "checkpoint lacks parameter `{}`",
                self.params[missing].name
            )));
        }
        Ok(())
    }
}
