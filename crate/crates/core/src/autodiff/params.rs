use super::{Graph, Tensor};
use crate::error::{Error, Result};

/// Which learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Alignment,
    Classifier,
}

impl ParamGroup {
    pub fn code(self) -> u8 {
        match self {
            ParamGroup::Alignment => 0,
            ParamGroup::Classifier => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ParamGroup::Alignment),
            1 => Some(ParamGroup::Classifier),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Named learnable tensors shared by every network of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, mut tensor: Tensor) -> ParamId {
        tensor.set_requires_grad(true);
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Adds the gradients a finished backward pass left on this store's
    /// parameter nodes into each tensor's gradient slot.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (id, grad) in graph.param_grads() {
            self.entries[id.0].tensor.accumulate_grad(grad);
        }
    }

    /// Overwrites values (not gradients) from `other`, matching by name.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Data(format!(
                "parameter count mismatch: have {}, source has {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|s| s.name == e.name)
                .ok_or_else(|| Error::Data(format!("parameter {} missing from source", e.name)))?;
            if src.tensor.shape() != e.tensor.shape() {
                return Err(Error::Data(format!(
                    "parameter {} has shape {:?}, source has {:?}",
                    e.name,
                    e.tensor.shape(),
                    src.tensor.shape()
                )));
            }
            e.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}
