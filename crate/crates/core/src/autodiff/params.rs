use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named learnable parameters plus non-trainable buffers (batch-norm running
/// statistics). Names are unique across both.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<(String, Tensor)>,
    names: HashMap<String, Slot>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name, Slot::Param(self.params.len()))?;
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name, Slot::Buffer(self.buffers.len()))?;
        self.buffers.push((name, value));
        Ok(BufferId(self.buffers.len() - 1))
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name '{name}'")));
        }
        self.names.insert(name.to_owned(), slot);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
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

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        match self.names.get(name) {
            Some(Slot::Buffer(i)) => Some(BufferId(*i)),
            _ => None,
        }
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn buffers(&self) -> &[(String, Tensor)] {
        &self.buffers
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = BufferId> {
        (0..self.buffers.len()).map(BufferId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Global L2 norm over all gradient accumulators.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.frobenius_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.scale_in_place(s);
        }
    }

    /// Overwrites values of matching names from `other`. Shapes must agree.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, slot) in &other.names {
            let (src, dst) = match (slot, self.names.get(name)) {
                (Slot::Param(i), Some(Slot::Param(j))) => {
                    (&other.params[*i].value, &mut self.params[*j].value)
                }
                (Slot::Buffer(i), Some(Slot::Buffer(j))) => {
                    (&other.buffers[*i].1, &mut self.buffers[*j].1)
                }
                _ => return Err(Error::Checkpoint(format!("unknown entry '{name}'"))),
            };
            if src.shape() != dst.shape() {
                return Err(Error::Shape {
                    op: "copy_values_from",
                    left: dst.shape(),
                    right: src.shape(),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_across_params_and_buffers() {
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::zeros(2, 2)).unwrap();
        assert!(store.add("a.w", Tensor::zeros(1, 1)).is_err());
        assert!(store.add_buffer("a.w", Tensor::zeros(1, 1)).is_err());
        store.add_buffer("a.mean", Tensor::zeros(1, 2)).unwrap();
        assert_eq!(store.find("a.w"), Some(ParamId(0)));
        assert_eq!(store.find("a.mean"), None);
    }

    #[test]
    fn gradient_shape_matches_value() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::filled(3, 4, 1.0)).unwrap();
        assert_eq!(store.grad(id).shape(), store.value(id).shape());
    }
}
