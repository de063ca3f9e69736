use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a slot in a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Slot {
    name: String,
    value: Matrix,
    grad: Matrix,
    trainable: bool,
}

/// Named matrices with same-shape gradient accumulators.
///
/// Non-trainable slots ("buffers") hold state such as batch-norm running
/// statistics: they are persisted and snapshotted with the model but never
/// receive gradients or optimizer updates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    slots: Vec<Slot>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Matrix, trainable: bool) -> ParamId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.slots.push(Slot {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.slots[id.0].trainable)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.slots[id.0].trainable
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.slots[id.0].value
    }

    /// Replaces a slot's value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                left: slot.value.shape(),
                right: value.shape(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.slots[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.slots[id.0].grad
    }

    /// Mutable access to a slot's value and gradient at once.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Matrix, &Matrix) {
        let slot = &mut self.slots[id.0];
        (&mut slot.value, &slot.grad)
    }

    pub fn zero_grad(&mut self) {
        for slot in &mut self.slots {
            slot.grad.fill(0.0);
        }
    }

    /// Number of learnable scalars (buffers excluded).
    pub fn trainable_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.value.len())
            .sum()
    }

    /// Global L2 norm over all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.slots
            .iter()
            .filter(|s| s.trainable)
            .flat_map(|s| s.grad.as_slice())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Copies every slot value from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        if self.slots.len() != other.slots.len() {
            return Err(Error::usage("parameter stores have different layouts"));
        }
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            if dst.value.shape() != src.value.shape() || dst.name != src.name {
                return Err(Error::usage(format!(
                    "slot {} does not match {}",
                    dst.name, src.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
