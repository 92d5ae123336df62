//! Learnable parameters: a named tensor plus an accumulated gradient slot.

use crate::tensor::Tensor;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique parameter identity. Optimizer state and gradient stores
/// are keyed by this; persistence uses parameter names instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A learnable tensor with a unique name within its model.
#[derive(Debug, Clone)]
pub struct Parameter {
    id: ParamId,
    name: String,
    value: Tensor,
    grad: Option<Vec<f64>>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            id: ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds a gradient contribution into the slot (allocating it on first
    /// use), mirroring `+=` accumulation semantics.
    pub fn accumulate_grad(&mut self, contribution: &[f64]) {
        debug_assert_eq!(contribution.len(), self.value.numel());
        let slot = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.value.numel()]);
        for (dst, src) in slot.iter_mut().zip(contribution.iter()) {
            *dst += src;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Removes and returns the accumulated gradient, leaving the slot empty.
    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }
}
