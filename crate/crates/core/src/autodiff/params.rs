//! Persistent parameter storage with gradient accumulators.
//!
//! Parameters live outside any computation graph: a graph borrows their
//! values when it is built, and `Graph::backward` writes gradients back here.
//! Gradients accumulate additively across backward passes until explicitly
//! cleared, which is what makes multi-tower and multi-loss setups compose.

use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to one parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Encoder weights and biases.
    Encoder,
    /// Prototype rows for one taxonomy level (1 = finest).
    Prototypes { level: usize },
}

/// A named tensor with an optional gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub trainable: bool,
}

/// Ordered collection of parameters. Insertion order is the identity order:
/// checkpoints serialize parameters in this order and restore them to the
/// same ids.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter and return its handle.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Tensor,
        trainable: bool,
    ) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.into(),
            group,
            value,
            grad: None,
            trainable,
        });
        id
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

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id.0].grad.as_deref()
    }

    /// Add `delta` into the gradient accumulator of `id`, creating it if this
    /// is the first contribution since the last reset.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) -> Result<()> {
        let param = &mut self.params[id.0];
        if delta.len() != param.value.len() {
            return Err(Error::ShapeMismatch {
                context: format!("gradient for parameter {}", param.name),
                left: vec![param.value.len()],
                right: vec![delta.len()],
            });
        }
        match &mut param.grad {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => param.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    /// Drop all gradient accumulators.
    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}
