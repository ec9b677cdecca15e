//! Reverse-mode differentiation over a flat operation tape.
//!
//! Forward passes append nodes; each node owns its output value and a
//! one-shot backward closure that routes the upstream gradient to the node's
//! inputs. Node indices are handed out in creation order, which makes the
//! tape topologically ordered by construction: replaying it backward visits
//! every node exactly once, and a tensor feeding several consumers receives
//! the sum of all path gradients.

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Index of a value recorded on the tape.
pub type VarId = usize;

pub(crate) type BackFn<T> = Box<dyn FnOnce(&Tensor<T>, &mut GradSink<T>) + Send>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    back: Option<BackFn<T>>,
}

/// Per-variable gradient accumulator used during replay.
pub struct GradSink<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradSink<T> {
    /// Add a contribution for `id`, summing with anything already there.
    pub fn accumulate(&mut self, id: VarId, g: Tensor<T>) {
        match &mut self.grads[id] {
            Some(acc) => acc
                .add_assign(&g)
                .expect("gradient contributions must share the variable's shape"),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients for every variable that participated in the loss.
pub struct Gradients<T: Scalar> {
    by_var: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn var(&self, id: VarId) -> Option<&Tensor<T>> {
        self.by_var.get(id).and_then(|g| g.as_ref())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: Vec<(ParamId, VarId)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: Vec::new(),
        }
    }

    /// Record an input that requires no gradient routing of its own.
    pub fn leaf(&mut self, value: Tensor<T>) -> VarId {
        self.push(value, None)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, back: Option<BackFn<T>>) -> VarId {
        #[cfg(debug_assertions)]
        debug_assert!(
            value.is_finite(),
            "non-finite value recorded on the tape (node {})",
            self.nodes.len()
        );
        self.nodes.push(Node { value, back });
        self.nodes.len() - 1
    }

    /// Register a trainable parameter from the store, once per tape.
    pub fn bind(&mut self, store: &ParamStore<T>, id: ParamId) -> VarId {
        if let Some(&(_, var)) = self.bound.iter().find(|(pid, _)| *pid == id) {
            return var;
        }
        let var = self.leaf(store.value(id).clone());
        self.bound.push((id, var));
        var
    }

    /// Parameters registered on this tape, in first-use order.
    pub fn bound_params(&self) -> &[(ParamId, VarId)] {
        &self.bound
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Accumulate gradients of a scalar loss with respect to every recorded
    /// variable. Consumes the backward closures, so it runs once per tape.
    pub fn backward(&mut self, loss: VarId) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage(
                "backward on a tape with no recorded nodes".into(),
            ));
        }
        if loss >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "loss variable {loss} is not on the tape"
            )));
        }
        let loss_value = &self.nodes[loss].value;
        if loss_value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut sink = GradSink {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
        };
        sink.grads[loss] = Some(Tensor::full(loss_value.shape(), T::one()));
        for id in (0..=loss).rev() {
            let Some(g) = sink.grads[id].take() else {
                continue;
            };
            let back = self.nodes[id].back.take();
            if let Some(back) = back {
                back(&g, &mut sink);
            }
            sink.grads[id] = Some(g);
        }
        Ok(Gradients {
            by_var: sink.grads,
        })
    }
}
