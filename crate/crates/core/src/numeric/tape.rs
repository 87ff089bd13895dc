use std::collections::BTreeSet;
use std::sync::Arc;

use super::primitive::{self, Primitive};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Entry {
    value: Arc<Tensor>,
    op: Option<(Primitive, Vec<Var>)>,
    tracked: bool,
}

/// Wengert list for reverse-mode differentiation.
///
/// Entries are appended in evaluation order, so every operand of entry `k`
/// precedes it. Leaves created with [`Tape::leaf`] are tracked; constants are
/// not, and anything computed only from constants is not tracked either.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

/// Gradients of a scalar with respect to every tracked leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    leaves: Vec<Var>,
}

impl Gradients {
    /// Gradient for a leaf; zero-filled when the loss never touched it.
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(leaf.0).and_then(Option::as_ref)
    }

    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        self.grads.get_mut(leaf.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Arc<Tensor>, op: Option<(Primitive, Vec<Var>)>, tracked: bool) -> Var {
        self.entries.push(Entry { value, op, tracked });
        Var(self.entries.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.push(value.into(), None, true)
    }

    pub fn constant(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.push(value.into(), None, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Same value as `v`, cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.entries[v.0].value);
        self.push(value, None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.entries[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.entries[v.0].tracked
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        self.entries[v.0].op.is_none()
    }

    /// Records one primitive application.
    pub fn apply(&mut self, op: Primitive, operands: &[Var]) -> Result<Var> {
        let value = {
            let inputs: Vec<&Tensor> = operands.iter().map(|v| &*self.entries[v.0].value).collect();
            primitive::forward(&op, &inputs)?
        };
        let tracked = operands.iter().any(|v| self.entries[v.0].tracked);
        Ok(self.push(Arc::new(value), Some((op, operands.to_vec())), tracked))
    }

    /// Reverse sweep from a scalar. Every tracked leaf gets an entry; leaves the
    /// loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.entries[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.entries.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        for idx in (0..=loss.0).rev() {
            let entry = &self.entries[idx];
            let Some((op, operands)) = &entry.op else { continue };
            if !entry.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = operands.iter().map(|v| &*self.entries[v.0].value).collect();
            let parts = primitive::backward(op, &inputs, &entry.value, &g);
            for (operand, part) in operands.iter().zip(parts) {
                if !self.entries[operand.0].tracked {
                    continue;
                }
                match &mut grads[operand.0] {
                    Some(acc) => acc.add_assign(&part),
                    slot @ None => *slot = Some(part),
                }
            }
        }
        let mut leaves = Vec::new();
        for (idx, entry) in self.entries.iter().enumerate() {
            if entry.op.is_none() && entry.tracked {
                leaves.push(Var(idx));
                if grads[idx].is_none() {
                    grads[idx] = Some(Tensor::zeros(entry.value.shape().to_vec()));
                }
            } else {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads, leaves })
    }

    /// Tracked leaves that `root` depends on, found by walking the graph
    /// (independent of gradient values).
    pub fn reachable_leaves(&self, root: Var) -> BTreeSet<Var> {
        let mut seen = vec![false; root.0 + 1];
        let mut stack = vec![root];
        let mut out = BTreeSet::new();
        while let Some(v) = stack.pop() {
            if seen[v.0] {
                continue;
            }
            seen[v.0] = true;
            let entry = &self.entries[v.0];
            if !entry.tracked {
                continue;
            }
            match &entry.op {
                None => {
                    out.insert(v);
                }
                Some((_, operands)) => stack.extend(operands.iter().copied()),
            }
        }
        out
    }
}
