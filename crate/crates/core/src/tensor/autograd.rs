use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use super::{Element, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables tape recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    NoGradGuard {
        prev: GRAD_ENABLED.with(|g| g.replace(false)),
    }
}

/// The gradient-carrying tensors reachable from a root, in creation order.
///
/// Tensor ids are handed out monotonically and an operation's inputs always
/// exist before its output, so sorting by id is a topological order.
pub struct GradTape<T: Element> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Element> GradTape<T> {
    pub fn from_root(root: &Tensor<T>) -> Self {
        let mut seen = HashSet::new();
        let mut nodes = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(node) = t.node() {
                stack.extend(node.inputs.iter().cloned());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(Tensor::id);
        GradTape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Tensor<T>] {
        &self.nodes
    }

    /// Operation names in tape order; leaves appear as `"leaf"`.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|t| t.node().map_or("leaf", |n| n.op))
            .collect()
    }

    /// True when every node's inputs appear before it.
    pub fn is_topological(&self) -> bool {
        let position: HashMap<u64, usize> =
            self.nodes.iter().enumerate().map(|(i, t)| (t.id(), i)).collect();
        self.nodes.iter().enumerate().all(|(i, t)| {
            t.node().is_none_or(|n| {
                n.inputs
                    .iter()
                    .filter(|x| x.requires_grad())
                    .all(|x| position.get(&x.id()).is_some_and(|&p| p < i))
            })
        })
    }
}

impl<T: Element> Tensor<T> {
    /// Back-propagates from this scalar into every reachable leaf that
    /// requires gradient. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward() on a tensor that is not attached to a gradient tape".into(),
            ));
        }
        let tape = GradTape::from_root(self);
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);

        for t in tape.nodes.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            let Some(node) = t.node() else {
                t.accumulate_grad(&g);
                continue;
            };
            let input_grads = {
                let out = t.data();
                (node.backward)(&g, &out, &node.inputs)
            };
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for (input, gi) in node.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(gi.len(), input.numel(), "op {}", node.op);
                match pending.get_mut(&input.id()) {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    None => {
                        pending.insert(input.id(), gi);
                    }
                }
            }
        }
        Ok(())
    }
}
