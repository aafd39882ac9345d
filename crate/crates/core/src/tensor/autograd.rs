use std::collections::{HashMap, HashSet};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// The recorded graph reachable from a loss, flattened into reverse
/// topological order: every node appears after all nodes that consume it.
pub struct Tape<T: Element> {
    order: Vec<Tensor<T>>,
}

impl<T: Element> Tape<T> {
    pub fn record(root: &Tensor<T>) -> Self {
        // Iterative post-order DFS; the post-order reversed is a topological
        // order from the root towards the leaves.
        let mut post = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
        seen.insert(root.id());
        while let Some((t, child)) = stack.pop() {
            let inputs = t.node().map(|n| n.inputs.as_slice()).unwrap_or(&[]);
            if child < inputs.len() {
                let next = inputs[child].clone();
                stack.push((t, child + 1));
                if next.requires_grad() && seen.insert(next.id()) {
                    stack.push((next, 0));
                }
            } else {
                post.push(t);
            }
        }
        post.reverse();
        Tape { order: post }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Op names in visiting order, leaves reported as `"leaf"`.
    pub fn ops(&self) -> Vec<&'static str> {
        self.order
            .iter()
            .map(|t| t.node().map_or("leaf", |n| n.op))
            .collect()
    }

    fn run(&self, seed: Vec<T>) -> Result<()> {
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.order[0].id(), seed);
        for t in &self.order {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            let Some(node) = t.node() else {
                t.accumulate_grad(&g);
                continue;
            };
            let input_grads = (node.backward)(&g);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !input.requires_grad() {
                    continue;
                }
                if ig.len() != input.numel() {
                    return Err(Error::Autograd(format!(
                        "{} produced a gradient of length {} for an input of {} elements",
                        node.op,
                        ig.len(),
                        input.numel()
                    )));
                }
                match grads.get_mut(&input.id()) {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                    None => {
                        grads.insert(input.id(), ig);
                    }
                }
            }
        }
        Ok(())
    }
}

impl<T: Element> Tensor<T> {
    /// Back-propagates from this scalar, accumulating `d self / d leaf` into
    /// every leaf with `requires_grad`. A graph can be differentiated once.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Autograd(
                "loss is detached from every trainable tensor".into(),
            ));
        }
        if self.mark_backward_done() {
            return Err(Error::Autograd(
                "backward already ran on this graph".into(),
            ));
        }
        Tape::record(self).run(vec![T::one()])
    }
}
