//! Reverse-mode differentiation over the recorded operation graph.

use std::collections::{HashMap, HashSet};

use crate::tensor::{set_grad_enabled, Tensor};

/// Gradients of a scalar with respect to the leaves that required them.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.id())
    }

    /// Gradient for `t`, or zeros when `t` did not influence the output.
    pub fn get_or_zeros(&self, t: &Tensor) -> Tensor {
        self.get(t).cloned().unwrap_or_else(|| t.zeros_like())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Graph nodes reachable from `root` that require grad, in topological order
/// (inputs before outputs).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.node() {
            for inp in node.inputs.iter().rev() {
                if inp.requires_grad() && !visited.contains(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of `root` (summed over its elements when it is not a scalar)
/// with respect to every reachable leaf that requires grad.
///
/// With `create_graph` the gradient computation is itself recorded, so the
/// returned tensors can be differentiated again.
pub fn grad(root: &Tensor, create_graph: bool) -> Gradients {
    let mut out = Gradients::default();
    if !root.requires_grad() {
        return out;
    }
    let _mode = set_grad_enabled(create_graph);
    let order = topo_order(root);
    let mut pending: HashMap<usize, Tensor> = HashMap::new();
    pending.insert(root.id(), root.ones_like());
    for t in order.iter().rev() {
        let Some(g) = pending.remove(&t.id()) else {
            continue;
        };
        let Some(node) = t.node() else {
            out.map.insert(t.id(), g);
            continue;
        };
        let grads = node.op.backward(&node.inputs, t, &g);
        debug_assert_eq!(grads.len(), node.inputs.len(), "{} returned wrong arity", node.op.name());
        for (inp, gi) in node.inputs.iter().zip(grads) {
            let Some(gi) = gi else { continue };
            if !inp.requires_grad() {
                continue;
            }
            assert_eq!(
                gi.shape(),
                inp.shape(),
                "backward of {} produced gradient of wrong shape",
                node.op.name()
            );
            match pending.remove(&inp.id()) {
                Some(acc) => pending.insert(inp.id(), &acc + &gi),
                None => pending.insert(inp.id(), gi),
            };
        }
    }
    out
}

/// First-order gradients; the result carries no history.
pub fn backward(root: &Tensor) -> Gradients {
    grad(root, false)
}
