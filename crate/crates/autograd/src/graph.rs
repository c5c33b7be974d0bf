use std::collections::{HashMap, HashSet};

use crate::tensor::{with_grad_mode, Tensor};

/// Gradients of the scalar `output` with respect to each tensor in `wrt`.
///
/// Entries are `None` when `output` does not depend on that tensor. With
/// `create_graph` the returned gradients carry their own history, so they can
/// be differentiated again (needed for gradient penalties).
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Option<Tensor>> {
    assert_eq!(
        output.numel(),
        1,
        "grad() needs a scalar output, got shape {:?}",
        output.shape()
    );
    let seed = Tensor::ones(output.shape());
    grad_with_seed(output, &seed, wrt, create_graph)
}

/// Vector-Jacobian product: pulls `seed` (shaped like `output`) back to `wrt`.
pub fn grad_with_seed(output: &Tensor, seed: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Option<Tensor>> {
    assert_eq!(output.shape(), seed.shape(), "seed shape must match output");
    let mut result = vec![None; wrt.len()];
    if !output.requires_grad() {
        return result;
    }

    let order = topo_order(output);
    let targets: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();

    // A node is relevant when some target is reachable through its inputs.
    // `order` lists inputs before the nodes consuming them.
    let mut relevant: HashSet<u64> = HashSet::new();
    for node in &order {
        let hit = targets.contains(&node.id())
            || node
                .0
                .grad_fn
                .as_ref()
                .is_some_and(|g| g.inputs.iter().any(|i| relevant.contains(&i.id())));
        if hit {
            relevant.insert(node.id());
        }
    }
    if !relevant.contains(&output.id()) {
        return result;
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(output.id(), seed.clone());
    let mut found: HashMap<u64, Tensor> = HashMap::new();

    with_grad_mode(create_graph, || {
        for node in order.iter().rev() {
            if !relevant.contains(&node.id()) {
                continue;
            }
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if targets.contains(&node.id()) {
                found.insert(node.id(), g.clone());
            }
            let Some(grad_fn) = node.0.grad_fn.as_ref() else {
                continue;
            };
            let needs: Vec<bool> = grad_fn
                .inputs
                .iter()
                .map(|i| i.requires_grad() && relevant.contains(&i.id()))
                .collect();
            let input_grads = grad_fn.rule.backward(&grad_fn.inputs, node, &g, &needs);
            debug_assert_eq!(input_grads.len(), grad_fn.inputs.len());
            for ((input, ig), need) in grad_fn.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(ig), true) = (ig, need) else {
                    continue;
                };
                assert_eq!(
                    ig.shape(),
                    input.shape(),
                    "backward of {} produced a mis-shaped gradient",
                    grad_fn.rule.name()
                );
                let acc = match grads.remove(&input.id()) {
                    Some(prev) => prev.add(&ig),
                    None => ig,
                };
                grads.insert(input.id(), acc);
            }
        }
    });

    for (slot, t) in result.iter_mut().zip(wrt) {
        *slot = found.get(&t.id()).cloned();
    }
    result
}

/// Nodes reachable from `root` that require gradients, inputs first.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (node, children already pushed)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(g) = node.0.grad_fn.as_ref() {
            for input in g.inputs.iter().rev() {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}
