use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, forward, Graph, Node, NodeId, Result, Tensor};

/// Compare reverse-mode gradients against central finite differences.
///
/// Returns the maximum over checked coordinates of
/// `|autodiff − central| / max(1, |central|)`. When a leaf has more than
/// `max_coords_per_leaf` coordinates, a deterministic (per `seed`) subsample
/// is checked instead of every coordinate.
pub fn grad_check(
    graph: &Graph,
    bindings: &BTreeMap<NodeId, Tensor>,
    loss: NodeId,
    epsilon: f64,
    max_coords_per_leaf: usize,
    seed: u64,
) -> Result<f64> {
    assert!(epsilon > 0.0 && epsilon <= 1e-2, "epsilon must be in (0, 1e-2]");
    let values = forward(graph, bindings)?;
    let bundle = backward(graph, &values, loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut max_err: f64 = 0.0;
    let leaves: Vec<NodeId> = graph
        .nodes()
        .iter()
        .enumerate()
        .filter_map(|(id, n)| matches!(n, Node::Input | Node::Param).then_some(id))
        .collect();

    for leaf in leaves {
        let analytic = bundle
            .param_grads
            .get(&leaf)
            .or_else(|| bundle.input_grads.get(&leaf))
            .expect("every leaf has a gradient entry");
        let numel = bindings[&leaf].numel();
        let mut coords: Vec<usize> = (0..numel).collect();
        if numel > max_coords_per_leaf {
            coords.shuffle(&mut rng);
            coords.truncate(max_coords_per_leaf);
            coords.sort_unstable();
        }
        for coord in coords {
            let base = bindings[&leaf].data()[coord];
            let eval_at = |v: f64| -> Result<f64> {
                let mut b = bindings.clone();
                let mut data = b[&leaf].data().to_vec();
                data[coord] = v;
                b.insert(leaf, Tensor::from_parts_unchecked(b[&leaf].shape().to_vec(), data));
                Ok(forward(graph, &b)?[loss].as_scalar().expect("scalar loss"))
            };
            let plus = eval_at(base + epsilon)?;
            let minus = eval_at(base - epsilon)?;
            let central = (plus - minus) / (2.0 * epsilon);
            let err = (analytic.data()[coord] - central).abs() / central.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
