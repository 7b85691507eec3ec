//! Finite-difference audit of every reverse-mode primitive, exposed as a
//! CLI stage so a build can be validated without the test harness.

use std::collections::BTreeMap;

use anyhow::Result;
use aseg_core::gradcore::{backward, forward, Graph, Node, NodeId, Op, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradcheckReport {
    pub graphs_checked: usize,
    pub max_relative_error: f64,
}

/// Run `graphs` random-graph checks. `fault` is an offset added to every
/// analytic gradient before comparison; nonzero values exist to prove the
/// check can fail (set via ASL_GRADCHECK_FAULT).
pub fn run_suite(graphs: usize, seed: u64, fault: f64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    for trial in 0..graphs {
        let (g, bindings, loss) = random_graph(trial % 10, &mut rng);
        let err = check_graph(&g, &bindings, loss, fault, &mut rng)?;
        max_err = max_err.max(err);
    }
    Ok(GradcheckReport { graphs_checked: graphs, max_relative_error: max_err })
}

fn check_graph(
    g: &Graph,
    bindings: &BTreeMap<NodeId, Tensor>,
    loss: NodeId,
    fault: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let eps = 1e-5;
    let values = forward(g, bindings)?;
    let bundle = backward(g, &values, loss)?;
    let leaves: Vec<NodeId> = g
        .nodes()
        .iter()
        .enumerate()
        .filter_map(|(id, n)| matches!(n, Node::Input | Node::Param).then_some(id))
        .collect();
    let mut max_err: f64 = 0.0;
    for leaf in leaves {
        let analytic = bundle
            .param_grads
            .get(&leaf)
            .or_else(|| bundle.input_grads.get(&leaf))
            .expect("every leaf has a gradient entry");
        let numel = bindings[&leaf].numel();
        let mut coords: Vec<usize> = (0..numel).collect();
        if numel > 16 {
            coords.shuffle(rng);
            coords.truncate(16);
        }
        for coord in coords {
            let base = bindings[&leaf].data()[coord];
            let eval_at = |v: f64| -> Result<f64> {
                let mut b = bindings.clone();
                let mut data = b[&leaf].data().to_vec();
                data[coord] = v;
                b.insert(leaf, Tensor::new(b[&leaf].shape().to_vec(), data)?);
                Ok(forward(g, &b)?[loss].as_scalar().expect("scalar loss"))
            };
            let central = (eval_at(base + eps)? - eval_at(base - eps)?) / (2.0 * eps);
            let err = (analytic.data()[coord] + fault - central).abs() / central.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

/// One random graph per primitive family, ending in a scalar loss.
fn random_graph(variant: usize, rng: &mut ChaCha8Rng) -> (Graph, BTreeMap<NodeId, Tensor>, NodeId) {
    let mut g = Graph::new();
    let rows = rng.gen_range(1..4usize);
    let cols = rng.gen_range(2..5usize);
    let mut rand_data =
        |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect() };
    let x = g.input();
    let xt = Tensor::new(vec![rows, cols], rand_data(rows * cols)).unwrap();
    let mut bindings = BTreeMap::new();

    let loss = match variant {
        0 => {
            let t = g.op(Op::Tanh(x));
            g.op(Op::Sum(t))
        }
        1 => {
            let t = g.op(Op::Relu(x));
            g.op(Op::Sum(t))
        }
        2 => {
            let m = g.op(Op::Mul(x, x));
            let s = g.op(Op::Scale(m, 0.7));
            g.op(Op::Sum(s))
        }
        3 => {
            let w = g.param();
            let b = g.param();
            bindings.insert(w, Tensor::new(vec![cols, 3], rand_data(cols * 3)).unwrap());
            bindings.insert(b, Tensor::new(vec![3], rand_data(3)).unwrap());
            let a = g.op(Op::Affine { x, w, b });
            let t = g.op(Op::Tanh(a));
            g.op(Op::Sum(t))
        }
        4 => {
            let s = g.op(Op::SoftmaxRows(x));
            let labels = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
            let nll = g.op(Op::NegLogPick { x: s, labels });
            g.op(Op::MaskedMean { x: nll, mask: vec![true; rows] })
        }
        5 => {
            let s = g.op(Op::SoftmaxRows(x));
            let kl = g.op(Op::RowKlUniform(s));
            g.op(Op::Sum(kl))
        }
        6 => {
            let s = g.op(Op::SoftmaxRows(x));
            let er = g.op(Op::RowEntropyRatio { x: s, reg: 0.05 });
            g.op(Op::Sum(er))
        }
        7 => {
            let s = g.op(Op::SoftmaxRows(x));
            let col = g.op(Op::PickColumn { x: s, class: rng.gen_range(0..cols) });
            let mask: Vec<bool> = (0..rows).map(|i| i == 0 || rng.gen_bool(0.5)).collect();
            g.op(Op::MaskedMean { x: col, mask })
        }
        8 => {
            let (c, h, w) = (2usize, 4usize, 4usize);
            let img = Tensor::new(vec![c, h, w], rand_data(c * h * w)).unwrap();
            let centers: Vec<(usize, usize)> =
                (0..3).map(|_| (rng.gen_range(0..h), rng.gen_range(0..w))).collect();
            let gathered = g.op(Op::PatchGather { image: x, centers, radius: 1 });
            let t = g.op(Op::Tanh(gathered));
            let loss = g.op(Op::Sum(t));
            bindings.insert(x, img);
            return (g, bindings, loss);
        }
        _ => {
            let a = g.op(Op::Add(x, x));
            let m = g.op(Op::Mul(a, x));
            let mask: Vec<bool> = (0..rows * cols).map(|i| i % 2 == 0).collect();
            g.op(Op::MaskedSum { x: m, mask })
        }
    };
    bindings.insert(x, xt);
    (g, bindings, loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_clean() {
        let r = run_suite(30, 1, 0.0).unwrap();
        assert_eq!(r.graphs_checked, 30);
        assert!(r.max_relative_error <= 1e-4);
    }

    #[test]
    fn injected_fault_detected() {
        let r = run_suite(10, 1, 0.01).unwrap();
        assert!(r.max_relative_error > 1e-4);
    }

    #[test]
    fn empty_suite_is_vacuous() {
        let r = run_suite(0, 1, 0.0).unwrap();
        assert_eq!(r.graphs_checked, 0);
        assert_eq!(r.max_relative_error, 0.0);
    }
}
