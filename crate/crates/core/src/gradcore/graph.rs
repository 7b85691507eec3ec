use std::collections::BTreeMap;

use super::{GradError, Result, Tensor, PROB_FLOOR};

pub type NodeId = usize;

/// One graph node: a bindable leaf or a primitive operation.
#[derive(Debug, Clone)]
pub enum Node {
    /// Leaf whose value is bound at forward time; gradients reported as
    /// input gradients (e.g. image pixels for MGU).
    Input,
    /// Leaf whose value is bound at forward time; gradients reported as
    /// parameter gradients.
    Param,
    Op(Op),
}

/// Primitive operations. Shapes use M = rows (pixels in a batch),
/// D = input width, O = output width, N = classes.
#[derive(Debug, Clone)]
pub enum Op {
    Identity(NodeId),
    /// Elementwise sum of two same-shape tensors.
    Add(NodeId, NodeId),
    /// Elementwise product of two same-shape tensors.
    Mul(NodeId, NodeId),
    /// Multiply every element by a constant.
    Scale(NodeId, f64),
    Tanh(NodeId),
    Relu(NodeId),
    /// `x: M×D`, `w: D×O`, `b: O` → `M×O`, y = x·w + b.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    /// Gather a (2r+1)×(2r+1) patch around each listed center pixel of a
    /// C×H×W image, edge-replicated, flattened c-major → M×(C·(2r+1)²)
    /// with M = centers.len().
    PatchGather { image: NodeId, centers: Vec<(usize, usize)>, radius: usize },
    /// Row-wise softmax with max-subtraction; 1-D input is one row.
    SoftmaxRows(NodeId),
    /// Sum of all elements → scalar.
    Sum(NodeId),
    /// Mean over masked entries of a 1-D tensor → scalar. Gradient is zero
    /// outside the mask.
    MaskedMean { x: NodeId, mask: Vec<bool> },
    /// Sum over masked entries of a 1-D tensor → scalar.
    MaskedSum { x: NodeId, mask: Vec<bool> },
    /// Select one column of an M×N matrix → M.
    PickColumn { x: NodeId, class: usize },
    /// Per-row −log(S[row, labels[row]]) of an M×N softmax matrix → M.
    NegLogPick { x: NodeId, labels: Vec<usize> },
    /// Per-row KL(U‖S) = −Σ_i z·log(S_i/z), z = 1/N, of an M×N softmax → M.
    RowKlUniform(NodeId),
    /// Per-row (H_u + r)/(H(S) + r) − 1 of an M×N softmax → M.
    RowEntropyRatio { x: NodeId, reg: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Identity(a)
            | Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::RowKlUniform(a) => vec![a],
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Affine { x, w, b } => vec![x, w, b],
            Op::PatchGather { image, .. } => vec![image],
            Op::MaskedMean { x, .. }
            | Op::MaskedSum { x, .. }
            | Op::PickColumn { x, .. }
            | Op::NegLogPick { x, .. }
            | Op::RowEntropyRatio { x, .. } => vec![x],
        }
    }
}

/// Gradients of a scalar loss with respect to every bound leaf.
#[derive(Debug, Clone, Default)]
pub struct GradientBundle {
    pub param_grads: BTreeMap<NodeId, Tensor>,
    pub input_grads: BTreeMap<NodeId, Tensor>,
}

/// Topologically ordered operation list. Nodes may only reference earlier
/// nodes, which the builder enforces by construction.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn input(&mut self) -> NodeId {
        self.push(Node::Input)
    }

    pub fn param(&mut self) -> NodeId {
        self.push(Node::Param)
    }

    pub fn op(&mut self, op: Op) -> NodeId {
        let id = self.nodes.len();
        for input in op.inputs() {
            assert!(input < id, "op input {input} does not precede node {id}");
        }
        self.push(Node::Op(op))
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }
}

fn finite_or(node: NodeId, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
    if !data.iter().all(|v| v.is_finite()) {
        return Err(GradError::NonFinite { node });
    }
    Ok(Tensor::from_parts_unchecked(shape, data))
}

fn same_shape(node: NodeId, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(GradError::ShapeMismatch {
            node,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// Evaluate every node. Deterministic for fixed bindings; rejects shape
/// mismatches and non-finite intermediates with the offending node id.
pub fn forward(graph: &Graph, bindings: &BTreeMap<NodeId, Tensor>) -> Result<Vec<Tensor>> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.len());
    for (id, node) in graph.nodes().iter().enumerate() {
        let value = match node {
            Node::Input | Node::Param => bindings
                .get(&id)
                .cloned()
                .ok_or(GradError::Unbound { node: id })?,
            Node::Op(op) => eval_op(id, op, &values)?,
        };
        values.push(value);
    }
    Ok(values)
}

fn eval_op(id: NodeId, op: &Op, values: &[Tensor]) -> Result<Tensor> {
    match op {
        Op::Identity(a) => Ok(values[*a].clone()),
        Op::Add(a, b) => {
            let (a, b) = (&values[*a], &values[*b]);
            same_shape(id, a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            finite_or(id, data, a.shape().to_vec())
        }
        Op::Mul(a, b) => {
            let (a, b) = (&values[*a], &values[*b]);
            same_shape(id, a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            finite_or(id, data, a.shape().to_vec())
        }
        Op::Scale(a, c) => {
            let a = &values[*a];
            let data = a.data().iter().map(|x| x * c).collect();
            finite_or(id, data, a.shape().to_vec())
        }
        Op::Tanh(a) => {
            let a = &values[*a];
            let data = a.data().iter().map(|x| x.tanh()).collect();
            finite_or(id, data, a.shape().to_vec())
        }
        Op::Relu(a) => {
            let a = &values[*a];
            let data = a.data().iter().map(|x| x.max(0.0)).collect();
            finite_or(id, data, a.shape().to_vec())
        }
        Op::Affine { x, w, b } => {
            let (x, w, b) = (&values[*x], &values[*w], &values[*b]);
            let (m, d) = x.as_rows();
            if w.shape().len() != 2 || w.shape()[0] != d {
                return Err(GradError::ShapeMismatch {
                    node: id,
                    detail: format!("affine x {:?} vs w {:?}", x.shape(), w.shape()),
                });
            }
            let o = w.shape()[1];
            if b.numel() != o {
                return Err(GradError::ShapeMismatch {
                    node: id,
                    detail: format!("affine bias {:?} vs out width {o}", b.shape()),
                });
            }
            let (xd, wd, bd) = (x.data(), w.data(), b.data());
            let mut out = vec![0.0; m * o];
            for row in 0..m {
                let xr = &xd[row * d..(row + 1) * d];
                let or = &mut out[row * o..(row + 1) * o];
                or.copy_from_slice(bd);
                for (k, &xv) in xr.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wr = &wd[k * o..(k + 1) * o];
                    for (ov, &wv) in or.iter_mut().zip(wr) {
                        *ov += xv * wv;
                    }
                }
            }
            finite_or(id, out, vec![m, o])
        }
        Op::PatchGather { image, centers, radius } => {
            let img = &values[*image];
            if img.shape().len() != 3 {
                return Err(GradError::ShapeMismatch {
                    node: id,
                    detail: format!("patch gather expects C×H×W, got {:?}", img.shape()),
                });
            }
            let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
            let k = 2 * radius + 1;
            let width = c * k * k;
            let m = centers.len();
            if m == 0 {
                return Err(GradError::InvalidOp { node: id, detail: "no centers".into() });
            }
            let data = img.data();
            let mut out = vec![0.0; m * width];
            for (row, &(ch, cw)) in centers.iter().enumerate() {
                if ch >= h || cw >= w {
                    return Err(GradError::InvalidOp {
                        node: id,
                        detail: format!("center ({ch},{cw}) outside {h}×{w}"),
                    });
                }
                let or = &mut out[row * width..(row + 1) * width];
                let mut col = 0;
                for chan in 0..c {
                    let plane = &data[chan * h * w..(chan + 1) * h * w];
                    for dy in 0..k {
                        let y = (ch + dy).saturating_sub(*radius).min(h - 1);
                        for dx in 0..k {
                            let x = (cw + dx).saturating_sub(*radius).min(w - 1);
                            or[col] = plane[y * w + x];
                            col += 1;
                        }
                    }
                }
            }
            finite_or(id, out, vec![m, width])
        }
        Op::SoftmaxRows(a) => {
            let a = &values[*a];
            let (m, n) = a.as_rows();
            let mut out = vec![0.0; m * n];
            for row in 0..m {
                let xr = &a.data()[row * n..(row + 1) * n];
                let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let or = &mut out[row * n..(row + 1) * n];
                let mut sum = 0.0;
                for (o, &x) in or.iter_mut().zip(xr) {
                    *o = (x - max).exp();
                    sum += *o;
                }
                for o in or.iter_mut() {
                    *o /= sum;
                }
            }
            finite_or(id, out, a.shape().to_vec())
        }
        Op::Sum(a) => {
            let s: f64 = values[*a].data().iter().sum();
            finite_or(id, vec![s], vec![1])
        }
        Op::MaskedMean { x, mask } | Op::MaskedSum { x, mask } => {
            let xv = &values[*x];
            if xv.numel() != mask.len() {
                return Err(GradError::ShapeMismatch {
                    node: id,
                    detail: format!("mask length {} vs tensor {}", mask.len(), xv.numel()),
                });
            }
            let count = mask.iter().filter(|&&b| b).count();
            if count == 0 {
                return Err(GradError::EmptyMask { node: id });
            }
            let sum: f64 = xv
                .data()
                .iter()
                .zip(mask)
                .filter_map(|(v, &m)| m.then_some(*v))
                .sum();
            let v = if matches!(op, Op::MaskedMean { .. }) { sum / count as f64 } else { sum };
            finite_or(id, vec![v], vec![1])
        }
        Op::PickColumn { x, class } => {
            let xv = &values[*x];
            let (m, n) = xv.as_rows();
            if *class >= n {
                return Err(GradError::InvalidOp {
                    node: id,
                    detail: format!("column {class} out of {n}"),
                });
            }
            let data = (0..m).map(|row| xv.data()[row * n + class]).collect();
            finite_or(id, data, vec![m])
        }
        Op::NegLogPick { x, labels } => {
            let xv = &values[*x];
            let (m, n) = xv.as_rows();
            if labels.len() != m {
                return Err(GradError::ShapeMismatch {
                    node: id,
                    detail: format!("{} labels vs {m} rows", labels.len()),
                });
            }
            let mut data = Vec::with_capacity(m);
            for (row, &y) in labels.iter().enumerate() {
                if y >= n {
                    return Err(GradError::InvalidOp {
                        node: id,
                        detail: format!("label {y} out of {n}"),
                    });
                }
                data.push(-(xv.data()[row * n + y].max(PROB_FLOOR)).ln());
            }
            finite_or(id, data, vec![m])
        }
        Op::RowKlUniform(x) => {
            let xv = &values[*x];
            let (m, n) = xv.as_rows();
            let z = 1.0 / n as f64;
            let mut data = Vec::with_capacity(m);
            for row in 0..m {
                let sr = &xv.data()[row * n..(row + 1) * n];
                let v: f64 = sr.iter().map(|&s| -z * (s.max(PROB_FLOOR) / z).ln()).sum();
                data.push(v);
            }
            finite_or(id, data, vec![m])
        }
        Op::RowEntropyRatio { x, reg } => {
            let xv = &values[*x];
            let (m, n) = xv.as_rows();
            let h_uniform = (n as f64).ln();
            let mut data = Vec::with_capacity(m);
            for row in 0..m {
                let sr = &xv.data()[row * n..(row + 1) * n];
                let h: f64 = sr.iter().map(|&s| -s * s.max(PROB_FLOOR).ln()).sum();
                data.push((h_uniform + reg) / (h + reg) - 1.0);
            }
            finite_or(id, data, vec![m])
        }
    }
}

/// Reverse-mode pass from a scalar loss node, using values from [`forward`].
pub fn backward(graph: &Graph, values: &[Tensor], loss: NodeId) -> Result<GradientBundle> {
    if values[loss].numel() != 1 {
        return Err(GradError::NonScalarLoss { node: loss });
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.len()];
    grads[loss] = Some(Tensor::scalar(1.0));

    for id in (0..=loss).rev() {
        let Some(grad) = grads[id].take() else { continue };
        match &graph.nodes()[id] {
            Node::Input | Node::Param => {
                grads[id] = Some(grad);
            }
            Node::Op(op) => {
                accumulate_vjp(id, op, values, &grad, &mut grads)?;
            }
        }
    }

    let mut bundle = GradientBundle::default();
    for (id, node) in graph.nodes().iter().enumerate() {
        if let Some(g) = grads[id].take() {
            match node {
                Node::Input => {
                    bundle.input_grads.insert(id, g);
                }
                Node::Param => {
                    bundle.param_grads.insert(id, g);
                }
                Node::Op(_) => {}
            }
        }
    }
    // Leaves unreachable from the loss get explicit zero gradients.
    for (id, node) in graph.nodes().iter().enumerate() {
        match node {
            Node::Input => {
                bundle
                    .input_grads
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(values[id].shape().to_vec()));
            }
            Node::Param => {
                bundle
                    .param_grads
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(values[id].shape().to_vec()));
            }
            Node::Op(_) => {}
        }
    }
    Ok(bundle)
}

fn add_grad(grads: &mut [Option<Tensor>], target: NodeId, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[target] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot => *slot = Some(Tensor::from_parts_unchecked(shape.to_vec(), delta)),
    }
}

fn accumulate_vjp(
    id: NodeId,
    op: &Op,
    values: &[Tensor],
    grad: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let g = grad.data();
    match op {
        Op::Identity(a) => add_grad(grads, *a, values[*a].shape(), g.to_vec()),
        Op::Add(a, b) => {
            add_grad(grads, *a, values[*a].shape(), g.to_vec());
            add_grad(grads, *b, values[*b].shape(), g.to_vec());
        }
        Op::Mul(a, b) => {
            let da = g.iter().zip(values[*b].data()).map(|(g, y)| g * y).collect();
            let db = g.iter().zip(values[*a].data()).map(|(g, x)| g * x).collect();
            add_grad(grads, *a, values[*a].shape(), da);
            add_grad(grads, *b, values[*b].shape(), db);
        }
        Op::Scale(a, c) => {
            add_grad(grads, *a, values[*a].shape(), g.iter().map(|g| g * c).collect());
        }
        Op::Tanh(a) => {
            let y = values[id].data();
            let da = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
            add_grad(grads, *a, values[*a].shape(), da);
        }
        Op::Relu(a) => {
            let x = values[*a].data();
            let da = g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
            add_grad(grads, *a, values[*a].shape(), da);
        }
        Op::Affine { x, w, b } => {
            let (xv, wv) = (&values[*x], &values[*w]);
            let (m, d) = xv.as_rows();
            let o = wv.shape()[1];
            let (xd, wd) = (xv.data(), wv.data());
            let mut dx = vec![0.0; m * d];
            let mut dw = vec![0.0; d * o];
            let mut db = vec![0.0; o];
            for row in 0..m {
                let gr = &g[row * o..(row + 1) * o];
                let xr = &xd[row * d..(row + 1) * d];
                for (k, dxk) in dx[row * d..(row + 1) * d].iter_mut().enumerate() {
                    let wr = &wd[k * o..(k + 1) * o];
                    *dxk = gr.iter().zip(wr).map(|(g, w)| g * w).sum();
                }
                for (k, &xv) in xr.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let dwr = &mut dw[k * o..(k + 1) * o];
                    for (dwv, &gv) in dwr.iter_mut().zip(gr) {
                        *dwv += xv * gv;
                    }
                }
                for (dbv, &gv) in db.iter_mut().zip(gr) {
                    *dbv += gv;
                }
            }
            add_grad(grads, *x, xv.shape(), dx);
            add_grad(grads, *w, wv.shape(), dw);
            add_grad(grads, *b, values[*b].shape(), db);
        }
        Op::PatchGather { image, centers, radius } => {
            let img = &values[*image];
            let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
            let k = 2 * radius + 1;
            let width = c * k * k;
            let mut dimg = vec![0.0; c * h * w];
            for (row, &(ch, cw)) in centers.iter().enumerate() {
                let gr = &g[row * width..(row + 1) * width];
                let mut col = 0;
                for chan in 0..c {
                    let plane = &mut dimg[chan * h * w..(chan + 1) * h * w];
                    for dy in 0..k {
                        let y = (ch + dy).saturating_sub(*radius).min(h - 1);
                        for dx in 0..k {
                            let x = (cw + dx).saturating_sub(*radius).min(w - 1);
                            plane[y * w + x] += gr[col];
                            col += 1;
                        }
                    }
                }
            }
            add_grad(grads, *image, img.shape(), dimg);
        }
        Op::SoftmaxRows(a) => {
            let s = values[id].data();
            let (m, n) = values[id].as_rows();
            let mut da = vec![0.0; m * n];
            for row in 0..m {
                let sr = &s[row * n..(row + 1) * n];
                let gr = &g[row * n..(row + 1) * n];
                let dot: f64 = sr.iter().zip(gr).map(|(s, g)| s * g).sum();
                for ((d, &sv), &gv) in da[row * n..(row + 1) * n].iter_mut().zip(sr).zip(gr) {
                    *d = sv * (gv - dot);
                }
            }
            add_grad(grads, *a, values[*a].shape(), da);
        }
        Op::Sum(a) => {
            let gv = g[0];
            add_grad(grads, *a, values[*a].shape(), vec![gv; values[*a].numel()]);
        }
        Op::MaskedMean { x, mask } | Op::MaskedSum { x, mask } => {
            let gv = g[0];
            let count = mask.iter().filter(|&&b| b).count() as f64;
            let scale = if matches!(op, Op::MaskedMean { .. }) { gv / count } else { gv };
            let da = mask.iter().map(|&m| if m { scale } else { 0.0 }).collect();
            add_grad(grads, *x, values[*x].shape(), da);
        }
        Op::PickColumn { x, class } => {
            let (m, n) = values[*x].as_rows();
            let mut da = vec![0.0; m * n];
            for row in 0..m {
                da[row * n + class] = g[row];
            }
            add_grad(grads, *x, values[*x].shape(), da);
        }
        Op::NegLogPick { x, labels } => {
            let xv = &values[*x];
            let (m, n) = xv.as_rows();
            let mut da = vec![0.0; m * n];
            for (row, &y) in labels.iter().enumerate() {
                let s = xv.data()[row * n + y];
                if s >= PROB_FLOOR {
                    da[row * n + y] = -g[row] / s;
                }
            }
            add_grad(grads, *x, xv.shape(), da);
        }
        Op::RowKlUniform(x) => {
            let xv = &values[*x];
            let (m, n) = xv.as_rows();
            let z = 1.0 / n as f64;
            let mut da = vec![0.0; m * n];
            for row in 0..m {
                let sr = &xv.data()[row * n..(row + 1) * n];
                for (d, &s) in da[row * n..(row + 1) * n].iter_mut().zip(sr) {
                    if s >= PROB_FLOOR {
                        *d = -g[row] * z / s;
                    }
                }
            }
            add_grad(grads, *x, xv.shape(), da);
        }
        Op::RowEntropyRatio { x, reg } => {
            let xv = &values[*x];
            let (m, n) = xv.as_rows();
            let h_uniform = (n as f64).ln();
            let mut da = vec![0.0; m * n];
            for row in 0..m {
                let sr = &xv.data()[row * n..(row + 1) * n];
                let h: f64 = sr.iter().map(|&s| -s * s.max(PROB_FLOOR).ln()).sum();
                let outer = -g[row] * (h_uniform + reg) / ((h + reg) * (h + reg));
                for (d, &s) in da[row * n..(row + 1) * n].iter_mut().zip(sr) {
                    // dH/dS_i = −(ln S_i + 1)
                    *d = outer * -(s.max(PROB_FLOOR).ln() + 1.0);
                }
            }
            add_grad(grads, *x, xv.shape(), da);
        }
    }
    Ok(())
}
