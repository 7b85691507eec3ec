//! Per-pixel patch classifier.
//!
//! The model is a small MLP applied independently to every pixel's
//! (2r+1)×(2r+1) feature patch (edge-replicated at borders), standing in for
//! a full segmentation backbone; the surrounding method is model-agnostic.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gradcore::{backward, forward, GradError, Graph, NodeId, Op, Tensor};
use crate::scenes::{Scene, ANOMALY_SENTINEL};

#[derive(Debug, Error)]
pub enum SegError {
    #[error("image has {got} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("parameter tensor has {got} elements, architecture needs {expected}")]
    BadParamCount { expected: usize, got: usize },
    #[error("training labels contain the anomaly sentinel")]
    SentinelInTraining,
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("training did not reduce mean cross-entropy ({before} -> {after})")]
    NoImprovement { before: f64, after: f64 },
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("checkpoint error at byte {offset}: {detail}")]
    Checkpoint { offset: u64, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// H×W map of per-pixel maximum softmax probabilities, in [1/N, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Per-pixel decision after thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Anomaly,
    Class(u16),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub num_classes: usize,
    pub feature_channels: usize,
    pub patch_radius: usize,
    /// Hidden layer widths; the full stack is
    /// C·(2r+1)² → dims… → num_classes with tanh between layers.
    pub layer_dims: Vec<usize>,
    pub params: Tensor,
}

/// A model's computation graph over a fixed set of pixel centers, with the
/// node ids needed to bind values and read results back out.
pub struct ModelGraph {
    pub graph: Graph,
    pub image: NodeId,
    pub param_nodes: Vec<NodeId>,
    pub logits: NodeId,
    pub softmax: NodeId,
}

impl SegModel {
    pub fn input_width(&self) -> usize {
        let k = 2 * self.patch_radius + 1;
        self.feature_channels * k * k
    }

    /// (weight shape, bias length) per layer, input to output.
    pub fn layer_shapes(&self) -> Vec<((usize, usize), usize)> {
        let mut dims = vec![self.input_width()];
        dims.extend_from_slice(&self.layer_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|p| ((p[0], p[1]), p[1])).collect()
    }

    /// Flat parameter ranges in checkpoint order: per layer, weights
    /// (row-major, input-major) then bias.
    pub fn param_ranges(&self) -> Vec<Range<usize>> {
        let mut ranges = Vec::new();
        let mut at = 0;
        for ((din, dout), blen) in self.layer_shapes() {
            ranges.push(at..at + din * dout);
            at += din * dout;
            ranges.push(at..at + blen);
            at += blen;
        }
        ranges
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|((din, dout), blen)| din * dout + blen)
            .sum()
    }

    /// Seeded Xavier-uniform initialization.
    pub fn init(
        num_classes: usize,
        feature_channels: usize,
        patch_radius: usize,
        layer_dims: Vec<usize>,
        seed: u64,
    ) -> SegModel {
        let mut model = SegModel {
            num_classes,
            feature_channels,
            patch_radius,
            layer_dims,
            params: Tensor::scalar(0.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(model.param_count());
        for ((din, dout), blen) in model.layer_shapes() {
            let scale = (6.0 / (din + dout) as f64).sqrt();
            for _ in 0..din * dout {
                data.push(rng.gen_range(-scale..scale));
            }
            data.extend(std::iter::repeat(0.0).take(blen));
        }
        model.params = Tensor::new(vec![data.len()], data).expect("finite init");
        model
    }

    pub fn with_params(&self, params: Tensor) -> Result<SegModel, SegError> {
        if params.numel() != self.param_count() {
            return Err(SegError::BadParamCount {
                expected: self.param_count(),
                got: params.numel(),
            });
        }
        let mut m = self.clone();
        m.params = params;
        Ok(m)
    }

    /// Build the classifier graph over the given pixel centers.
    pub fn build_graph(&self, centers: Vec<(usize, usize)>) -> ModelGraph {
        let mut g = Graph::new();
        let image = g.input();
        let mut param_nodes = Vec::new();
        let mut x = g.op(Op::PatchGather { image, centers, radius: self.patch_radius });
        let layers = self.layer_shapes().len();
        for layer in 0..layers {
            let w = g.param();
            let b = g.param();
            param_nodes.push(w);
            param_nodes.push(b);
            x = g.op(Op::Affine { x, w, b });
            if layer + 1 < layers {
                x = g.op(Op::Tanh(x));
            }
        }
        let logits = x;
        let softmax = g.op(Op::SoftmaxRows(logits));
        ModelGraph { graph: g, image, param_nodes, logits, softmax }
    }

    /// Bindings for a built graph: the image plus parameter slices.
    pub fn bindings(&self, mg: &ModelGraph, image: &Tensor) -> BTreeMap<NodeId, Tensor> {
        let mut bindings = BTreeMap::new();
        bindings.insert(mg.image, image.clone());
        let flat = self.params.data();
        let ranges = self.param_ranges();
        for (layer, ((din, dout), blen)) in self.layer_shapes().into_iter().enumerate() {
            let (wrange, brange) = (&ranges[2 * layer], &ranges[2 * layer + 1]);
            bindings.insert(
                mg.param_nodes[2 * layer],
                Tensor::from_parts_unchecked(vec![din, dout], flat[wrange.clone()].to_vec()),
            );
            bindings.insert(
                mg.param_nodes[2 * layer + 1],
                Tensor::from_parts_unchecked(vec![blen], flat[brange.clone()].to_vec()),
            );
        }
        bindings
    }

    /// Assemble a flat parameter gradient from a backward pass.
    pub fn flat_param_grad(
        &self,
        mg: &ModelGraph,
        bundle: &crate::gradcore::GradientBundle,
    ) -> Vec<f64> {
        let mut flat = vec![0.0; self.param_count()];
        for (node, range) in mg.param_nodes.iter().zip(self.param_ranges()) {
            if let Some(g) = bundle.param_grads.get(node) {
                flat[range].copy_from_slice(g.data());
            }
        }
        flat
    }

    fn check_image(&self, image: &Tensor) -> Result<(), SegError> {
        if image.shape().len() != 3 || image.shape()[0] != self.feature_channels {
            return Err(SegError::ChannelMismatch {
                expected: self.feature_channels,
                got: image.shape().first().copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    /// Logits for every pixel → N×H×W tensor.
    pub fn predict_logits(&self, image: &Tensor) -> Result<Tensor, SegError> {
        self.check_image(image)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let centers: Vec<(usize, usize)> =
            (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect();
        let mg = self.build_graph(centers);
        let values = forward(&mg.graph, &self.bindings(&mg, image))?;
        let rows = &values[mg.logits];
        let n = self.num_classes;
        let mut out = vec![0.0; n * h * w];
        for pix in 0..h * w {
            for class in 0..n {
                out[class * h * w + pix] = rows.data()[pix * n + class];
            }
        }
        Ok(Tensor::from_parts_unchecked(vec![n, h, w], out))
    }
}

/// Row-wise softmax over the class axis of an N×H×W logit tensor.
pub fn softmax_map(logits: &Tensor) -> Tensor {
    let (n, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let hw = h * w;
    let data = logits.data();
    let mut out = vec![0.0; n * hw];
    for pix in 0..hw {
        let max = (0..n).map(|c| data[c * hw + pix]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..n {
            let e = (data[c * hw + pix] - max).exp();
            out[c * hw + pix] = e;
            sum += e;
        }
        for c in 0..n {
            out[c * hw + pix] /= sum;
        }
    }
    Tensor::from_parts_unchecked(vec![n, h, w], out)
}

/// Per-pixel maximum softmax probability of an N×H×W softmax tensor.
pub fn msp_score(softmax: &Tensor) -> ScoreMap {
    let (n, h, w) = (softmax.shape()[0], softmax.shape()[1], softmax.shape()[2]);
    let hw = h * w;
    let data = softmax.data();
    let values = (0..hw)
        .map(|pix| (0..n).map(|c| data[c * hw + pix]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    ScoreMap { height: h, width: w, values }
}

/// Threshold rule: a pixel is anomalous iff max_i S_i <= delta, otherwise it
/// gets the argmax class (ties to the lowest index).
pub fn classify_with_threshold(softmax: &Tensor, delta: f64) -> Result<Vec<Decision>, SegError> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(SegError::BadThreshold(delta));
    }
    let (n, h, w) = (softmax.shape()[0], softmax.shape()[1], softmax.shape()[2]);
    let hw = h * w;
    let data = softmax.data();
    let mut out = Vec::with_capacity(hw);
    for pix in 0..hw {
        let mut best = 0;
        let mut best_val = data[pix];
        for c in 1..n {
            let v = data[c * hw + pix];
            if v > best_val {
                best_val = v;
                best = c;
            }
        }
        out.push(if best_val <= delta { Decision::Anomaly } else { Decision::Class(best as u16) });
    }
    Ok(out)
}

/// Mean cross-entropy of the model over every labeled pixel of the scenes.
pub fn mean_cross_entropy(model: &SegModel, scenes: &[Scene]) -> Result<f64, SegError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for scene in scenes {
        let (centers, labels): (Vec<_>, Vec<_>) = scene
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != ANOMALY_SENTINEL)
            .map(|(i, &l)| ((i / scene.width(), i % scene.width()), l as usize))
            .unzip();
        if centers.is_empty() {
            continue;
        }
        let m = centers.len();
        let mg = model.build_graph(centers);
        let mut g = mg.graph.clone();
        let nll = g.op(Op::NegLogPick { x: mg.softmax, labels });
        let loss = g.op(Op::MaskedMean { x: nll, mask: vec![true; m] });
        let values = forward(&g, &model.bindings(&mg, &scene.features))?;
        total += values[loss].as_scalar().expect("scalar") * m as f64;
        count += m;
    }
    if count == 0 {
        return Err(SegError::EmptyCorpus);
    }
    Ok(total / count as f64)
}

/// Supervised pre-training with plain SGD over per-scene pixel minibatches.
///
/// Deterministic per seed. With `epochs > 0` the returned model must have
/// strictly lower mean training cross-entropy than the input model, else an
/// error is returned. The loss trace holds one mean batch loss per epoch.
pub fn train_supervised(
    model: &SegModel,
    scenes: &[Scene],
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<(SegModel, Vec<f64>), SegError> {
    if scenes.is_empty() {
        return Err(SegError::EmptyCorpus);
    }
    if scenes.iter().any(|s| s.labels.contains(&ANOMALY_SENTINEL)) {
        return Err(SegError::SentinelInTraining);
    }
    if epochs == 0 {
        return Ok((model.clone(), Vec::new()));
    }
    let before = mean_cross_entropy(model, scenes)?;
    let mut params = model.params.data().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(epochs);

    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for &si in &order {
            let scene = &scenes[si];
            let hw = scene.height() * scene.width();
            let mut pixels: Vec<usize> = (0..hw).collect();
            pixels.shuffle(&mut rng);
            pixels.truncate(batch.max(1).min(hw));
            let centers: Vec<(usize, usize)> =
                pixels.iter().map(|&i| (i / scene.width(), i % scene.width())).collect();
            let labels: Vec<usize> = pixels.iter().map(|&i| scene.labels[i] as usize).collect();

            let snapshot = model.with_params(
                Tensor::new(vec![params.len()], params.clone()).expect("finite params"),
            )?;
            let m = centers.len();
            let mg = snapshot.build_graph(centers);
            let mut g = mg.graph.clone();
            let nll = g.op(Op::NegLogPick { x: mg.softmax, labels });
            let loss = g.op(Op::MaskedMean { x: nll, mask: vec![true; m] });
            let values = forward(&g, &snapshot.bindings(&mg, &scene.features))?;
            epoch_loss += values[loss].as_scalar().expect("scalar");
            steps += 1;
            let bundle = backward(&g, &values, loss)?;
            let grad = snapshot.flat_param_grad(&mg, &bundle);
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        trace.push(epoch_loss / steps as f64);
    }

    let trained =
        model.with_params(Tensor::new(vec![params.len()], params).expect("finite params"))?;
    let after = mean_cross_entropy(&trained, scenes)?;
    if after >= before {
        return Err(SegError::NoImprovement { before, after });
    }
    Ok((trained, trace))
}

// ── Checkpoint format ───────────────────────────────────────────────────
//
// magic "ASLM", version byte (1), then little-endian u32:
// C, N, patch_radius, layer count, each hidden layer width; then the flat
// parameter vector as little-endian f64 in param_ranges() order.

const CKPT_MAGIC: &[u8; 4] = b"ASLM";
const CKPT_VERSION: u8 = 1;

pub fn save_checkpoint(path: &Path, model: &SegModel) -> Result<(), SegError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&[CKPT_VERSION])?;
    for v in [
        model.feature_channels as u32,
        model.num_classes as u32,
        model.patch_radius as u32,
        model.layer_dims.len() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &d in &model.layer_dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &p in model.params.data() {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

struct CkptReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CkptReader<R> {
    fn take(&mut self, buf: &mut [u8]) -> Result<(), SegError> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                SegError::Checkpoint { offset: at, detail: "truncated".into() }
            } else {
                SegError::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, SegError> {
        let mut b = [0u8; 4];
        self.take(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<SegModel, SegError> {
    let mut r = CkptReader { inner: BufReader::new(File::open(path)?), offset: 0 };

    let mut magic = [0u8; 4];
    r.take(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(SegError::Checkpoint { offset: 0, detail: "bad magic".into() });
    }
    let mut version = [0u8; 1];
    r.take(&mut version)?;
    if version[0] != CKPT_VERSION {
        return Err(SegError::Checkpoint {
            offset: 4,
            detail: format!("unsupported version {}", version[0]),
        });
    }
    let c = r.u32()? as usize;
    let n = r.u32()? as usize;
    let radius = r.u32()? as usize;
    let layers = r.u32()? as usize;
    if c == 0 || n == 0 || layers > 64 {
        return Err(SegError::Checkpoint { offset: 5, detail: "implausible header".into() });
    }
    let mut layer_dims = Vec::with_capacity(layers);
    for _ in 0..layers {
        layer_dims.push(r.u32()? as usize);
    }
    let mut model = SegModel {
        num_classes: n,
        feature_channels: c,
        patch_radius: radius,
        layer_dims,
        params: Tensor::scalar(0.0),
    };
    let count = model.param_count();
    let mut data = vec![0.0f64; count];
    for v in data.iter_mut() {
        let at = r.offset;
        let mut b = [0u8; 8];
        r.take(&mut b)?;
        *v = f64::from_le_bytes(b);
        if !v.is_finite() {
            return Err(SegError::Checkpoint { offset: at, detail: "non-finite parameter".into() });
        }
    }
    model.params = Tensor::from_parts_unchecked(vec![count], data);
    Ok(model)
}
