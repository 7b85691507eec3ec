//! Masked Gradient Update: iterative masked descent on input pixels that
//! pushes every pixel of a chosen adversarial class out of its decision
//! region, producing synthetic-unknown auxiliary scenes.
//!
//! Per step, only the pixels still predicted as the adversarial class are
//! updated, each by the input gradient of the mean adversarial softmax
//! probability over that active set. A pixel whose prediction flips stops
//! being updated permanently. All other pixels of the scene are left
//! bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gradcore::{backward, forward, GradError, Op, Tensor};
use crate::scenes::{Role, Scene, ANOMALY_SENTINEL};
use crate::segmodel::{SegError, SegModel};

#[derive(Debug, Error)]
pub enum MguError {
    #[error("adversarial class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("active pixel set is empty")]
    EmptyActiveSet,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] SegError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Once a pixel leaves the active set it never re-enters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReinclusionPolicy {
    PermanentRemoval,
}

#[derive(Debug, Clone)]
pub struct MguConfig {
    /// Step size in feature units.
    pub step_size: f64,
    pub max_iters: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Auxiliary scenes generated per class.
    pub per_class_budget: usize,
    pub reinclusion_policy: ReinclusionPolicy,
    pub seed: u64,
}

impl Default for MguConfig {
    fn default() -> Self {
        MguConfig {
            step_size: 1.5,
            max_iters: 200,
            clip_lo: -1.0,
            clip_hi: 2.0,
            per_class_budget: 10,
            reinclusion_policy: ReinclusionPolicy::PermanentRemoval,
            seed: 0,
        }
    }
}

impl MguConfig {
    pub fn validate(&self) -> Result<(), MguError> {
        if !(self.step_size > 0.0) {
            return Err(MguError::BadConfig("step size must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(MguError::BadConfig("max_iters must be at least 1".into()));
        }
        if !(self.clip_lo < self.clip_hi) {
            return Err(MguError::BadConfig("clip_lo must be below clip_hi".into()));
        }
        Ok(())
    }
}

/// Sorted, duplicate-free set of in-range pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelIndexSet {
    indices: Vec<(usize, usize)>,
}

impl PixelIndexSet {
    pub fn new(mut indices: Vec<(usize, usize)>, height: usize, width: usize) -> Option<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.iter().any(|&(h, w)| h >= height || w >= width) {
            return None;
        }
        Some(PixelIndexSet { indices })
    }

    pub fn indices(&self) -> &[(usize, usize)] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    EmptySet,
    IterCap,
}

/// Diagnostics for one MGU run.
#[derive(Debug, Clone)]
pub struct MguTrace {
    pub iterations: usize,
    /// |P| per iteration; non-increasing under permanent removal.
    pub active_counts: Vec<usize>,
    /// Loss value per iteration, evaluated before the update step.
    pub losses: Vec<f64>,
    pub termination: Termination,
}

impl MguTrace {
    /// CSV with columns `iteration,active_count,loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,active_count,loss\n");
        for (i, (&count, &loss)) in self.active_counts.iter().zip(&self.losses).enumerate() {
            out.push_str(&format!("{i},{count},{loss}\n"));
        }
        out
    }
}

/// An auxiliary scene together with its provenance.
#[derive(Debug, Clone)]
pub struct AuxScene {
    pub scene: Scene,
    pub trace: MguTrace,
    pub adversarial_class: usize,
    /// Index of the source scene in the training corpus.
    pub source_index: usize,
}

impl AuxScene {
    pub fn synth_pixel_count(&self) -> usize {
        self.scene.role.iter().filter(|&&r| r == Role::SynthUnknown).count()
    }
}

/// Mean adversarial-class softmax probability over the active pixels.
pub fn mgu_loss(
    model: &SegModel,
    image: &Tensor,
    active: &PixelIndexSet,
    y_adv: usize,
) -> Result<f64, MguError> {
    if active.is_empty() {
        return Err(MguError::EmptyActiveSet);
    }
    if y_adv >= model.num_classes {
        return Err(MguError::ClassOutOfRange { class: y_adv, num_classes: model.num_classes });
    }
    let mg = model.build_graph(active.indices().to_vec());
    let values = forward(&mg.graph, &model.bindings(&mg, image))?;
    let s = &values[mg.softmax];
    let n = model.num_classes;
    let sum: f64 = (0..active.len()).map(|row| s.data()[row * n + y_adv]).sum();
    Ok(sum / active.len() as f64)
}

/// Run MGU on one scene for one adversarial class.
///
/// Every pixel labeled `y_adv` becomes a synthetic-unknown pixel in the
/// output (sentinel label, `SynthUnknown` role), whether or not the update
/// loop moved it. Pixels of other classes are untouched bit-exactly.
pub fn masked_gradient_update(
    model: &SegModel,
    scene: &Scene,
    y_adv: usize,
    cfg: &MguConfig,
) -> Result<(Scene, MguTrace), MguError> {
    cfg.validate()?;
    if y_adv >= model.num_classes {
        return Err(MguError::ClassOutOfRange { class: y_adv, num_classes: model.num_classes });
    }
    let (h, w) = (scene.height(), scene.width());
    let target: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| scene.labels[i] == y_adv as u16)
        .map(|i| (i / w, i % w))
        .collect();

    if target.is_empty() {
        let trace =
            MguTrace { iterations: 0, active_counts: vec![], losses: vec![], termination: Termination::EmptySet };
        return Ok((scene.clone(), trace));
    }

    let mut features = scene.features.data().to_vec();
    let mut remaining = target.clone();
    let n = model.num_classes;
    let hw = h * w;
    let mut active_counts = Vec::new();
    let mut losses = Vec::new();
    let mut termination = Termination::IterCap;
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        let image = Tensor::new(vec![model.feature_channels, h, w], features.clone())
            .map_err(MguError::Grad)?;
        // Keep only pixels still predicted as the adversarial class.
        let mg = model.build_graph(remaining.clone());
        let values = forward(&mg.graph, &model.bindings(&mg, &image))?;
        let s = values[mg.softmax].data();
        let still_active: Vec<(usize, usize)> = remaining
            .iter()
            .enumerate()
            .filter(|(row, _)| {
                let sr = &s[row * n..(row + 1) * n];
                let argmax = sr
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap();
                argmax == y_adv
            })
            .map(|(_, &p)| p)
            .collect();
        remaining = still_active;
        if remaining.is_empty() {
            termination = Termination::EmptySet;
            break;
        }

        // Loss and input gradient over the active set.
        let mg = model.build_graph(remaining.clone());
        let mut g = mg.graph.clone();
        let col = g.op(Op::PickColumn { x: mg.softmax, class: y_adv });
        let loss = g.op(Op::MaskedMean { x: col, mask: vec![true; remaining.len()] });
        let values = forward(&g, &model.bindings(&mg, &image))?;
        let bundle = backward(&g, &values, loss)?;
        let grad = bundle.input_grads.get(&mg.image).expect("image gradient").data();

        active_counts.push(remaining.len());
        losses.push(values[loss].as_scalar().expect("scalar loss"));
        iterations += 1;

        for &(py, px) in &remaining {
            for chan in 0..model.feature_channels {
                let idx = chan * hw + py * w + px;
                let updated = features[idx] - cfg.step_size * grad[idx];
                features[idx] = updated.clamp(cfg.clip_lo, cfg.clip_hi);
            }
        }
    }

    let mut out = scene.clone();
    out.features = Tensor::new(vec![model.feature_channels, h, w], features)
        .map_err(MguError::Grad)?;
    for &(py, px) in &target {
        out.labels[py * w + px] = ANOMALY_SENTINEL;
        out.role[py * w + px] = Role::SynthUnknown;
    }
    let trace = MguTrace { iterations, active_counts, losses, termination };
    Ok((out, trace))
}

/// Build the auxiliary set: for each class, pick `per_class_budget` training
/// scenes containing that class (round-robin over the sorted candidate list
/// from a seeded start offset) and run MGU with that class as adversarial.
///
/// Classes absent from the whole corpus are skipped with a warning string.
pub fn build_auxiliary_set(
    model: &SegModel,
    train_scenes: &[Scene],
    cfg: &MguConfig,
) -> Result<(Vec<AuxScene>, Vec<String>), MguError> {
    cfg.validate()?;
    if cfg.per_class_budget == 0 {
        return Err(MguError::BadConfig("per_class_budget must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aux = Vec::new();
    let mut warnings = Vec::new();
    for class in 0..model.num_classes {
        let candidates: Vec<usize> = train_scenes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.labels.contains(&(class as u16)))
            .map(|(i, _)| i)
            .collect();
        if candidates.is_empty() {
            warnings.push(format!("class {class} absent from the training corpus; skipped"));
            continue;
        }
        let start = rng.gen_range(0..candidates.len());
        for j in 0..cfg.per_class_budget.min(candidates.len()) {
            let source_index = candidates[(start + j) % candidates.len()];
            let (scene, trace) =
                masked_gradient_update(model, &train_scenes[source_index], class, cfg)?;
            aux.push(AuxScene { scene, trace, adversarial_class: class, source_index });
        }
    }
    Ok((aux, warnings))
}
