//! Anomaly-aware fine-tuning.
//!
//! Known pixels keep the supervised cross-entropy objective; synthetic-unknown
//! pixels are pushed toward a uniform output distribution, either by the
//! KL-to-uniform loss or by the entropy ratio loss. The combined objective is
//! `mean L_k over known + alpha * mean unknown-loss over synthetic-unknown`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gradcore::{backward, forward, GradError, Op, PROB_FLOOR};
use crate::scenes::{Role, Scene};
use crate::segmodel::{SegError, SegModel};
use crate::Tensor;

#[derive(Debug, Error)]
pub enum AaftError {
    #[error("invalid loss config: {0}")]
    BadConfig(String),
    #[error("batch contains neither KNOWN nor SYNTH_UNKNOWN pixels")]
    EmptyBatch,
    #[error("batch contains a true-unknown pixel; only KNOWN and SYNTH_UNKNOWN are allowed")]
    UnknownRoleInBatch,
    #[error("auxiliary set is empty; fine-tuning would degenerate to plain training")]
    EmptyAuxiliarySet,
    #[error("fine-tuning did not reduce the mean unknown loss ({before} -> {after})")]
    NoUnknownImprovement { before: f64, after: f64 },
    #[error(transparent)]
    Model(#[from] SegError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Which loss drives synthetic-unknown pixels toward uniform output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownLoss {
    Kl,
    EntropyRatio,
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub alpha: f64,
    pub unknown_loss: UnknownLoss,
    /// Regularizer of the entropy ratio loss; see [`default_regularizer`].
    pub regularizer: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), AaftError> {
        if self.alpha < 0.0 {
            return Err(AaftError::BadConfig("alpha must be non-negative".into()));
        }
        if !(self.regularizer > 0.0) {
            return Err(AaftError::BadConfig("regularizer must be positive".into()));
        }
        Ok(())
    }
}

/// `(-sum z log z) * 0.01 = ln(N) / 100` with z = 1/N.
pub fn default_regularizer(num_classes: usize) -> f64 {
    assert!(num_classes >= 2);
    (num_classes as f64).ln() * 0.01
}

/// KL(U‖S) = −Σ_i z·log(S_i/z), z = 1/N. Zero iff S is uniform.
pub fn kl_uniform_loss(softmax_row: &[f64]) -> f64 {
    let z = 1.0 / softmax_row.len() as f64;
    softmax_row.iter().map(|&s| -z * (s.max(PROB_FLOOR) / z).ln()).sum()
}

/// (H_u + r) / (H(S) + r) − 1 with H_u = ln N. Zero iff S is uniform,
/// strictly decreasing in the entropy of S.
pub fn entropy_ratio_loss(softmax_row: &[f64], regularizer: f64) -> f64 {
    assert!(regularizer > 0.0);
    let h_uniform = (softmax_row.len() as f64).ln();
    let h: f64 = softmax_row.iter().map(|&s| -s * s.max(PROB_FLOOR).ln()).sum();
    (h_uniform + regularizer) / (h + regularizer) - 1.0
}

/// One pixel of one scene, by flat pixel index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRef {
    pub scene: usize,
    pub pixel: usize,
}

/// Per-epoch fine-tuning diagnostics. Vector lengths equal `epochs_run`.
#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub epochs_run: usize,
    pub mean_known_loss: Vec<f64>,
    pub mean_unknown_loss: Vec<f64>,
    /// Values before the first update.
    pub initial_known_loss: f64,
    pub initial_unknown_loss: f64,
}

impl FinetuneReport {
    /// CSV with columns `epoch,mean_Lk,mean_unknown_loss`; epoch 0 holds the
    /// pre-update values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_Lk,mean_unknown_loss\n");
        out.push_str(&format!("0,{},{}\n", self.initial_known_loss, self.initial_unknown_loss));
        for e in 0..self.epochs_run {
            out.push_str(&format!(
                "{},{},{}\n",
                e + 1,
                self.mean_known_loss[e],
                self.mean_unknown_loss[e]
            ));
        }
        out
    }
}

/// Combined objective value and flat parameter gradient over a mixed batch.
///
/// Gradients flow to model parameters only; inputs are fixed in this phase.
pub fn combined_objective(
    model: &SegModel,
    scenes: &[Scene],
    batch: &[PixelRef],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>), AaftError> {
    cfg.validate()?;
    let mut n_known = 0usize;
    let mut n_synth = 0usize;
    for p in batch {
        match scenes[p.scene].role[p.pixel] {
            Role::Known => n_known += 1,
            Role::SynthUnknown => n_synth += 1,
            Role::Unknown => return Err(AaftError::UnknownRoleInBatch),
        }
    }
    if n_known == 0 && n_synth == 0 {
        return Err(AaftError::EmptyBatch);
    }

    // Group by scene; each group runs one forward/backward.
    let mut by_scene: Vec<(usize, Vec<usize>)> = Vec::new();
    for p in batch {
        match by_scene.last_mut() {
            Some((s, pixels)) if *s == p.scene => pixels.push(p.pixel),
            _ => match by_scene.iter_mut().find(|(s, _)| *s == p.scene) {
                Some((_, pixels)) => pixels.push(p.pixel),
                None => by_scene.push((p.scene, vec![p.pixel])),
            },
        }
    }

    let mut total = 0.0;
    let mut grad = vec![0.0; model.param_count()];
    for (scene_idx, pixels) in by_scene {
        let scene = &scenes[scene_idx];
        let w = scene.width();
        let centers: Vec<(usize, usize)> = pixels.iter().map(|&i| (i / w, i % w)).collect();
        let known_mask: Vec<bool> =
            pixels.iter().map(|&i| scene.role[i] == Role::Known).collect();
        let synth_mask: Vec<bool> = known_mask.iter().map(|&k| !k).collect();
        let labels: Vec<usize> = pixels
            .iter()
            .map(|&i| if scene.role[i] == Role::Known { scene.labels[i] as usize } else { 0 })
            .collect();

        let mg = model.build_graph(centers);
        let mut g = mg.graph.clone();
        let mut terms = Vec::new();
        if known_mask.iter().any(|&b| b) {
            let nll = g.op(Op::NegLogPick { x: mg.softmax, labels });
            let sum = g.op(Op::MaskedSum { x: nll, mask: known_mask });
            terms.push(g.op(Op::Scale(sum, 1.0 / n_known as f64)));
        }
        if synth_mask.iter().any(|&b| b) {
            let per_row = match cfg.unknown_loss {
                UnknownLoss::Kl => g.op(Op::RowKlUniform(mg.softmax)),
                UnknownLoss::EntropyRatio => {
                    g.op(Op::RowEntropyRatio { x: mg.softmax, reg: cfg.regularizer })
                }
            };
            let sum = g.op(Op::MaskedSum { x: per_row, mask: synth_mask });
            terms.push(g.op(Op::Scale(sum, cfg.alpha / n_synth as f64)));
        }
        let loss = match terms.len() {
            1 => terms[0],
            _ => g.op(Op::Add(terms[0], terms[1])),
        };
        let values = forward(&g, &model.bindings(&mg, &scene.features))?;
        total += values[loss].as_scalar().expect("scalar loss");
        let bundle = backward(&g, &values, loss)?;
        for (acc, d) in grad.iter_mut().zip(model.flat_param_grad(&mg, &bundle)) {
            *acc += d;
        }
    }
    Ok((total, grad))
}

/// Mean known cross-entropy and mean unknown loss over all eligible pixels.
pub fn corpus_losses(
    model: &SegModel,
    scenes: &[Scene],
    cfg: &LossConfig,
) -> Result<(f64, f64), AaftError> {
    let mut known_sum = 0.0;
    let mut known_count = 0usize;
    let mut synth_sum = 0.0;
    let mut synth_count = 0usize;
    for scene in scenes {
        let pixels: Vec<usize> = (0..scene.labels.len())
            .filter(|&i| scene.role[i] != Role::Unknown)
            .collect();
        if pixels.is_empty() {
            continue;
        }
        let w = scene.width();
        let centers: Vec<(usize, usize)> = pixels.iter().map(|&i| (i / w, i % w)).collect();
        let mg = model.build_graph(centers);
        let values = forward(&mg.graph, &model.bindings(&mg, &scene.features))?;
        let s = values[mg.softmax].data();
        let n = model.num_classes;
        for (row, &i) in pixels.iter().enumerate() {
            let sr = &s[row * n..(row + 1) * n];
            if scene.role[i] == Role::Known {
                known_sum += -(sr[scene.labels[i] as usize].max(PROB_FLOOR)).ln();
                known_count += 1;
            } else {
                synth_sum += match cfg.unknown_loss {
                    UnknownLoss::Kl => kl_uniform_loss(sr),
                    UnknownLoss::EntropyRatio => entropy_ratio_loss(sr, cfg.regularizer),
                };
                synth_count += 1;
            }
        }
    }
    let known = if known_count > 0 { known_sum / known_count as f64 } else { 0.0 };
    let synth = if synth_count > 0 { synth_sum / synth_count as f64 } else { 0.0 };
    Ok((known, synth))
}

/// Fine-tune a pre-trained model on the union of training and auxiliary
/// scenes. Batches draw known and synthetic-unknown pixels in proportion to
/// their corpus frequency (global shuffle). Deterministic per seed.
pub fn finetune(
    model: &SegModel,
    scenes: &[Scene],
    cfg: &LossConfig,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<(SegModel, FinetuneReport), AaftError> {
    cfg.validate()?;
    let mut pool: Vec<PixelRef> = Vec::new();
    let mut synth_total = 0usize;
    for (si, scene) in scenes.iter().enumerate() {
        for (pi, &role) in scene.role.iter().enumerate() {
            match role {
                Role::Known => pool.push(PixelRef { scene: si, pixel: pi }),
                Role::SynthUnknown => {
                    pool.push(PixelRef { scene: si, pixel: pi });
                    synth_total += 1;
                }
                Role::Unknown => {}
            }
        }
    }
    if synth_total == 0 {
        return Err(AaftError::EmptyAuxiliarySet);
    }

    let (initial_known, initial_unknown) = corpus_losses(model, scenes, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = model.clone();
    let mut mean_known_loss = Vec::with_capacity(epochs);
    let mut mean_unknown_loss = Vec::with_capacity(epochs);

    for _ in 0..epochs {
        pool.shuffle(&mut rng);
        for chunk in pool.chunks(batch.max(1)) {
            let (_, grad) = combined_objective(&current, scenes, chunk, cfg)?;
            let mut params = current.params.data().to_vec();
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= lr * g;
            }
            current = current.with_params(
                Tensor::new(vec![params.len()], params).map_err(AaftError::Grad)?,
            )?;
        }
        let (k, u) = corpus_losses(&current, scenes, cfg)?;
        mean_known_loss.push(k);
        mean_unknown_loss.push(u);
    }

    if epochs > 0 {
        let after = *mean_unknown_loss.last().unwrap();
        if cfg.alpha > 0.0 && after >= initial_unknown {
            return Err(AaftError::NoUnknownImprovement { before: initial_unknown, after });
        }
    }

    let report = FinetuneReport {
        epochs_run: epochs,
        mean_known_loss,
        mean_unknown_loss,
        initial_known_loss: initial_known,
        initial_unknown_loss: initial_unknown,
    };
    Ok((current, report))
}
