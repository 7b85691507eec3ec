//! Threshold-free anomaly metrics over pooled pixel scores, the threshold
//! sweep, and the selection-bias pilot harness.
//!
//! Unknown pixels are the positive class throughout. Equal scores form a
//! single threshold group in every metric.

mod pilot;

pub use pilot::{pilot_study, PilotRow, PilotTable, PilotTrainConfig};

use thiserror::Error;

use crate::scenes::{Role, Scene};
use crate::segmodel::{msp_score, softmax_map, SegError, SegModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores and truth have different lengths ({scores} vs {truth})")]
    LengthMismatch { scores: usize, truth: usize },
    #[error("no positive samples")]
    NoPositives,
    #[error("no negative samples")]
    NoNegatives,
    #[error("target TPR {0} outside (0, 1]")]
    BadTargetTpr(f64),
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("delta grid must be non-empty, strictly increasing, within [0, 1]")]
    BadDeltaGrid,
    #[error("test scenes contain no UNKNOWN pixels")]
    NoUnknownPixels,
    #[error(transparent)]
    Model(#[from] SegError),
}

/// Pooled anomaly scores with ground truth; `true` marks an unknown pixel.
#[derive(Debug, Clone)]
pub struct ScoredPixels {
    pub scores: Vec<f64>,
    pub truth: Vec<bool>,
}

impl ScoredPixels {
    pub fn new(scores: Vec<f64>, truth: Vec<bool>) -> Result<Self, EvalError> {
        if scores.len() != truth.len() {
            return Err(EvalError::LengthMismatch { scores: scores.len(), truth: truth.len() });
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(EvalError::NonFiniteScore(i));
        }
        Ok(ScoredPixels { scores, truth })
    }

    pub fn positives(&self) -> usize {
        self.truth.iter().filter(|&&t| t).count()
    }

    pub fn negatives(&self) -> usize {
        self.truth.len() - self.positives()
    }
}

/// One evaluation run's metric suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub aupr: f64,
    pub auroc: f64,
    pub fpr95: f64,
    /// Positive rate: the AUPR of a random scorer.
    pub aupr_random_guess: f64,
}

impl MetricReport {
    /// CSV with header `metric,value`.
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\naupr,{}\nauroc,{}\nfpr95,{}\naupr_random_guess,{}\n",
            self.aupr, self.auroc, self.fpr95, self.aupr_random_guess
        )
    }
}

/// Probability that a positive outscores a negative, ties counted 0.5.
/// Computed from average ranks; equal to exhaustive pairwise counting.
pub fn auroc(sp: &ScoredPixels) -> Result<f64, EvalError> {
    let p = sp.positives();
    let n = sp.negatives();
    if p == 0 {
        return Err(EvalError::NoPositives);
    }
    if n == 0 {
        return Err(EvalError::NoNegatives);
    }
    let mut order: Vec<usize> = (0..sp.scores.len()).collect();
    order.sort_by(|&a, &b| sp.scores[a].partial_cmp(&sp.scores[b]).unwrap());

    // Rank sum of positives with average ranks over tie groups (1-based).
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && sp.scores[order[j]] == sp.scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if sp.truth[idx] {
                rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let p = p as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n as f64))
}

/// Average precision with step integration; equal scores form one
/// threshold group.
pub fn aupr(sp: &ScoredPixels) -> Result<f64, EvalError> {
    let total_pos = sp.positives();
    if total_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..sp.scores.len()).collect();
    order.sort_by(|&a, &b| sp.scores[b].partial_cmp(&sp.scores[a]).unwrap());

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_tp = 0usize;
        while j < order.len() && sp.scores[order[j]] == sp.scores[order[i]] {
            if sp.truth[order[j]] {
                group_tp += 1;
            }
            j += 1;
        }
        tp += group_tp;
        let precision = tp as f64 / j as f64;
        let recall_delta = group_tp as f64 / total_pos as f64;
        ap += precision * recall_delta;
        i = j;
    }
    Ok(ap)
}

/// False positive rate at the largest threshold reaching the target TPR,
/// with `score >= threshold` predicting positive.
pub fn fpr_at_tpr(sp: &ScoredPixels, target_tpr: f64) -> Result<f64, EvalError> {
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(EvalError::BadTargetTpr(target_tpr));
    }
    let total_pos = sp.positives();
    let total_neg = sp.negatives();
    if total_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    if total_neg == 0 {
        return Err(EvalError::NoNegatives);
    }
    let mut order: Vec<usize> = (0..sp.scores.len()).collect();
    order.sort_by(|&a, &b| sp.scores[b].partial_cmp(&sp.scores[a]).unwrap());

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && sp.scores[order[j]] == sp.scores[order[i]] {
            if sp.truth[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        if tp as f64 / total_pos as f64 >= target_tpr {
            return Ok(fp as f64 / total_neg as f64);
        }
        i = j;
    }
    // target_tpr <= 1 guarantees the loop returns once every positive is in.
    unreachable!("TPR reaches 1.0 at the lowest threshold")
}

/// Pool `1 − MSP` scores over every test pixel; unknown pixels positive.
pub fn score_scenes(model: &SegModel, scenes: &[Scene]) -> Result<ScoredPixels, EvalError> {
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for scene in scenes {
        let softmax = softmax_map(&model.predict_logits(&scene.features)?);
        let msp = msp_score(&softmax);
        for (i, &role) in scene.role.iter().enumerate() {
            scores.push(1.0 - msp.values[i]);
            truth.push(role == Role::Unknown);
        }
    }
    ScoredPixels::new(scores, truth)
}

/// Full metric suite over pooled test pixels.
pub fn evaluate_anomaly(model: &SegModel, test_scenes: &[Scene]) -> Result<MetricReport, EvalError> {
    let sp = score_scenes(model, test_scenes)?;
    if sp.positives() == 0 {
        return Err(EvalError::NoUnknownPixels);
    }
    Ok(MetricReport {
        aupr: aupr(&sp)?,
        auroc: auroc(&sp)?,
        fpr95: fpr_at_tpr(&sp, 0.95)?,
        aupr_random_guess: sp.positives() as f64 / sp.truth.len() as f64,
    })
}

/// Semantic accuracy on known pixels and anomaly accuracy on unknown pixels
/// as functions of the decision threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCurve {
    /// (delta, semantic_accuracy_on_known, anomaly_accuracy_on_unknown).
    pub points: Vec<(f64, f64, f64)>,
}

impl SweepCurve {
    /// CSV with columns `delta,semantic_acc,anomaly_acc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,semantic_acc,anomaly_acc\n");
        for &(d, s, a) in &self.points {
            out.push_str(&format!("{d},{s},{a}\n"));
        }
        out
    }
}

pub fn threshold_sweep(
    model: &SegModel,
    test_scenes: &[Scene],
    deltas: &[f64],
) -> Result<SweepCurve, EvalError> {
    if deltas.is_empty()
        || deltas.windows(2).any(|p| p[0] >= p[1])
        || deltas.iter().any(|d| !(0.0..=1.0).contains(d))
    {
        return Err(EvalError::BadDeltaGrid);
    }
    // Per pixel: MSP, whether the argmax matches the label, and the role.
    struct Pixel {
        msp: f64,
        argmax_correct: bool,
        unknown: bool,
    }
    let mut pixels = Vec::new();
    for scene in test_scenes {
        let softmax = softmax_map(&model.predict_logits(&scene.features)?);
        let (n, hw) = (model.num_classes, scene.height() * scene.width());
        let data = softmax.data();
        for i in 0..hw {
            let mut best = 0;
            let mut best_val = data[i];
            for c in 1..n {
                let v = data[c * hw + i];
                if v > best_val {
                    best_val = v;
                    best = c;
                }
            }
            pixels.push(Pixel {
                msp: best_val,
                argmax_correct: scene.labels[i] as usize == best,
                unknown: scene.role[i] == Role::Unknown,
            });
        }
    }
    let known_total = pixels.iter().filter(|p| !p.unknown).count().max(1);
    let unknown_total = pixels.iter().filter(|p| p.unknown).count().max(1);
    let points = deltas
        .iter()
        .map(|&delta| {
            let mut semantic = 0usize;
            let mut anomaly = 0usize;
            for p in &pixels {
                if p.unknown {
                    if p.msp <= delta {
                        anomaly += 1;
                    }
                } else if p.msp > delta && p.argmax_correct {
                    semantic += 1;
                }
            }
            (delta, semantic as f64 / known_total as f64, anomaly as f64 / unknown_total as f64)
        })
        .collect();
    Ok(SweepCurve { points })
}
