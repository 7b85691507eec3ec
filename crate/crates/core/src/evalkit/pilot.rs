//! Selection-bias pilot: hold out each class subset in turn as the
//! known-unknown set, train a fresh model on the remaining classes with the
//! combined objective, and measure how strongly the metric scores depend on
//! which subset was chosen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aaft::{combined_objective, LossConfig, PixelRef, UnknownLoss};
use crate::gradcore::Tensor;
use crate::scenes::{relabel_as_known_unknown, Corpus, Role, SubsetPartition, ANOMALY_SENTINEL};
use crate::segmodel::{msp_score, softmax_map, SegModel};

use super::{aupr, auroc, fpr_at_tpr, EvalError, MetricReport, ScoredPixels};

#[derive(Debug, Clone)]
pub struct PilotTrainConfig {
    pub patch_radius: usize,
    pub layer_dims: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for PilotTrainConfig {
    fn default() -> Self {
        PilotTrainConfig {
            patch_radius: 1,
            layer_dims: vec![32, 32],
            epochs: 6,
            lr: 0.5,
            batch: 64,
            alpha: 0.05,
            seed: 0,
        }
    }
}

/// One subset's result; `report` is `None` when training failed.
#[derive(Debug, Clone)]
pub struct PilotRow {
    pub subset: Vec<usize>,
    /// Metrics with the subset's own pixels as positives.
    pub report: Option<MetricReport>,
    /// Metrics with the held-out true anomaly regions as positives.
    pub true_anomaly_report: Option<MetricReport>,
}

#[derive(Debug, Clone)]
pub struct PilotTable {
    pub rows: Vec<PilotRow>,
}

impl PilotTable {
    fn successful(&self) -> Vec<&MetricReport> {
        self.rows.iter().filter_map(|r| r.report.as_ref()).collect()
    }

    /// Arithmetic mean of the successful subset rows.
    pub fn sub_average(&self) -> Option<MetricReport> {
        let ok = self.successful();
        if ok.is_empty() {
            return None;
        }
        let k = ok.len() as f64;
        Some(MetricReport {
            aupr: ok.iter().map(|r| r.aupr).sum::<f64>() / k,
            auroc: ok.iter().map(|r| r.auroc).sum::<f64>() / k,
            fpr95: ok.iter().map(|r| r.fpr95).sum::<f64>() / k,
            aupr_random_guess: ok.iter().map(|r| r.aupr_random_guess).sum::<f64>() / k,
        })
    }

    /// Max − min per metric over successful subset rows.
    pub fn spread(&self) -> Option<MetricReport> {
        let ok = self.successful();
        if ok.is_empty() {
            return None;
        }
        let span = |f: fn(&MetricReport) -> f64| {
            let lo = ok.iter().map(|r| f(r)).fold(f64::INFINITY, f64::min);
            let hi = ok.iter().map(|r| f(r)).fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        };
        Some(MetricReport {
            aupr: span(|r| r.aupr),
            auroc: span(|r| r.auroc),
            fpr95: span(|r| r.fpr95),
            aupr_random_guess: span(|r| r.aupr_random_guess),
        })
    }

    /// CSV: one row per subset, an `average` row, a `spread` row (per-metric
    /// max − min in the metric columns), then one `<i>-true` row per subset
    /// for the true-anomaly evaluation. Failed subsets carry `failed`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,aupr,auroc,fpr95,aupr_random_guess\n");
        let fmt = |name: &str, r: &Option<MetricReport>| match r {
            Some(r) => format!(
                "{name},{},{},{},{}\n",
                r.aupr, r.auroc, r.fpr95, r.aupr_random_guess
            ),
            None => format!("{name},failed,failed,failed,failed\n"),
        };
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&fmt(&i.to_string(), &row.report));
        }
        out.push_str(&fmt("average", &self.sub_average()));
        out.push_str(&fmt("spread", &self.spread()));
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&fmt(&format!("{i}-true"), &row.true_anomaly_report));
        }
        out
    }
}

/// Run the pilot over every subset of the partition.
pub fn pilot_study(
    corpus: &Corpus,
    partition: &SubsetPartition,
    cfg: &PilotTrainConfig,
) -> Result<PilotTable, EvalError> {
    let mut rows = Vec::new();
    for subset in &partition.subsets {
        let row = run_subset(corpus, subset, cfg);
        rows.push(match row {
            Ok((report, true_report)) => PilotRow {
                subset: subset.clone(),
                report: Some(report),
                true_anomaly_report: Some(true_report),
            },
            Err(_) => PilotRow { subset: subset.clone(), report: None, true_anomaly_report: None },
        });
    }
    Ok(PilotTable { rows })
}

fn run_subset(
    corpus: &Corpus,
    subset: &[usize],
    cfg: &PilotTrainConfig,
) -> Result<(MetricReport, MetricReport), EvalError> {
    let (mut train, index_map) = relabel_as_known_unknown(&corpus.train, subset)
        .map_err(|_| EvalError::NoUnknownPixels)?;
    // The relabeled pixels are known-unknowns used for training, not
    // evaluation targets; give them the synthetic-unknown role so the
    // combined objective applies the unknown loss to them.
    for scene in &mut train {
        for role in scene.role.iter_mut() {
            if *role == Role::Unknown {
                *role = Role::SynthUnknown;
            }
        }
    }
    let remaining = index_map.new_to_old.len();
    let channels = corpus.train[0].channels();
    let model = SegModel::init(
        remaining,
        channels,
        cfg.patch_radius,
        cfg.layer_dims.clone(),
        cfg.seed ^ subset.iter().fold(0u64, |acc, &c| acc.rotate_left(7) ^ c as u64),
    );

    // Train from scratch with the combined objective.
    let loss_cfg = LossConfig {
        alpha: cfg.alpha,
        unknown_loss: UnknownLoss::Kl,
        regularizer: crate::aaft::default_regularizer(remaining.max(2)),
    };
    let mut pool: Vec<PixelRef> = Vec::new();
    for (si, scene) in train.iter().enumerate() {
        for (pi, &role) in scene.role.iter().enumerate() {
            if role != Role::Unknown {
                pool.push(PixelRef { scene: si, pixel: pi });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = model;
    for _ in 0..cfg.epochs {
        pool.shuffle(&mut rng);
        for chunk in pool.chunks(cfg.batch.max(1)) {
            let (_, grad) =
                combined_objective(&current, &train, chunk, &loss_cfg).map_err(|_| {
                    EvalError::NoUnknownPixels
                })?;
            let mut params = current.params.data().to_vec();
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= cfg.lr * g;
            }
            current = current
                .with_params(Tensor::new(vec![params.len()], params).map_err(|_| {
                    EvalError::NoUnknownPixels
                })?)
                .map_err(EvalError::Model)?;
        }
    }

    // Score the original test scenes; split pixels three ways.
    let mut subset_scores = Vec::new();
    let mut subset_truth = Vec::new();
    let mut true_scores = Vec::new();
    let mut true_truth = Vec::new();
    let in_subset = |label: u16| subset.contains(&(label as usize));
    for scene in &corpus.test {
        let softmax = softmax_map(&current.predict_logits(&scene.features)?);
        let msp = msp_score(&softmax);
        for (i, &label) in scene.labels.iter().enumerate() {
            let score = 1.0 - msp.values[i];
            if label == ANOMALY_SENTINEL {
                // True anomaly: positive for the second evaluation only.
                true_scores.push(score);
                true_truth.push(true);
            } else if in_subset(label) {
                subset_scores.push(score);
                subset_truth.push(true);
            } else {
                subset_scores.push(score);
                subset_truth.push(false);
                true_scores.push(score);
                true_truth.push(false);
            }
        }
    }
    let report = metrics_from(ScoredPixels::new(subset_scores, subset_truth)?)?;
    let true_report = metrics_from(ScoredPixels::new(true_scores, true_truth)?)?;
    Ok((report, true_report))
}

fn metrics_from(sp: ScoredPixels) -> Result<MetricReport, EvalError> {
    Ok(MetricReport {
        aupr: aupr(&sp)?,
        auroc: auroc(&sp)?,
        fpr95: fpr_at_tpr(&sp, 0.95)?,
        aupr_random_guess: sp.positives() as f64 / sp.truth.len() as f64,
    })
}
