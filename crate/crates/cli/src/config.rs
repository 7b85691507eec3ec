//! Flat sectioned `key = value` run configuration.
//!
//! Every key has a default, so an empty file is a valid config; unknown
//! sections or keys are usage errors so typos never silently fall back to
//! defaults.

use std::fmt;
use std::path::Path;

use aseg_core::aaft::{default_regularizer, LossConfig, UnknownLoss};
use aseg_core::mgu::MguConfig;
use aseg_core::scenes::{ClassLayout, CorpusConfig};

#[derive(Debug)]
pub struct ConfigError {
    pub detail: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.detail)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(detail: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError { detail: detail.into() })
}

#[derive(Debug, Clone)]
pub struct CorpusBlock {
    pub layout: ClassLayout,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub anomaly_fraction_lo: f64,
    pub anomaly_fraction_hi: f64,
}

#[derive(Debug, Clone)]
pub struct ModelBlock {
    pub patch_radius: usize,
    pub layer_dims: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainBlock {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Debug, Clone)]
pub struct MguBlock {
    pub step_size: f64,
    pub max_iters: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub per_class_budget: usize,
}

#[derive(Debug, Clone)]
pub struct AaftBlock {
    pub alpha: f64,
    pub loss: UnknownLoss,
    /// `None` means ln(N) * 0.01.
    pub regularizer: Option<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointChoice {
    Pretrained,
    Finetuned,
}

#[derive(Debug, Clone)]
pub struct EvalBlock {
    pub delta_steps: usize,
    pub target_tpr: f64,
    pub checkpoint: CheckpointChoice,
}

#[derive(Debug, Clone)]
pub struct PilotBlock {
    pub subsets: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckBlock {
    pub graphs: usize,
    pub tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusBlock,
    pub model: ModelBlock,
    pub pretrain: TrainBlock,
    pub mgu: MguBlock,
    pub aaft: AaftBlock,
    pub eval: EvalBlock,
    pub pilot: PilotBlock,
    pub gradcheck: GradcheckBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: CorpusBlock {
                layout: ClassLayout::Grid,
                num_classes: 12,
                height: 32,
                width: 32,
                noise_sigma: 0.05,
                train_scenes: 200,
                val_scenes: 20,
                test_scenes: 50,
                anomaly_fraction_lo: 0.013,
                anomaly_fraction_hi: 0.027,
            },
            model: ModelBlock { patch_radius: 1, layer_dims: vec![32, 32] },
            pretrain: TrainBlock { epochs: 4, lr: 0.2, batch: 128 },
            mgu: MguBlock {
                step_size: 1.5,
                max_iters: 200,
                clip_lo: -1.0,
                clip_hi: 2.0,
                per_class_budget: 10,
            },
            aaft: AaftBlock {
                alpha: 0.05,
                loss: UnknownLoss::EntropyRatio,
                regularizer: None,
                epochs: 4,
                lr: 0.05,
                batch: 128,
            },
            eval: EvalBlock {
                delta_steps: 21,
                target_tpr: 0.95,
                checkpoint: CheckpointChoice::Finetuned,
            },
            pilot: PilotBlock { subsets: 4, epochs: 4, lr: 0.2, batch: 128, alpha: 0.05 },
            gradcheck: GradcheckBlock { graphs: 120, tolerance: 1e-4 },
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { detail: format!("cannot read {}: {e}", path.display()) })?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = match line.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                None => return err(format!("line {}: expected `key = value`", ln + 1)),
            };
            cfg.apply(&section, key, value)
                .map_err(|e| ConfigError { detail: format!("line {}: {}", ln + 1, e.detail) })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        match (section, key) {
            ("", "seed") => self.seed = parse(value)?,
            ("corpus", "layout") => {
                self.corpus.layout = match value {
                    "grid" => ClassLayout::Grid,
                    "simplex" => ClassLayout::Simplex,
                    other => return err(format!("unknown layout `{other}`")),
                }
            }
            ("corpus", "num_classes") => self.corpus.num_classes = parse(value)?,
            ("corpus", "height") => self.corpus.height = parse(value)?,
            ("corpus", "width") => self.corpus.width = parse(value)?,
            ("corpus", "noise_sigma") => self.corpus.noise_sigma = parse(value)?,
            ("corpus", "train_scenes") => self.corpus.train_scenes = parse(value)?,
            ("corpus", "val_scenes") => self.corpus.val_scenes = parse(value)?,
            ("corpus", "test_scenes") => self.corpus.test_scenes = parse(value)?,
            ("corpus", "anomaly_fraction_lo") => self.corpus.anomaly_fraction_lo = parse(value)?,
            ("corpus", "anomaly_fraction_hi") => self.corpus.anomaly_fraction_hi = parse(value)?,
            ("model", "patch_radius") => self.model.patch_radius = parse(value)?,
            ("model", "layer_dims") => {
                self.model.layer_dims = value
                    .split(',')
                    .map(|v| parse(v.trim()))
                    .collect::<Result<Vec<usize>, _>>()?;
            }
            ("pretrain", "epochs") => self.pretrain.epochs = parse(value)?,
            ("pretrain", "lr") => self.pretrain.lr = parse(value)?,
            ("pretrain", "batch") => self.pretrain.batch = parse(value)?,
            ("mgu", "step_size") => self.mgu.step_size = parse(value)?,
            ("mgu", "max_iters") => self.mgu.max_iters = parse(value)?,
            ("mgu", "clip_lo") => self.mgu.clip_lo = parse(value)?,
            ("mgu", "clip_hi") => self.mgu.clip_hi = parse(value)?,
            ("mgu", "per_class_budget") => self.mgu.per_class_budget = parse(value)?,
            ("aaft", "alpha") => self.aaft.alpha = parse(value)?,
            ("aaft", "loss") => {
                self.aaft.loss = match value {
                    "kl" => UnknownLoss::Kl,
                    "er" => UnknownLoss::EntropyRatio,
                    other => return err(format!("unknown loss `{other}` (want kl or er)")),
                }
            }
            ("aaft", "regularizer") => self.aaft.regularizer = Some(parse(value)?),
            ("aaft", "epochs") => self.aaft.epochs = parse(value)?,
            ("aaft", "lr") => self.aaft.lr = parse(value)?,
            ("aaft", "batch") => self.aaft.batch = parse(value)?,
            ("eval", "delta_steps") => self.eval.delta_steps = parse(value)?,
            ("eval", "target_tpr") => self.eval.target_tpr = parse(value)?,
            ("eval", "checkpoint") => {
                self.eval.checkpoint = match value {
                    "pretrained" => CheckpointChoice::Pretrained,
                    "finetuned" => CheckpointChoice::Finetuned,
                    other => return err(format!("unknown checkpoint `{other}`")),
                }
            }
            ("pilot", "subsets") => self.pilot.subsets = parse(value)?,
            ("pilot", "epochs") => self.pilot.epochs = parse(value)?,
            ("pilot", "lr") => self.pilot.lr = parse(value)?,
            ("pilot", "batch") => self.pilot.batch = parse(value)?,
            ("pilot", "alpha") => self.pilot.alpha = parse(value)?,
            ("gradcheck", "graphs") => self.gradcheck.graphs = parse(value)?,
            ("gradcheck", "tolerance") => self.gradcheck.tolerance = parse(value)?,
            _ => return err(format!("unknown key `{key}` in section `[{section}]`")),
        }
        Ok(())
    }

    /// Validate every block against its module's preconditions before any
    /// stage does work.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.corpus_config().validate().map_err(|e| ConfigError { detail: e.to_string() })?;
        self.mgu_config().validate().map_err(|e| ConfigError { detail: e.to_string() })?;
        self.loss_config().validate().map_err(|e| ConfigError { detail: e.to_string() })?;
        if self.pretrain.batch == 0 || self.aaft.batch == 0 || self.pilot.batch == 0 {
            return err("batch sizes must be positive");
        }
        if !(self.pretrain.lr > 0.0 && self.aaft.lr > 0.0 && self.pilot.lr > 0.0) {
            return err("learning rates must be positive");
        }
        if self.eval.delta_steps < 2 {
            return err("eval.delta_steps must be at least 2");
        }
        if !(self.eval.target_tpr > 0.0 && self.eval.target_tpr <= 1.0) {
            return err("eval.target_tpr must lie in (0, 1]");
        }
        if self.pilot.subsets < 2 || self.pilot.subsets > self.corpus.num_classes {
            return err("pilot.subsets must lie in [2, num_classes]");
        }
        if self.gradcheck.tolerance <= 0.0 {
            return err("gradcheck.tolerance must be positive");
        }
        Ok(())
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        let b = &self.corpus;
        let mut cfg = match b.layout {
            ClassLayout::Grid => CorpusConfig::grid_layout(b.num_classes, self.seed),
            ClassLayout::Simplex => CorpusConfig::simplex_layout(b.num_classes, self.seed),
        };
        cfg.height = b.height;
        cfg.width = b.width;
        cfg.noise_sigma = b.noise_sigma;
        cfg.train_scenes = b.train_scenes;
        cfg.val_scenes = b.val_scenes;
        cfg.test_scenes = b.test_scenes;
        cfg.anomaly_fraction = (b.anomaly_fraction_lo, b.anomaly_fraction_hi);
        cfg
    }

    pub fn mgu_config(&self) -> MguConfig {
        MguConfig {
            step_size: self.mgu.step_size,
            max_iters: self.mgu.max_iters,
            clip_lo: self.mgu.clip_lo,
            clip_hi: self.mgu.clip_hi,
            per_class_budget: self.mgu.per_class_budget,
            seed: self.seed.wrapping_add(0x4d47_5531),
            ..MguConfig::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.aaft.alpha,
            unknown_loss: self.aaft.loss,
            regularizer: self
                .aaft
                .regularizer
                .unwrap_or_else(|| default_regularizer(self.corpus.num_classes)),
        }
    }

    pub fn delta_grid(&self) -> Vec<f64> {
        let n = self.eval.delta_steps;
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }
}

fn parse<T: std::str::FromStr>(value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError { detail: format!("cannot parse `{value}`") })
}

/// Worker cap from ASL_THREADS; unset or empty means 1.
pub fn thread_count() -> Result<usize, ConfigError> {
    match std::env::var("ASL_THREADS") {
        Ok(v) if v.trim().is_empty() => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => err(format!("ASL_THREADS must be a positive integer, got `{v}`")),
        },
        Err(_) => Ok(1),
    }
}
