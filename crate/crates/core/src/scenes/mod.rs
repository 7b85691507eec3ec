//! Procedural synthetic corpus: piecewise-constant-plus-noise feature images
//! with geometric shapes, injected anomaly regions in the test split, the
//! binary scene file format, and the class-subset partitioner used by the
//! selection-bias pilot.

mod gen;
mod io;

pub use gen::{generate_corpus, Corpus};
pub use io::{
    read_manifest, read_scene, write_manifest, write_scene, ManifestEntry, SceneIoError,
};

use thiserror::Error;

use crate::gradcore::Tensor;

/// Label value marking anomalous (unknown) pixels.
pub const ANOMALY_SENTINEL: u16 = u16::MAX;

/// Per-pixel provenance of a scene pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Role {
    Known = 0,
    Unknown = 1,
    SynthUnknown = 2,
}

impl Role {
    pub fn from_byte(b: u8) -> Option<Role> {
        match b {
            0 => Some(Role::Known),
            1 => Some(Role::Unknown),
            2 => Some(Role::SynthUnknown),
            _ => None,
        }
    }
}

/// A feature image with per-pixel labels and roles.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// C×H×W features.
    pub features: Tensor,
    /// H×W labels, row-major; values in 0..num_classes or [`ANOMALY_SENTINEL`].
    pub labels: Vec<u16>,
    /// H×W roles, row-major.
    pub role: Vec<Role>,
    pub num_classes: usize,
}

impl Scene {
    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn label_at(&self, h: usize, w: usize) -> u16 {
        self.labels[h * self.width() + w]
    }

    pub fn role_at(&self, h: usize, w: usize) -> Role {
        self.role[h * self.width() + w]
    }

    /// Check structural invariants: sizes line up, labels in range, and
    /// role is `Unknown` exactly where the label is the anomaly sentinel.
    pub fn validate(&self) -> Result<(), SceneError> {
        let hw = self.height() * self.width();
        if self.features.shape().len() != 3 || self.labels.len() != hw || self.role.len() != hw {
            return Err(SceneError::Malformed);
        }
        for (i, (&label, &role)) in self.labels.iter().zip(&self.role).enumerate() {
            if label == ANOMALY_SENTINEL {
                if role == Role::Known {
                    return Err(SceneError::RoleLabelMismatch { pixel: i });
                }
            } else if label as usize >= self.num_classes {
                return Err(SceneError::LabelOutOfRange { pixel: i, label });
            } else if role != Role::Known {
                return Err(SceneError::RoleLabelMismatch { pixel: i });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene arrays have inconsistent sizes")]
    Malformed,
    #[error("pixel {pixel}: label {label} outside class range")]
    LabelOutOfRange { pixel: usize, label: u16 },
    #[error("pixel {pixel}: UNKNOWN role and anomaly sentinel label must coincide")]
    RoleLabelMismatch { pixel: usize },
    #[error("invalid corpus config: {0}")]
    BadConfig(String),
    #[error("partition requires 2 <= k <= N, got k={k}, N={n}")]
    BadPartition { k: usize, n: usize },
    #[error("anomaly subset must leave at least one known class")]
    NoKnownClassesLeft,
    #[error("class {0} not in 0..N")]
    BadClassIndex(usize),
}

/// Feature-space layout of class means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassLayout {
    /// Class means picked from a 3D grid; pairwise distances vary, so the
    /// classes are deliberately heterogeneous.
    Grid,
    /// One scaled one-hot mean per class in an N-dimensional feature space;
    /// classes are exchangeable by construction.
    Simplex,
}

/// Everything needed to generate a corpus deterministically.
#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// N class means, each of length `channels`.
    pub class_means: Vec<Vec<f64>>,
    /// Anomaly feature mixture components, each of length `channels`.
    pub anomaly_means: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    /// Required multiple of sigma separating every pair of means.
    pub min_separation_sigmas: f64,
    /// Inclusive range of foreground shapes per scene.
    pub shapes_per_scene: (usize, usize),
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    /// Target anomaly pixel fraction range per test scene; (0.0, 0.0)
    /// disables injection.
    pub anomaly_fraction: (f64, f64),
    pub master_seed: u64,
}

impl CorpusConfig {
    /// Default desk-scale corpus: N classes in a 3-channel feature space,
    /// means on a 3×3×3 grid (heterogeneous pairwise distances), anomaly
    /// mixture in the grid gaps.
    pub fn grid_layout(num_classes: usize, master_seed: u64) -> CorpusConfig {
        let (class_means, anomaly_means) = gen::grid_means(num_classes, master_seed);
        CorpusConfig {
            num_classes,
            channels: 3,
            height: 32,
            width: 32,
            class_means,
            anomaly_means,
            noise_sigma: 0.05,
            min_separation_sigmas: 6.0,
            shapes_per_scene: (2, 6),
            train_scenes: 200,
            val_scenes: 20,
            test_scenes: 50,
            anomaly_fraction: (0.013, 0.027),
            master_seed,
        }
    }

    /// Exchangeable corpus: channels == num_classes, class i's mean is
    /// 0.3·e_i, anomaly mean is −0.3·1. Every class is statistically
    /// interchangeable with every other.
    pub fn simplex_layout(num_classes: usize, master_seed: u64) -> CorpusConfig {
        let mut cfg = CorpusConfig::grid_layout(num_classes, master_seed);
        cfg.channels = num_classes;
        cfg.class_means = (0..num_classes)
            .map(|i| {
                let mut m = vec![0.0; num_classes];
                m[i] = 0.3;
                m
            })
            .collect();
        cfg.anomaly_means = vec![vec![-0.3 / (num_classes as f64).sqrt(); num_classes]];
        cfg
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.num_classes < 2 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(SceneError::BadConfig("degenerate dimensions".into()));
        }
        if self.class_means.len() != self.num_classes {
            return Err(SceneError::BadConfig(format!(
                "{} class means for {} classes",
                self.class_means.len(),
                self.num_classes
            )));
        }
        if self.noise_sigma <= 0.0 {
            return Err(SceneError::BadConfig("noise sigma must be positive".into()));
        }
        if self.shapes_per_scene.0 > self.shapes_per_scene.1 {
            return Err(SceneError::BadConfig("empty shapes-per-scene range".into()));
        }
        let need = self.min_separation_sigmas * self.noise_sigma;
        for means in [&self.class_means, &self.anomaly_means] {
            if means.iter().any(|m| m.len() != self.channels) {
                return Err(SceneError::BadConfig("mean dimension != channels".into()));
            }
        }
        for i in 0..self.num_classes {
            for j in (i + 1)..self.num_classes {
                if dist(&self.class_means[i], &self.class_means[j]) < need {
                    return Err(SceneError::BadConfig(format!(
                        "classes {i} and {j} closer than {} sigma",
                        self.min_separation_sigmas
                    )));
                }
            }
            for (a, am) in self.anomaly_means.iter().enumerate() {
                if dist(&self.class_means[i], am) < need {
                    return Err(SceneError::BadConfig(format!(
                        "anomaly component {a} closer than {} sigma to class {i}",
                        self.min_separation_sigmas
                    )));
                }
            }
        }
        Ok(())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Disjoint, exhaustive class-index subsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetPartition {
    pub subsets: Vec<Vec<usize>>,
}

/// Deterministically partition classes 0..N into k subsets whose sizes
/// differ by at most one.
pub fn partition_classes(n: usize, k: usize, seed: u64) -> Result<SubsetPartition, SceneError> {
    if k < 2 || k > n {
        return Err(SceneError::BadPartition { k, n });
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let mut subsets = Vec::with_capacity(k);
    let mut cursor = 0;
    for s in 0..k {
        let size = base + usize::from(s < extra);
        let mut subset: Vec<usize> = order[cursor..cursor + size].to_vec();
        subset.sort_unstable();
        subsets.push(subset);
        cursor += size;
    }
    Ok(SubsetPartition { subsets })
}

/// Bijection between original retained class indices and their dense
/// re-indexing after an anomaly subset is removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIndexMap {
    /// old index → new index; `None` for anomaly-subset classes.
    pub old_to_new: Vec<Option<usize>>,
    /// new index → old index.
    pub new_to_old: Vec<usize>,
}

/// Treat the given classes as anomalies: their pixels get the sentinel label
/// and `Unknown` role, and the remaining classes are re-indexed densely.
pub fn relabel_as_known_unknown(
    scenes: &[Scene],
    anomaly_subset: &[usize],
) -> Result<(Vec<Scene>, ClassIndexMap), SceneError> {
    let n = scenes.first().map(|s| s.num_classes).unwrap_or(0);
    for &c in anomaly_subset {
        if c >= n {
            return Err(SceneError::BadClassIndex(c));
        }
    }
    let mut is_anomalous = vec![false; n];
    for &c in anomaly_subset {
        is_anomalous[c] = true;
    }
    if n > 0 && is_anomalous.iter().all(|&b| b) {
        return Err(SceneError::NoKnownClassesLeft);
    }
    let mut old_to_new = vec![None; n];
    let mut new_to_old = Vec::new();
    for old in 0..n {
        if !is_anomalous[old] {
            old_to_new[old] = Some(new_to_old.len());
            new_to_old.push(old);
        }
    }
    let remaining = new_to_old.len();

    let relabeled = scenes
        .iter()
        .map(|scene| {
            let mut out = scene.clone();
            out.num_classes = remaining;
            for (label, role) in out.labels.iter_mut().zip(out.role.iter_mut()) {
                if *label == ANOMALY_SENTINEL {
                    continue;
                }
                match old_to_new[*label as usize] {
                    Some(new) => *label = new as u16,
                    None => {
                        *label = ANOMALY_SENTINEL;
                        *role = Role::Unknown;
                    }
                }
            }
            out
        })
        .collect();
    Ok((relabeled, ClassIndexMap { old_to_new, new_to_old }))
}
