use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::gradcore::Tensor;

use super::{CorpusConfig, Role, Scene, SceneError, ANOMALY_SENTINEL};

/// Train/val/test scene splits.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn scene_seed(master: u64, split: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(split.wrapping_shl(32) ^ index))
}

/// Class means on a 3×3×3 grid at coordinates {0.15, 0.5, 0.85}; anomaly
/// mixture components taken from leftover grid points, so every anomaly
/// component sits in a feature-space gap at least one grid step (0.35) from
/// every class mean.
pub(super) fn grid_means(num_classes: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    assert!(num_classes + 3 <= 27, "grid layout supports at most 24 classes");
    let coords = [0.15, 0.5, 0.85];
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(27);
    for &a in &coords {
        for &b in &coords {
            for &c in &coords {
                points.push(vec![a, b, c]);
            }
        }
    }
    use rand::seq::SliceRandom;
    points.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x6d65616e73)));
    let class_means = points[..num_classes].to_vec();
    let anomaly_means = points[num_classes..num_classes + 3].to_vec();
    (class_means, anomaly_means)
}

/// Generate a full corpus. Train/val scenes contain only KNOWN pixels; test
/// scenes additionally carry injected connected anomaly regions. Bit-identical
/// across runs for a fixed config and master seed.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus, SceneError> {
    cfg.validate()?;
    let gen_split = |split: u64, count: usize, inject: bool| -> Vec<Scene> {
        (0..count)
            .map(|i| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(scene_seed(cfg.master_seed, split, i as u64));
                generate_scene(cfg, &mut rng, inject)
            })
            .collect()
    };
    Ok(Corpus {
        train: gen_split(0, cfg.train_scenes, false),
        val: gen_split(1, cfg.val_scenes, false),
        test: gen_split(2, cfg.test_scenes, true),
    })
}

fn generate_scene(cfg: &CorpusConfig, rng: &mut ChaCha8Rng, inject_anomaly: bool) -> Scene {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let hw = h * w;
    let background = rng.gen_range(0..cfg.num_classes) as u16;
    let mut labels = vec![background; hw];

    let shapes = rng.gen_range(cfg.shapes_per_scene.0..=cfg.shapes_per_scene.1);
    for _ in 0..shapes {
        let class = rng.gen_range(0..cfg.num_classes) as u16;
        paint_shape(&mut labels, h, w, rng, class);
    }

    // Per-pixel anomaly mixture component, filled during injection.
    let mut anomaly_component = vec![usize::MAX; hw];
    let mut role = vec![Role::Known; hw];
    if inject_anomaly && cfg.anomaly_fraction.1 > 0.0 {
        let frac = rng.gen_range(cfg.anomaly_fraction.0..=cfg.anomaly_fraction.1);
        let area = ((frac * hw as f64).round() as usize).max(1);
        let component = rng.gen_range(0..cfg.anomaly_means.len());
        // Fully interior rectangle of roughly the target area, so the
        // measured fraction stays inside the configured band.
        let side = (area as f64).sqrt().floor().max(1.0) as usize;
        let rect_h = side.min(h);
        let rect_w = ((area + rect_h - 1) / rect_h).min(w);
        let top = rng.gen_range(0..=h - rect_h);
        let left = rng.gen_range(0..=w - rect_w);
        for y in top..top + rect_h {
            for x in left..left + rect_w {
                let i = y * w + x;
                labels[i] = ANOMALY_SENTINEL;
                role[i] = Role::Unknown;
                anomaly_component[i] = component;
            }
        }
    }

    let mut features = vec![0.0; c * hw];
    for i in 0..hw {
        let mean: &[f64] = if labels[i] == ANOMALY_SENTINEL {
            &cfg.anomaly_means[anomaly_component[i]]
        } else {
            &cfg.class_means[labels[i] as usize]
        };
        for chan in 0..c {
            let noise: f64 = rng.sample(StandardNormal);
            features[chan * hw + i] = mean[chan] + cfg.noise_sigma * noise;
        }
    }

    Scene {
        features: Tensor::new(vec![c, h, w], features).expect("finite generated features"),
        labels,
        role,
        num_classes: cfg.num_classes,
    }
}

fn paint_shape(labels: &mut [u16], h: usize, w: usize, rng: &mut ChaCha8Rng, class: u16) {
    if rng.gen_bool(0.5) {
        // Rectangle.
        let rh = rng.gen_range(3..=(h / 2).max(4));
        let rw = rng.gen_range(3..=(w / 2).max(4));
        let top = rng.gen_range(0..h);
        let left = rng.gen_range(0..w);
        for y in top..(top + rh).min(h) {
            for x in left..(left + rw).min(w) {
                labels[y * w + x] = class;
            }
        }
    } else {
        // Disc.
        let r = rng.gen_range(2..=(h.min(w) / 4).max(3)) as i64;
        let cy = rng.gen_range(0..h) as i64;
        let cx = rng.gen_range(0..w) as i64;
        for y in (cy - r).max(0)..(cy + r + 1).min(h as i64) {
            for x in (cx - r).max(0)..(cx + r + 1).min(w as i64) {
                if (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r {
                    labels[y as usize * w + x as usize] = class;
                }
            }
        }
    }
}
