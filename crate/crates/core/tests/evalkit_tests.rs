use aseg_core::evalkit::{
    aupr, auroc, evaluate_anomaly, fpr_at_tpr, score_scenes, threshold_sweep, EvalError,
    ScoredPixels,
};
use aseg_core::gradcore::Tensor;
use aseg_core::scenes::{generate_corpus, CorpusConfig};
use aseg_core::segmodel::SegModel;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sp(pos: &[f64], neg: &[f64]) -> ScoredPixels {
    let mut scores = pos.to_vec();
    scores.extend_from_slice(neg);
    let mut truth = vec![true; pos.len()];
    truth.extend(vec![false; neg.len()]);
    ScoredPixels::new(scores, truth).unwrap()
}

/// O(P*N) pairwise comparison oracle for AUROC.
fn auroc_oracle(s: &ScoredPixels) -> f64 {
    let pos: Vec<f64> =
        s.scores.iter().zip(&s.truth).filter(|(_, &t)| t).map(|(&v, _)| v).collect();
    let neg: Vec<f64> =
        s.scores.iter().zip(&s.truth).filter(|(_, &t)| !t).map(|(&v, _)| v).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}

/// Quadratic threshold-enumeration oracle for average precision.
fn aupr_oracle(s: &ScoredPixels) -> f64 {
    let mut thresholds: Vec<f64> = s.scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let total_pos = s.truth.iter().filter(|&&t| t).count() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &thr in &thresholds {
        let tp = s
            .scores
            .iter()
            .zip(&s.truth)
            .filter(|(&v, &t)| v >= thr && t)
            .count() as f64;
        let fp = s
            .scores
            .iter()
            .zip(&s.truth)
            .filter(|(&v, &t)| v >= thr && !t)
            .count() as f64;
        let recall = tp / total_pos;
        let precision = tp / (tp + fp);
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    ap
}

/// Quadratic threshold-enumeration oracle for FPR at a TPR target.
fn fpr_oracle(s: &ScoredPixels, target: f64) -> f64 {
    let mut thresholds: Vec<f64> = s.scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let total_pos = s.truth.iter().filter(|&&t| t).count() as f64;
    let total_neg = s.truth.iter().filter(|&&t| !t).count() as f64;
    for &thr in &thresholds {
        let tp = s
            .scores
            .iter()
            .zip(&s.truth)
            .filter(|(&v, &t)| v >= thr && t)
            .count() as f64;
        if tp / total_pos >= target {
            let fp = s
                .scores
                .iter()
                .zip(&s.truth)
                .filter(|(&v, &t)| v >= thr && !t)
                .count() as f64;
            return fp / total_neg;
        }
    }
    1.0
}

#[test]
fn auroc_examples() {
    // pos {0.8, 0.4}, neg {0.6, 0.2}: 3 wins out of 4 pairs.
    assert!((auroc(&sp(&[0.8, 0.4], &[0.6, 0.2])).unwrap() - 0.75).abs() < 1e-12);
    // Perfect separation.
    assert!((auroc(&sp(&[0.9, 0.8], &[0.3, 0.1])).unwrap() - 1.0).abs() < 1e-12);
    // All ties -> chance level.
    assert!((auroc(&sp(&[0.5, 0.5], &[0.5, 0.5, 0.5])).unwrap() - 0.5).abs() < 1e-12);
    // Inverted scores.
    assert!((auroc(&sp(&[0.1], &[0.9])).unwrap() - 0.0).abs() < 1e-12);
}

#[test]
fn aupr_examples() {
    // All scores equal: AP equals the positive rate.
    let s = sp(&[0.5, 0.5], &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
    assert!((aupr(&s).unwrap() - 0.25).abs() < 1e-12);
    // Perfect ranking: AP = 1.
    assert!((aupr(&sp(&[0.9, 0.8], &[0.2, 0.1])).unwrap() - 1.0).abs() < 1e-12);
    // Single positive ranked second: precision 1/2 at full recall.
    assert!((aupr(&sp(&[0.5], &[0.9])).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn fpr95_examples() {
    // Perfect separation: TPR hits 1 before any negative is admitted.
    assert!((fpr_at_tpr(&sp(&[0.9, 0.8], &[0.2, 0.1]), 0.95).unwrap() - 0.0).abs() < 1e-12);
    // All scores equal: the only threshold admits everything.
    assert!((fpr_at_tpr(&sp(&[0.5, 0.5], &[0.5, 0.5]), 0.95).unwrap() - 1.0).abs() < 1e-12);
    // 20 positives, one outlier below all negatives: 95% TPR reachable
    // without negatives only if 19/20 >= 0.95.
    let mut pos = vec![0.9; 19];
    pos.push(0.1);
    assert!((fpr_at_tpr(&sp(&pos, &[0.5; 10]), 0.95).unwrap() - 0.0).abs() < 1e-12);
    pos.pop();
    pos[18] = 0.1; // now 18/19 < 0.95, so negatives must be admitted
    assert!((fpr_at_tpr(&sp(&pos, &[0.5; 10]), 0.95).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn degenerate_inputs_rejected() {
    assert!(ScoredPixels::new(vec![0.5], vec![true, false]).is_err());
    assert!(ScoredPixels::new(vec![f64::NAN, 0.2], vec![true, false]).is_err());
    let only_pos = ScoredPixels::new(vec![0.5, 0.6], vec![true, true]).unwrap();
    assert!(matches!(auroc(&only_pos), Err(EvalError::NoNegatives)));
    assert!(matches!(fpr_at_tpr(&only_pos, 0.95), Err(EvalError::NoNegatives)));
    let only_neg = ScoredPixels::new(vec![0.5], vec![false]).unwrap();
    assert!(matches!(aupr(&only_neg), Err(EvalError::NoPositives)));
}

#[test]
fn metrics_match_oracles_on_random_instances() {
    // Acceptance gate: >= 1000 random instances with n <= 200, agreement
    // within 1e-9, under 60 seconds.
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for trial in 0..1000 {
        let n_pos = rng.gen_range(1..=100usize);
        let n_neg = rng.gen_range(1..=100usize);
        // Mix continuous scores with a coarse lattice to force ties.
        let lattice = rng.gen_bool(0.5);
        let mut draw = |offset: f64| -> f64 {
            let v: f64 = rng.gen::<f64>() + offset;
            if lattice {
                (v * 8.0).round() / 8.0
            } else {
                v
            }
        };
        let pos: Vec<f64> = (0..n_pos).map(|_| draw(0.2)).collect();
        let neg: Vec<f64> = (0..n_neg).map(|_| draw(0.0)).collect();
        let s = sp(&pos, &neg);
        let (a, o) = (auroc(&s).unwrap(), auroc_oracle(&s));
        assert!((a - o).abs() <= 1e-9, "trial {trial} auroc {a} vs {o}");
        let (a, o) = (aupr(&s).unwrap(), aupr_oracle(&s));
        assert!((a - o).abs() <= 1e-9, "trial {trial} aupr {a} vs {o}");
        let (a, o) = (fpr_at_tpr(&s, 0.95).unwrap(), fpr_oracle(&s, 0.95));
        assert!((a - o).abs() <= 1e-9, "trial {trial} fpr95 {a} vs {o}");
    }
    assert!(start.elapsed().as_secs() < 60);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// AUROC and FPR@95 are invariant under strictly increasing transforms.
    #[test]
    fn rank_metrics_invariant_under_monotone_transform(
        pos in proptest::collection::vec(0.0f64..1.0, 1..20),
        neg in proptest::collection::vec(0.0f64..1.0, 1..20),
    ) {
        let raw = sp(&pos, &neg);
        let warp = |v: f64| (3.0 * v).exp() / 10.0 + v;
        let warped = sp(
            &pos.iter().map(|&v| warp(v)).collect::<Vec<_>>(),
            &neg.iter().map(|&v| warp(v)).collect::<Vec<_>>(),
        );
        prop_assert!((auroc(&raw).unwrap() - auroc(&warped).unwrap()).abs() < 1e-9);
        prop_assert!((aupr(&raw).unwrap() - aupr(&warped).unwrap()).abs() < 1e-9);
        prop_assert!(
            (fpr_at_tpr(&raw, 0.95).unwrap() - fpr_at_tpr(&warped, 0.95).unwrap()).abs() < 1e-9
        );
    }

    /// Shuffling the pixel order never changes any metric.
    #[test]
    fn metrics_permutation_invariant(
        pos in proptest::collection::vec(0.0f64..1.0, 1..15),
        neg in proptest::collection::vec(0.0f64..1.0, 1..15),
        seed in any::<u64>(),
    ) {
        let base = sp(&pos, &neg);
        let mut order: Vec<usize> = (0..base.scores.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = ScoredPixels::new(
            order.iter().map(|&i| base.scores[i]).collect(),
            order.iter().map(|&i| base.truth[i]).collect(),
        ).unwrap();
        prop_assert_eq!(auroc(&base).unwrap(), auroc(&shuffled).unwrap());
        prop_assert_eq!(aupr(&base).unwrap(), aupr(&shuffled).unwrap());
        prop_assert_eq!(fpr_at_tpr(&base, 0.95).unwrap(), fpr_at_tpr(&shuffled, 0.95).unwrap());
    }
}

#[test]
fn evaluate_anomaly_end_to_end() {
    let mut cfg = CorpusConfig::grid_layout(4, 101);
    cfg.train_scenes = 0;
    cfg.val_scenes = 0;
    cfg.test_scenes = 6;
    cfg.height = 16;
    cfg.width = 16;
    let corpus = generate_corpus(&cfg).unwrap();
    let model = SegModel::init(4, 3, 1, vec![8], 2);
    let report = evaluate_anomaly(&model, &corpus.test).unwrap();
    assert!(report.aupr > 0.0 && report.aupr <= 1.0);
    assert!(report.auroc >= 0.0 && report.auroc <= 1.0);
    assert!(report.fpr95 >= 0.0 && report.fpr95 <= 1.0);
    // The random-guess reference is the pooled positive rate.
    let scored = score_scenes(&model, &corpus.test).unwrap();
    let rate = scored.positives() as f64 / scored.scores.len() as f64;
    assert!((report.aupr_random_guess - rate).abs() < 1e-12);

    let csv = report.to_csv();
    assert!(csv.starts_with("metric,value\n"));
    assert!(csv.contains("aupr,"));
    assert!(csv.contains("auroc,"));
    assert!(csv.contains("fpr95,"));
    assert!(csv.contains("aupr_random_guess,"));
}

#[test]
fn evaluate_without_anomalies_errors() {
    let mut cfg = CorpusConfig::grid_layout(4, 103);
    cfg.train_scenes = 1;
    cfg.val_scenes = 0;
    cfg.test_scenes = 0;
    let corpus = generate_corpus(&cfg).unwrap();
    let model = SegModel::init(4, 3, 1, vec![8], 2);
    assert!(matches!(
        evaluate_anomaly(&model, &corpus.train),
        Err(EvalError::NoUnknownPixels)
    ));
}

#[test]
fn sweep_monotone_and_matches_per_pixel_counting() {
    let mut cfg = CorpusConfig::grid_layout(4, 107);
    cfg.train_scenes = 0;
    cfg.val_scenes = 0;
    cfg.test_scenes = 4;
    cfg.height = 16;
    cfg.width = 16;
    let corpus = generate_corpus(&cfg).unwrap();
    let model = SegModel::init(4, 3, 1, vec![8], 2);
    let deltas: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let curve = threshold_sweep(&model, &corpus.test, &deltas).unwrap();
    assert_eq!(curve.points.len(), deltas.len());
    for pair in curve.points.windows(2) {
        // Exact monotonicity: semantic accuracy never rises, anomaly
        // accuracy never falls, as the threshold grows.
        assert!(pair[1].1 <= pair[0].1, "semantic acc rose: {:?}", pair);
        assert!(pair[1].2 >= pair[0].2, "anomaly acc fell: {:?}", pair);
    }
    // Endpoint checks: delta = 1 flags everything as anomalous.
    let last = curve.points.last().unwrap();
    assert_eq!(last.1, 0.0);
    assert_eq!(last.2, 1.0);

    let csv = curve.to_csv();
    assert!(csv.starts_with("delta,semantic_acc,anomaly_acc\n"));
    assert_eq!(csv.lines().count(), deltas.len() + 1);

    // Bad grids rejected.
    assert!(threshold_sweep(&model, &corpus.test, &[]).is_err());
    assert!(threshold_sweep(&model, &corpus.test, &[0.5, 0.5]).is_err());
    assert!(threshold_sweep(&model, &corpus.test, &[0.5, 0.2]).is_err());
    assert!(threshold_sweep(&model, &corpus.test, &[0.5, 1.2]).is_err());
}

#[test]
fn score_scenes_is_one_minus_msp() {
    let mut cfg = CorpusConfig::grid_layout(4, 109);
    cfg.train_scenes = 0;
    cfg.val_scenes = 0;
    cfg.test_scenes = 1;
    cfg.height = 8;
    cfg.width = 8;
    let corpus = generate_corpus(&cfg).unwrap();
    // Zero parameters: uniform softmax, so every score is 1 - 1/4.
    let model = SegModel::init(4, 3, 1, vec![8], 0);
    let model = model.with_params(Tensor::zeros(vec![model.param_count()])).unwrap();
    let scored = score_scenes(&model, &corpus.test).unwrap();
    assert!(scored.scores.iter().all(|&v| (v - 0.75).abs() < 1e-12));
}
