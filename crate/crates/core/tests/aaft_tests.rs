use std::collections::BTreeMap;

use aseg_core::aaft::{
    combined_objective, corpus_losses, default_regularizer, entropy_ratio_loss, finetune,
    kl_uniform_loss, AaftError, LossConfig, PixelRef, UnknownLoss,
};
use aseg_core::gradcore::{grad_check, Graph, Op, Tensor};
use aseg_core::mgu::{build_auxiliary_set, MguConfig};
use aseg_core::scenes::{generate_corpus, CorpusConfig, Role, Scene};
use aseg_core::segmodel::{train_supervised, SegModel};
use proptest::prelude::*;

fn kl_cfg(alpha: f64) -> LossConfig {
    LossConfig { alpha, unknown_loss: UnknownLoss::Kl, regularizer: default_regularizer(4) }
}

#[test]
fn kl_loss_examples() {
    assert!(kl_uniform_loss(&[0.25; 4]).abs() < 1e-12);
    assert!(kl_uniform_loss(&[1.0 / 7.0; 7]).abs() < 1e-12);
    // N=2, (0.9, 0.1): -(0.5 ln(0.9/0.5) + 0.5 ln(0.1/0.5)) = -0.5 ln 0.36.
    let expect = -0.5 * (0.36f64).ln();
    assert!((kl_uniform_loss(&[0.9, 0.1]) - expect).abs() < 1e-9);
    assert!((expect - 0.5108).abs() < 1e-4);
    // Permutation symmetry.
    assert_eq!(kl_uniform_loss(&[0.9, 0.1]), kl_uniform_loss(&[0.1, 0.9]));
}

#[test]
fn entropy_ratio_examples() {
    assert!(entropy_ratio_loss(&[1.0 / 12.0; 12], default_regularizer(12)).abs() < 1e-12);
    // N=2, (0.9, 0.1), r = ln(2) * 0.01.
    let r = default_regularizer(2);
    let h = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
    let expect = (2f64.ln() + r) / (h + r) - 1.0;
    let got = entropy_ratio_loss(&[0.9, 0.1], r);
    assert!((got - expect).abs() < 1e-12);
    assert!((got - 1.108).abs() < 1e-2);
    // Near-one-hot rows are large but bounded by H_u / r.
    let spiky = entropy_ratio_loss(&[1.0 - 1e-9, 1e-9], r);
    assert!(spiky > 10.0);
    assert!(spiky <= 2f64.ln() / r);
}

#[test]
fn default_regularizer_values() {
    assert!((default_regularizer(12) - 12f64.ln() * 0.01).abs() < 1e-15);
    assert!((default_regularizer(2) - 2f64.ln() * 0.01).abs() < 1e-15);
    for n in 2..40 {
        assert!(default_regularizer(n) > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(250))]

    /// Both losses vanish only at uniform and are positive elsewhere.
    #[test]
    fn losses_zero_iff_uniform(raw in proptest::collection::vec(0.05f64..5.0, 2..12)) {
        let sum: f64 = raw.iter().sum();
        let dist: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let n = dist.len() as f64;
        let max_dev = dist.iter().map(|p| (p - 1.0 / n).abs()).fold(0.0, f64::max);
        let kl = kl_uniform_loss(&dist);
        let er = entropy_ratio_loss(&dist, default_regularizer(dist.len()));
        prop_assert!(kl >= -1e-12);
        prop_assert!(er >= -1e-12);
        if max_dev > 1e-4 {
            prop_assert!(kl > 0.0);
            prop_assert!(er > 0.0);
        } else if max_dev < 1e-12 {
            prop_assert!(kl.abs() < 1e-9);
            prop_assert!(er.abs() < 1e-9);
        }
    }

    /// The entropy ratio loss only depends on the multiset of entries.
    #[test]
    fn entropy_ratio_permutation_invariant(
        raw in proptest::collection::vec(0.05f64..5.0, 3..8),
        rot in 1usize..5,
    ) {
        let sum: f64 = raw.iter().sum();
        let dist: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let mut rotated = dist.clone();
        rotated.rotate_left(rot % dist.len());
        let r = default_regularizer(dist.len());
        prop_assert!((entropy_ratio_loss(&dist, r) - entropy_ratio_loss(&rotated, r)).abs() < 1e-12);
    }

    /// The entropy-ratio loss is strictly decreasing in Shannon entropy.
    /// (The KL term is not a function of entropy alone, so only its sign
    /// and zero set are pinned above.)
    #[test]
    fn entropy_ratio_monotone_in_entropy(
        a in proptest::collection::vec(0.05f64..5.0, 4),
        b in proptest::collection::vec(0.05f64..5.0, 4),
    ) {
        let norm = |v: &[f64]| -> Vec<f64> {
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        };
        let entropy = |p: &[f64]| -> f64 { p.iter().map(|&x| -x * x.ln()).sum() };
        let (pa, pb) = (norm(&a), norm(&b));
        let (ha, hb) = (entropy(&pa), entropy(&pb));
        if (ha - hb).abs() > 1e-9 {
            let (lo, hi) = if ha < hb { (&pa, &pb) } else { (&pb, &pa) };
            let r = default_regularizer(4);
            prop_assert!(entropy_ratio_loss(lo, r) > entropy_ratio_loss(hi, r));
        }
    }

    /// Along the straight line toward uniform, both losses shrink.
    #[test]
    fn losses_shrink_toward_uniform(
        raw in proptest::collection::vec(0.05f64..5.0, 4),
        t in 0.05f64..0.95,
    ) {
        let sum: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let mix: Vec<f64> = p.iter().map(|&x| (1.0 - t) * x + t * 0.25).collect();
        let r = default_regularizer(4);
        prop_assert!(kl_uniform_loss(&mix) <= kl_uniform_loss(&p) + 1e-12);
        prop_assert!(entropy_ratio_loss(&mix, r) <= entropy_ratio_loss(&p, r) + 1e-12);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    // Check the graph-node versions of both losses through softmax.
    for variant in 0..2 {
        let mut g = Graph::new();
        let x = g.input();
        let s = g.op(Op::SoftmaxRows(x));
        let row = if variant == 0 {
            g.op(Op::RowKlUniform(s))
        } else {
            g.op(Op::RowEntropyRatio { x: s, reg: default_regularizer(5) })
        };
        let loss = g.op(Op::Sum(row));
        let bindings: BTreeMap<_, _> =
            [(x, Tensor::vector(&[0.4, -1.1, 0.9, 0.0, 1.7]).unwrap())].into_iter().collect();
        let err = grad_check(&g, &bindings, loss, 1e-5, 16, variant as u64).unwrap();
        assert!(err <= 1e-4, "variant {variant}: {err}");
    }
}

fn mixed_setup(seed: u64) -> (SegModel, Vec<Scene>) {
    let mut cfg = CorpusConfig::grid_layout(4, seed);
    cfg.train_scenes = 8;
    cfg.val_scenes = 0;
    cfg.test_scenes = 0;
    cfg.height = 16;
    cfg.width = 16;
    let corpus = generate_corpus(&cfg).unwrap();
    let model = SegModel::init(4, 3, 1, vec![16], 1);
    let (model, _) = train_supervised(&model, &corpus.train, 8, 0.2, 128, 3).unwrap();
    let mgu_cfg = MguConfig { per_class_budget: 1, ..MguConfig::default() };
    let (aux, _) = build_auxiliary_set(&model, &corpus.train, &mgu_cfg).unwrap();
    let mut scenes = corpus.train;
    scenes.extend(aux.into_iter().map(|a| a.scene));
    (model, scenes)
}

#[test]
fn objective_with_zero_alpha_is_plain_cross_entropy() {
    let (model, scenes) = mixed_setup(61);
    // A known-only batch: alpha must not matter.
    let batch: Vec<PixelRef> = (0..32)
        .filter(|&i| scenes[0].role[i] == Role::Known)
        .map(|i| PixelRef { scene: 0, pixel: i })
        .collect();
    let (v0, g0) = combined_objective(&model, &scenes, &batch, &kl_cfg(0.0)).unwrap();
    let (v1, g1) = combined_objective(&model, &scenes, &batch, &kl_cfg(1.0)).unwrap();
    assert_eq!(v0, v1);
    assert_eq!(g0, g1);
}

#[test]
fn objective_gradient_is_linear_in_terms() {
    let (model, scenes) = mixed_setup(67);
    let aux_idx = scenes.iter().position(|s| s.role.contains(&Role::SynthUnknown)).unwrap();
    let known: Vec<PixelRef> = (0..scenes[aux_idx].role.len())
        .filter(|&i| scenes[aux_idx].role[i] == Role::Known)
        .take(8)
        .map(|i| PixelRef { scene: aux_idx, pixel: i })
        .collect();
    let synth: Vec<PixelRef> = (0..scenes[aux_idx].role.len())
        .filter(|&i| scenes[aux_idx].role[i] == Role::SynthUnknown)
        .take(8)
        .map(|i| PixelRef { scene: aux_idx, pixel: i })
        .collect();
    let mixed: Vec<PixelRef> = known.iter().chain(&synth).copied().collect();

    let alpha = 0.3;
    let (vm, gm) = combined_objective(&model, &scenes, &mixed, &kl_cfg(alpha)).unwrap();
    let (vk, gk) = combined_objective(&model, &scenes, &known, &kl_cfg(0.0)).unwrap();
    let (vs, gs) = combined_objective(&model, &scenes, &synth, &kl_cfg(alpha)).unwrap();
    assert!((vm - (vk + vs)).abs() <= 1e-12);
    for ((m, k), s) in gm.iter().zip(&gk).zip(&gs) {
        assert!((m - (k + s)).abs() <= 1e-12);
    }
}

#[test]
fn uniform_output_gives_zero_unknown_objective() {
    // Zero parameters -> exactly uniform softmax -> both loss identities are 0.
    let model = SegModel::init(4, 3, 1, vec![16], 0);
    let model = model.with_params(Tensor::zeros(vec![model.param_count()])).unwrap();
    let (_, scenes) = mixed_setup(71);
    let aux_idx = scenes.iter().position(|s| s.role.contains(&Role::SynthUnknown)).unwrap();
    let batch: Vec<PixelRef> = (0..scenes[aux_idx].role.len())
        .filter(|&i| scenes[aux_idx].role[i] == Role::SynthUnknown)
        .map(|i| PixelRef { scene: aux_idx, pixel: i })
        .collect();
    let (v, _) = combined_objective(&model, &scenes, &batch, &kl_cfg(1.0)).unwrap();
    assert!(v.abs() < 1e-12);
}

#[test]
fn empty_batch_rejected() {
    let (model, scenes) = mixed_setup(73);
    assert!(matches!(
        combined_objective(&model, &scenes, &[], &kl_cfg(0.05)),
        Err(AaftError::EmptyBatch)
    ));
}

#[test]
fn finetune_requires_auxiliary_pixels() {
    let mut cfg = CorpusConfig::grid_layout(4, 79);
    cfg.train_scenes = 4;
    cfg.val_scenes = 0;
    cfg.test_scenes = 0;
    cfg.height = 12;
    cfg.width = 12;
    let corpus = generate_corpus(&cfg).unwrap();
    let model = SegModel::init(4, 3, 1, vec![16], 1);
    assert!(matches!(
        finetune(&model, &corpus.train, &kl_cfg(0.05), 1, 0.1, 64, 0),
        Err(AaftError::EmptyAuxiliarySet)
    ));
}

#[test]
fn finetune_reduces_unknown_loss_and_is_deterministic() {
    let (model, scenes) = mixed_setup(83);
    let cfg = kl_cfg(0.5);
    let (initial_known, initial_unknown) = corpus_losses(&model, &scenes, &cfg).unwrap();
    let (tuned_a, report_a) = finetune(&model, &scenes, &cfg, 3, 0.1, 128, 7).unwrap();
    let (tuned_b, report_b) = finetune(&model, &scenes, &cfg, 3, 0.1, 128, 7).unwrap();
    assert_eq!(tuned_a.params, tuned_b.params);
    assert_eq!(report_a.mean_unknown_loss, report_b.mean_unknown_loss);
    assert_eq!(report_a.epochs_run, 3);
    assert_eq!(report_a.mean_known_loss.len(), 3);
    assert!((report_a.initial_unknown_loss - initial_unknown).abs() < 1e-12);
    assert!((report_a.initial_known_loss - initial_known).abs() < 1e-12);
    assert!(report_a.mean_unknown_loss[2] < initial_unknown);

    let csv = report_a.to_csv();
    assert!(csv.starts_with("epoch,mean_Lk,mean_unknown_loss\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn finetune_with_entropy_ratio_loss() {
    let (model, scenes) = mixed_setup(89);
    let cfg = LossConfig {
        alpha: 0.5,
        unknown_loss: UnknownLoss::EntropyRatio,
        regularizer: default_regularizer(4),
    };
    let (_, report) = finetune(&model, &scenes, &cfg, 2, 0.1, 128, 7).unwrap();
    assert!(report.mean_unknown_loss[1] < report.initial_unknown_loss);
}
