use aseg_core::evalkit::{pilot_study, MetricReport, PilotRow, PilotTable, PilotTrainConfig};
use aseg_core::scenes::{generate_corpus, partition_classes, CorpusConfig};

fn report(aupr: f64, auroc: f64, fpr95: f64, base: f64) -> MetricReport {
    MetricReport { aupr, auroc, fpr95, aupr_random_guess: base }
}

fn table() -> PilotTable {
    PilotTable {
        rows: vec![
            PilotRow {
                subset: vec![0, 1],
                report: Some(report(0.2, 0.9, 0.3, 0.05)),
                true_anomaly_report: Some(report(0.1, 0.8, 0.5, 0.02)),
            },
            PilotRow {
                subset: vec![2, 3],
                report: Some(report(0.6, 0.7, 0.1, 0.07)),
                true_anomaly_report: Some(report(0.3, 0.6, 0.7, 0.02)),
            },
        ],
    }
}

#[test]
fn sub_average_is_arithmetic_mean() {
    let avg = table().sub_average().unwrap();
    assert!((avg.aupr - 0.4).abs() < 1e-12);
    assert!((avg.auroc - 0.8).abs() < 1e-12);
    assert!((avg.fpr95 - 0.2).abs() < 1e-12);
    assert!((avg.aupr_random_guess - 0.06).abs() < 1e-12);
}

#[test]
fn spread_is_max_minus_min_per_metric() {
    let s = table().spread().unwrap();
    assert!((s.aupr - 0.4).abs() < 1e-12);
    assert!((s.auroc - 0.2).abs() < 1e-12);
    assert!((s.fpr95 - 0.2).abs() < 1e-12);
    assert!((s.aupr_random_guess - 0.02).abs() < 1e-12);
}

#[test]
fn csv_layout() {
    let csv = table().to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "subset,aupr,auroc,fpr95,aupr_random_guess");
    assert!(lines[1].starts_with("0,"));
    assert!(lines[2].starts_with("1,"));
    assert!(lines[3].starts_with("average,"));
    assert!(lines[4].starts_with("spread,"));
    assert!(lines[5].starts_with("0-true,"));
    assert!(lines[6].starts_with("1-true,"));
    assert_eq!(lines.len(), 7);

    // Failed rows print `failed` in every metric column.
    let mut t = table();
    t.rows[1].report = None;
    assert!(t.to_csv().lines().nth(2).unwrap().ends_with("failed,failed,failed,failed"));
}

#[test]
fn pilot_runs_on_small_corpus_and_is_deterministic() {
    let mut cfg = CorpusConfig::grid_layout(4, 211);
    cfg.train_scenes = 6;
    cfg.val_scenes = 0;
    cfg.test_scenes = 4;
    cfg.height = 16;
    cfg.width = 16;
    let corpus = generate_corpus(&cfg).unwrap();
    let partition = partition_classes(4, 2, 3).unwrap();
    let train_cfg = PilotTrainConfig {
        layer_dims: vec![16],
        epochs: 3,
        lr: 0.2,
        batch: 128,
        ..PilotTrainConfig::default()
    };
    let a = pilot_study(&corpus, &partition, &train_cfg).unwrap();
    let b = pilot_study(&corpus, &partition, &train_cfg).unwrap();
    assert_eq!(a.rows.len(), 2);
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        assert_eq!(ra.subset, rb.subset);
        let (ma, mb) = (ra.report.as_ref().unwrap(), rb.report.as_ref().unwrap());
        assert_eq!(ma.aupr.to_bits(), mb.aupr.to_bits());
        assert_eq!(ma.auroc.to_bits(), mb.auroc.to_bits());
        // Sanity: every metric lands in its valid range.
        assert!((0.0..=1.0).contains(&ma.aupr));
        assert!((0.0..=1.0).contains(&ma.auroc));
        assert!((0.0..=1.0).contains(&ma.fpr95));
        let t = ra.true_anomaly_report.as_ref().unwrap();
        assert!((0.0..=1.0).contains(&t.auroc));
    }
    assert!(a.spread().is_some());
    assert!(a.sub_average().is_some());
}
