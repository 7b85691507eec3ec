use std::path::Path;
use std::process::Command;

use asl::{execute, CliError, RunConfig, Stage};

const SMALL_CONFIG: &str = "\
seed = 7

[corpus]
num_classes = 4
height = 16
width = 16
train_scenes = 10
val_scenes = 2
test_scenes = 4

[model]
layer_dims = 16

[pretrain]
epochs = 8
lr = 0.2
batch = 128

[mgu]
per_class_budget = 2
max_iters = 60

[aaft]
alpha = 0.5
loss = kl
epochs = 2
lr = 0.1
batch = 128

[pilot]
subsets = 2
epochs = 2
lr = 0.2
batch = 128

[gradcheck]
graphs = 20
";

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, SMALL_CONFIG).unwrap();
    path
}

fn digests(dir: &Path) -> Vec<(String, String)> {
    asl::manifest::inventory(dir)
        .unwrap()
        .into_iter()
        .map(|rel| {
            let digest = asl::manifest::file_digest(&dir.join(&rel)).unwrap();
            (rel.display().to_string(), digest)
        })
        .collect()
}

#[test]
fn config_parsing_defaults_and_errors() {
    let cfg = RunConfig::parse("").unwrap();
    assert_eq!(cfg.corpus.num_classes, 12);
    assert_eq!(cfg.model.layer_dims, vec![32, 32]);

    let cfg = RunConfig::parse(SMALL_CONFIG).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.corpus.num_classes, 4);
    assert_eq!(cfg.model.layer_dims, vec![16]);
    assert_eq!(cfg.pilot.subsets, 2);

    assert!(RunConfig::parse("[corpus]\nnum_classes = twelve\n").is_err());
    assert!(RunConfig::parse("[corpus]\nbogus_key = 1\n").is_err());
    assert!(RunConfig::parse("[bogus]\nx = 1\n").is_err());
    assert!(RunConfig::parse("no equals sign here\n").is_err());
    // Cross-field validation: more pilot subsets than classes.
    assert!(RunConfig::parse("[corpus]\nnum_classes = 4\n[pilot]\nsubsets = 5\n").is_err());
    // Comments and blank lines are fine.
    assert!(RunConfig::parse("# comment\n\nseed = 3 # trailing\n").is_ok());
}

#[test]
fn missing_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_asl"))
        .args(["gen-data", "--config"])
        .arg(dir.path().join("nope.cfg"))
        .arg("--run")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn invalid_config_exits_2_without_partial_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[mgu]\nstep_size = -1\n").unwrap();
    let run = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_asl"))
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--run")
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!run.exists(), "config error must not create the run directory");
}

#[test]
fn eval_before_train_names_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    execute(Stage::GenData, &cfg, &run, None).unwrap();
    match execute(Stage::Eval, &cfg, &run, None) {
        Err(e @ CliError::Stage(_)) => {
            assert_eq!(e.exit_code(), 1);
            assert!(e.message().contains("finetuned.aslm"), "message: {}", e.message());
        }
        other => panic!("expected stage error, got {other:?}"),
    }
}

#[test]
fn stages_require_corpus_first() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    let err = execute(Stage::Train, &cfg, &run, None).unwrap_err();
    assert!(err.message().contains("gen-data"), "message: {}", err.message());
}

#[test]
fn locked_run_dir_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".asl-lock"), b"").unwrap();
    let err = execute(Stage::GenData, &cfg, &run, None).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.message().contains("locked"));
}

#[test]
fn gen_data_is_digest_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    execute(Stage::GenData, &cfg, &a, None).unwrap();
    execute(Stage::GenData, &cfg, &b, None).unwrap();
    execute(Stage::GenData, &cfg, &c, Some(8)).unwrap();
    assert_eq!(digests(&a), digests(&b));
    assert_ne!(digests(&a), digests(&c), "seed override must change the corpus");
}

#[test]
fn full_small_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    for stage in [
        Stage::GenData,
        Stage::Train,
        Stage::Mgu,
        Stage::Finetune,
        Stage::Eval,
        Stage::Sweep,
        Stage::Pilot,
        Stage::Gradcheck,
    ] {
        execute(stage, &cfg, &run, None).unwrap_or_else(|e| {
            panic!("stage {} failed: {}", stage.name(), e.message());
        });
    }

    // metrics.csv: header plus the four declared rows.
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    assert!(metrics.starts_with("metric,value\n"));

    let curves = std::fs::read_to_string(run.join("curves.csv")).unwrap();
    assert!(curves.starts_with("delta,semantic_acc,anomaly_acc\n"));
    assert_eq!(curves.lines().count(), 22);

    let pilot = std::fs::read_to_string(run.join("pilot.csv")).unwrap();
    assert!(pilot.starts_with("subset,aupr,auroc,fpr95,aupr_random_guess\n"));

    assert!(run.join("checkpoints/pretrained.aslm").exists());
    assert!(run.join("checkpoints/finetuned.aslm").exists());
    assert!(run.join("train_loss.csv").exists());
    assert!(run.join("finetune_report.csv").exists());
    assert!(run.join("gradcheck_report.txt").exists());

    // One PGM per test scene, with a valid P5 header.
    for i in 0..4 {
        let pgm = std::fs::read(run.join(format!("heatmaps/test_{i:03}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(pgm.len(), "P5\n16 16\n255\n".len() + 256);
    }

    // Manifest records every artifact and all executed stages.
    let manifest = std::fs::read_to_string(run.join("run_manifest.txt")).unwrap();
    for needle in
        ["file metrics.csv", "file curves.csv", "stage gen-data", "stage gradcheck", "seed = 7"]
    {
        assert!(manifest.contains(needle), "manifest missing `{needle}`");
    }
    // The lock is released after each stage.
    assert!(!run.join(".asl-lock").exists());
}

#[test]
fn gradcheck_fault_injection_fails_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_asl"))
        .args(["gradcheck", "--config"])
        .arg(&cfg)
        .arg("--run")
        .arg(&run)
        .env("ASL_GRADCHECK_FAULT", "0.01")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gradient check failed"));
}

#[test]
fn gradcheck_zero_graphs_vacuous_pass_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "[gradcheck]\ngraphs = 0\n").unwrap();
    let run = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_asl"))
        .args(["gradcheck", "--config"])
        .arg(&cfg)
        .arg("--run")
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vacuous"));
}

#[test]
fn invalid_asl_threads_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_asl"))
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--run")
        .arg(&run)
        .env("ASL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
