//! Stage implementations behind the `asl` subcommands.
//!
//! Every stage validates the whole config before touching the filesystem,
//! holds the run-directory lock while working, and refreshes the run
//! manifest afterwards.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use aseg_core::evalkit::{evaluate_anomaly, threshold_sweep, pilot_study, PilotTrainConfig};
use aseg_core::mgu::build_auxiliary_set;
use aseg_core::scenes::{
    generate_corpus, partition_classes, read_manifest, read_scene, write_manifest, write_scene,
    Corpus, ManifestEntry, Scene,
};
use aseg_core::segmodel::{
    load_checkpoint, msp_score, save_checkpoint, softmax_map, train_supervised, SegModel,
};
use aseg_core::aaft::finetune;

use crate::config::{thread_count, CheckpointChoice, RunConfig};
use crate::gradcheck::run_suite;
use crate::manifest::{update as update_manifest, RunLock};
use crate::pgm::write_pgm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Train,
    Mgu,
    Finetune,
    Eval,
    Sweep,
    Pilot,
    Gradcheck,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Mgu => "mgu",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Pilot => "pilot",
            Stage::Gradcheck => "gradcheck",
        }
    }
}

/// Errors split by exit code: 2 for usage/config problems, 1 for stage
/// failures.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Stage(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Stage(_) => 1,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Stage(e) => format!("{e:#}"),
        }
    }
}

pub fn execute(
    stage: Stage,
    config_path: &Path,
    run_dir: &Path,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    // Full validation before any side effect.
    let config_bytes = std::fs::read(config_path).map_err(|e| {
        CliError::Usage(format!("cannot read config {}: {e}", config_path.display()))
    })?;
    let text = String::from_utf8_lossy(&config_bytes);
    let mut cfg = RunConfig::parse(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let threads = thread_count().map_err(|e| CliError::Usage(e.to_string()))?;

    std::fs::create_dir_all(run_dir)
        .with_context(|| format!("cannot create run directory {}", run_dir.display()))
        .map_err(CliError::Stage)?;
    let _lock = RunLock::acquire(run_dir).map_err(CliError::Stage)?;

    let result = match stage {
        Stage::GenData => cmd_gen_data(&cfg, run_dir),
        Stage::Train => cmd_train(&cfg, run_dir),
        Stage::Mgu => cmd_mgu(&cfg, run_dir),
        Stage::Finetune => cmd_finetune(&cfg, run_dir),
        Stage::Eval => cmd_eval(&cfg, run_dir, threads),
        Stage::Sweep => cmd_sweep(&cfg, run_dir),
        Stage::Pilot => cmd_pilot(&cfg, run_dir),
        Stage::Gradcheck => cmd_gradcheck(&cfg, run_dir),
    };
    result.map_err(CliError::Stage)?;

    update_manifest(run_dir, &config_bytes, cfg.seed, stage.name()).map_err(CliError::Stage)
}

fn data_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("data")
}

fn corpus_manifest_path(run_dir: &Path) -> PathBuf {
    data_dir(run_dir).join("corpus_manifest.txt")
}

fn checkpoint_path(run_dir: &Path, which: CheckpointChoice) -> PathBuf {
    let name = match which {
        CheckpointChoice::Pretrained => "pretrained.aslm",
        CheckpointChoice::Finetuned => "finetuned.aslm",
    };
    run_dir.join("checkpoints").join(name)
}

fn read_data_manifest(run_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = corpus_manifest_path(run_dir);
    if !path.exists() {
        bail!("missing corpus manifest {}; run gen-data first", path.display());
    }
    Ok(read_manifest(&path)?)
}

fn load_split(run_dir: &Path, split: &str) -> Result<Vec<Scene>> {
    let entries = read_data_manifest(run_dir)?;
    let dir = data_dir(run_dir);
    let mut scenes = Vec::new();
    for e in entries.iter().filter(|e| e.split == split) {
        scenes.push(
            read_scene(&dir.join(&e.path))
                .with_context(|| format!("reading scene {}", e.path))?,
        );
    }
    Ok(scenes)
}

fn load_model(run_dir: &Path, which: CheckpointChoice) -> Result<SegModel> {
    let path = checkpoint_path(run_dir, which);
    if !path.exists() {
        bail!("missing checkpoint {}; run the producing stage first", path.display());
    }
    load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_gen_data(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let corpus = generate_corpus(&cfg.corpus_config())?;
    let dir = data_dir(run_dir);
    std::fs::create_dir_all(&dir)?;
    let mut entries = Vec::new();
    for (split, scenes) in
        [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)]
    {
        for (i, scene) in scenes.iter().enumerate() {
            let name = format!("{split}_{i:03}.aseg");
            write_scene(&dir.join(&name), scene)?;
            entries.push(ManifestEntry {
                split: split.to_string(),
                path: name,
                adversarial_class: None,
            });
        }
    }
    write_manifest(&corpus_manifest_path(run_dir), &entries)?;
    println!(
        "gen-data: wrote {} train, {} val, {} test scenes",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let train = load_split(run_dir, "train")?;
    if train.is_empty() {
        bail!("no train scenes in the corpus manifest");
    }
    let model = SegModel::init(
        cfg.corpus.num_classes,
        train[0].channels(),
        cfg.model.patch_radius,
        cfg.model.layer_dims.clone(),
        cfg.seed.wrapping_add(1),
    );
    let (trained, losses) = train_supervised(
        &model,
        &train,
        cfg.pretrain.epochs,
        cfg.pretrain.lr,
        cfg.pretrain.batch,
        cfg.seed.wrapping_add(2),
    )?;
    std::fs::create_dir_all(run_dir.join("checkpoints"))?;
    save_checkpoint(&checkpoint_path(run_dir, CheckpointChoice::Pretrained), &trained)?;
    let mut csv = String::from("epoch,mean_ce\n");
    for (i, loss) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{loss}\n", i + 1));
    }
    std::fs::write(run_dir.join("train_loss.csv"), csv)?;
    println!("train: {} epochs, final mean CE {}", losses.len(), losses.last().unwrap_or(&0.0));
    Ok(())
}

fn cmd_mgu(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let model = load_model(run_dir, CheckpointChoice::Pretrained)?;
    let train = load_split(run_dir, "train")?;
    if train.is_empty() {
        bail!("no train scenes in the corpus manifest");
    }
    let (aux, warnings) = build_auxiliary_set(&model, &train, &cfg.mgu_config())?;
    for w in &warnings {
        eprintln!("mgu: warning: {w}");
    }
    let dir = data_dir(run_dir);
    let trace_dir = run_dir.join("mgu");
    std::fs::create_dir_all(&trace_dir)?;
    // Replace any previous auxiliary entries.
    let mut entries: Vec<ManifestEntry> =
        read_data_manifest(run_dir)?.into_iter().filter(|e| e.split != "aux").collect();
    let mut empty_set = 0usize;
    for (i, a) in aux.iter().enumerate() {
        let name = format!("aux_{i:03}.aseg");
        write_scene(&dir.join(&name), &a.scene)?;
        std::fs::write(trace_dir.join(format!("trace_{i:03}.csv")), a.trace.to_csv())?;
        entries.push(ManifestEntry {
            split: "aux".to_string(),
            path: name,
            adversarial_class: Some(a.adversarial_class),
        });
        if a.trace.termination == aseg_core::mgu::Termination::EmptySet {
            empty_set += 1;
        }
    }
    write_manifest(&corpus_manifest_path(run_dir), &entries)?;
    println!(
        "mgu: wrote {} auxiliary scenes ({} reached the empty set)",
        aux.len(),
        empty_set
    );
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let model = load_model(run_dir, CheckpointChoice::Pretrained)?;
    let mut scenes = load_split(run_dir, "train")?;
    let aux = load_split(run_dir, "aux")?;
    if aux.is_empty() {
        bail!("no auxiliary scenes in the corpus manifest; run mgu first");
    }
    scenes.extend(aux);
    let (tuned, report) = finetune(
        &model,
        &scenes,
        &cfg.loss_config(),
        cfg.aaft.epochs,
        cfg.aaft.lr,
        cfg.aaft.batch,
        cfg.seed.wrapping_add(3),
    )?;
    save_checkpoint(&checkpoint_path(run_dir, CheckpointChoice::Finetuned), &tuned)?;
    std::fs::write(run_dir.join("finetune_report.csv"), report.to_csv())?;
    println!(
        "finetune: {} epochs, unknown loss {} -> {}",
        report.epochs_run,
        report.initial_unknown_loss,
        report.mean_unknown_loss.last().unwrap_or(&report.initial_unknown_loss)
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, run_dir: &Path, threads: usize) -> Result<()> {
    let model = load_model(run_dir, cfg.eval.checkpoint)?;
    let test = load_split(run_dir, "test")?;
    if test.is_empty() {
        bail!("no test scenes in the corpus manifest; cannot evaluate");
    }
    let report = evaluate_anomaly(&model, &test)?;
    std::fs::write(run_dir.join("metrics.csv"), report.to_csv())?;

    // One heatmap of 1 - MSP per test scene; scenes are scored in parallel
    // up to the ASL_THREADS cap, writes stay sequential and ordered.
    let heat_dir = run_dir.join("heatmaps");
    std::fs::create_dir_all(&heat_dir)?;
    let mut maps: Vec<Option<Vec<f64>>> = vec![None; test.len()];
    let chunk = test.len().div_ceil(threads.max(1)).max(1);
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (c, scenes) in test.chunks(chunk).enumerate() {
            let model = &model;
            handles.push((
                c * chunk,
                scope.spawn(move || -> Result<Vec<Vec<f64>>> {
                    scenes
                        .iter()
                        .map(|s| {
                            let msp = msp_score(&softmax_map(&model.predict_logits(&s.features)?));
                            Ok(msp.values.iter().map(|&v| 1.0 - v).collect())
                        })
                        .collect()
                }),
            ));
        }
        for (start, h) in handles {
            for (i, values) in h.join().expect("scoring thread panicked")?.into_iter().enumerate()
            {
                maps[start + i] = Some(values);
            }
        }
        Ok(())
    })?;
    for (i, (scene, values)) in test.iter().zip(maps).enumerate() {
        write_pgm(
            &heat_dir.join(format!("test_{i:03}.pgm")),
            scene.height(),
            scene.width(),
            &values.expect("every scene scored"),
        )?;
    }
    println!(
        "eval: aupr {} auroc {} fpr95 {} ({} heatmaps)",
        report.aupr,
        report.auroc,
        report.fpr95,
        test.len()
    );
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let model = load_model(run_dir, cfg.eval.checkpoint)?;
    let test = load_split(run_dir, "test")?;
    if test.is_empty() {
        bail!("no test scenes in the corpus manifest; cannot sweep");
    }
    let curve = threshold_sweep(&model, &test, &cfg.delta_grid())?;
    std::fs::write(run_dir.join("curves.csv"), curve.to_csv())?;
    println!("sweep: {} thresholds", curve.points.len());
    Ok(())
}

fn cmd_pilot(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let corpus = Corpus {
        train: load_split(run_dir, "train")?,
        val: load_split(run_dir, "val")?,
        test: load_split(run_dir, "test")?,
    };
    if corpus.train.is_empty() || corpus.test.is_empty() {
        bail!("pilot needs train and test scenes; run gen-data first");
    }
    let partition = partition_classes(
        cfg.corpus.num_classes,
        cfg.pilot.subsets,
        cfg.seed.wrapping_add(4),
    )?;
    let train_cfg = PilotTrainConfig {
        patch_radius: cfg.model.patch_radius,
        layer_dims: cfg.model.layer_dims.clone(),
        epochs: cfg.pilot.epochs,
        lr: cfg.pilot.lr,
        batch: cfg.pilot.batch,
        alpha: cfg.pilot.alpha,
        seed: cfg.seed.wrapping_add(5),
    };
    let table = pilot_study(&corpus, &partition, &train_cfg)?;
    std::fs::write(run_dir.join("pilot.csv"), table.to_csv())?;
    println!("pilot: {} subsets", table.rows.len());
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let fault = match std::env::var("ASL_GRADCHECK_FAULT") {
        Ok(v) => v
            .trim()
            .parse::<f64>()
            .map_err(|_| anyhow::anyhow!("ASL_GRADCHECK_FAULT must be a float, got `{v}`"))?,
        Err(_) => 0.0,
    };
    let report = run_suite(cfg.gradcheck.graphs, cfg.seed, fault)?;
    let text = format!(
        "graphs_checked = {}\nmax_relative_error = {}\ntolerance = {}\n",
        report.graphs_checked, report.max_relative_error, cfg.gradcheck.tolerance
    );
    std::fs::write(run_dir.join("gradcheck_report.txt"), text)?;
    if report.graphs_checked == 0 {
        eprintln!("gradcheck: warning: no graphs configured; vacuous pass");
        println!("gradcheck: vacuous pass (0 graphs)");
        return Ok(());
    }
    println!(
        "gradcheck: max relative error {} over {} graphs",
        report.max_relative_error, report.graphs_checked
    );
    if report.max_relative_error > cfg.gradcheck.tolerance {
        bail!(
            "gradient check failed: max relative error {} exceeds {}",
            report.max_relative_error,
            cfg.gradcheck.tolerance
        );
    }
    Ok(())
}
