//! Run-directory manifest: config snapshot digest, tool version, stage
//! timestamps, and a content-digest inventory of every artifact file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "run_manifest.txt";
pub const LOCK_NAME: &str = ".asl-lock";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Relative paths of all artifact files under `run_dir`, sorted, excluding
/// the manifest and lock files themselves.
pub fn inventory(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut stack = vec![run_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)
            .with_context(|| format!("cannot list {}", dir.display()))?
        {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(run_dir).unwrap().to_path_buf();
                let name = rel.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name != MANIFEST_NAME && name != LOCK_NAME {
                    files.push(rel);
                }
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Rewrite the manifest after a stage: preserve the stage history, append
/// the new stage line, and re-digest the full file inventory.
pub fn update(run_dir: &Path, config_bytes: &[u8], seed: u64, stage: &str) -> Result<()> {
    let manifest_path = run_dir.join(MANIFEST_NAME);
    let mut stage_lines: Vec<String> = Vec::new();
    if let Ok(existing) = std::fs::read_to_string(&manifest_path) {
        for line in existing.lines() {
            if line.starts_with("stage ") {
                stage_lines.push(line.to_string());
            }
        }
    }
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    stage_lines.push(format!("stage {stage} {ts}"));

    let mut out = String::new();
    writeln!(out, "tool = asl {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(out, "config_sha256 = {}", sha256_hex(config_bytes))?;
    writeln!(out, "seed = {seed}")?;
    for line in &stage_lines {
        writeln!(out, "{line}")?;
    }
    for rel in inventory(run_dir)? {
        let digest = file_digest(&run_dir.join(&rel))?;
        writeln!(out, "file {} {digest}", rel.display())?;
    }
    std::fs::write(&manifest_path, out)
        .with_context(|| format!("cannot write {}", manifest_path.display()))?;
    Ok(())
}

/// Exclusive single-writer lock on a run directory; removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<RunLock> {
        let path = run_dir.join(LOCK_NAME);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(anyhow::anyhow!(
                "run directory {} is locked by another writer ({} exists)",
                run_dir.display(),
                LOCK_NAME
            )),
            Err(e) => Err(e).with_context(|| format!("cannot create lock in {}", run_dir.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
