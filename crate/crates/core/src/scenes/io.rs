//! Scene file format and the plain-text corpus manifest.
//!
//! Scene file layout, all integers little-endian:
//!
//! ```text
//! offset 0   magic "ASEG"
//! offset 4   version byte (1)
//! offset 5   u32 ×4: C, H, W, N
//! offset 21  features: C·H·W f64, row-major, channel-major
//! then       labels:   H·W u16 (ANOMALY_SENTINEL = 65535)
//! then       roles:    H·W bytes in {0, 1, 2}
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::gradcore::Tensor;

use super::{Role, Scene};

const MAGIC: &[u8; 4] = b"ASEG";
const VERSION: u8 = 1;

/// Maximum extent accepted for any dimension when reading, to catch
/// corrupted headers before allocating.
const MAX_EXTENT: u32 = 1 << 16;

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("byte {offset}: bad magic (expected \"ASEG\")")]
    BadMagic { offset: u64 },
    #[error("byte {offset}: unsupported version {version}")]
    BadVersion { offset: u64, version: u8 },
    #[error("byte {offset}: truncated file")]
    Truncated { offset: u64 },
    #[error("byte {offset}: dimension overflow ({detail})")]
    ShapeOverflow { offset: u64, detail: String },
    #[error("byte {offset}: invalid payload ({detail})")]
    BadPayload { offset: u64, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {detail}")]
    BadManifest { line: usize, detail: String },
}

struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn read_exact_at(&mut self, buf: &mut [u8]) -> Result<(), SceneIoError> {
        let start = self.offset;
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(SceneIoError::Truncated { offset: start })
            }
            Err(e) => Err(e.into()),
        }
    }

    fn u32(&mut self) -> Result<u32, SceneIoError> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<(), SceneIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    for dim in [
        scene.channels() as u32,
        scene.height() as u32,
        scene.width() as u32,
        scene.num_classes as u32,
    ] {
        w.write_all(&dim.to_le_bytes())?;
    }
    for &v in scene.features.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    for &label in &scene.labels {
        w.write_all(&label.to_le_bytes())?;
    }
    for &role in &scene.role {
        w.write_all(&[role as u8])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<Scene, SceneIoError> {
    let mut r = Counted { inner: BufReader::new(File::open(path)?), offset: 0 };

    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic)?;
    if &magic != MAGIC {
        return Err(SceneIoError::BadMagic { offset: 0 });
    }
    let mut version = [0u8; 1];
    r.read_exact_at(&mut version)?;
    if version[0] != VERSION {
        return Err(SceneIoError::BadVersion { offset: 4, version: version[0] });
    }
    let header_offset = r.offset;
    let c = r.u32()?;
    let h = r.u32()?;
    let w = r.u32()?;
    let n = r.u32()?;
    for (name, v) in [("C", c), ("H", h), ("W", w), ("N", n)] {
        if v == 0 || v > MAX_EXTENT {
            return Err(SceneIoError::ShapeOverflow {
                offset: header_offset,
                detail: format!("{name} = {v}"),
            });
        }
    }
    let (c, h, w, n) = (c as usize, h as usize, w as usize, n as usize);
    let hw = h * w;

    let mut features = vec![0.0f64; c * hw];
    for v in features.iter_mut() {
        let at = r.offset;
        let mut b = [0u8; 8];
        r.read_exact_at(&mut b)?;
        *v = f64::from_le_bytes(b);
        if !v.is_finite() {
            return Err(SceneIoError::BadPayload {
                offset: at,
                detail: "non-finite feature".into(),
            });
        }
    }
    let mut labels = vec![0u16; hw];
    for v in labels.iter_mut() {
        let mut b = [0u8; 2];
        r.read_exact_at(&mut b)?;
        *v = u16::from_le_bytes(b);
    }
    let mut role = Vec::with_capacity(hw);
    for _ in 0..hw {
        let at = r.offset;
        let mut b = [0u8; 1];
        r.read_exact_at(&mut b)?;
        role.push(Role::from_byte(b[0]).ok_or(SceneIoError::BadPayload {
            offset: at,
            detail: format!("invalid role byte {}", b[0]),
        })?);
    }

    let scene = Scene {
        features: Tensor::new(vec![c, h, w], features).map_err(|_| SceneIoError::BadPayload {
            offset: header_offset,
            detail: "feature tensor rejected".into(),
        })?,
        labels,
        role,
        num_classes: n,
    };
    Ok(scene)
}

/// One manifest line: split name, scene path, and for auxiliary scenes the
/// adversarial class used by MGU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: String,
    pub path: String,
    pub adversarial_class: Option<usize>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), SceneIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        match e.adversarial_class {
            Some(c) => writeln!(w, "{} {} {}", e.split, e.path, c)?,
            None => writeln!(w, "{} {}", e.split, e.path)?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, SceneIoError> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(SceneIoError::BadManifest {
                line: i + 1,
                detail: format!("expected 2 or 3 fields, got {}", fields.len()),
            });
        }
        let adversarial_class = match fields.get(2) {
            Some(f) => Some(f.parse().map_err(|_| SceneIoError::BadManifest {
                line: i + 1,
                detail: format!("bad adversarial class {f:?}"),
            })?),
            None => None,
        };
        entries.push(ManifestEntry {
            split: fields[0].to_string(),
            path: fields[1].to_string(),
            adversarial_class,
        });
    }
    Ok(entries)
}
