//! Binary PGM (P5, maxval 255) heatmap export.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

/// Write `values` (row-major, expected in [0, 1]) as an 8-bit grayscale
/// image; values are clamped before scaling.
pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    anyhow::ensure!(values.len() == height * width, "value count does not match dimensions");
    let mut out = Vec::with_capacity(32 + values.len());
    write!(out, "P5\n{width} {height}\n255\n")?;
    for &v in values {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&path, 2, 3, &[0.0, 0.5, 1.0, 2.0, -1.0, 0.25]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 128, 255, 255, 0, 64]);
    }

    #[test]
    fn wrong_length_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_pgm(&dir.path().join("y.pgm"), 2, 2, &[0.0]).is_err());
    }
}
