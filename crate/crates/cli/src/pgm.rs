use std::io::Write;
use std::path::Path;

use anyhow::{ensure, Result};

/// Writes a `side x side` grayscale image with values in `[0, 1]` as binary
/// PGM (P5, maxval 255).
pub fn write(path: &Path, side: usize, pixels: &[f32]) -> Result<()> {
    ensure!(pixels.len() == side * side, "{} pixels do not form a {side}x{side} image", pixels.len());
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}
