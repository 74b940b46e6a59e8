//! Binary PGM (P5) output for frame dumps.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::Error;
use crate::tensor::Tensor;

/// Writes one grayscale frame (H, W) or (1, H, W) as binary PGM, maxval 255.
/// Values are clamped to [0, 1] and scaled.
pub fn write_pgm(path: &Path, frame: &Tensor) -> Result<(), Error> {
    let (h, w) = match frame.shape.as_slice() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::Runtime(format!(
                "pgm: expected (H,W) or (1,H,W) frame, got {other:?}"
            )))
        }
    };
    let mut file = File::create(path)?;
    write!(file, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = frame
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    file.write_all(&bytes)?;
    Ok(())
}
