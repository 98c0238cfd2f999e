//! 8-bit previews of network-unit images.

use std::path::Path;

use adverseg_core::Scalar;
use image::{GrayImage, Luma};

use crate::error::CliResult;

/// Linear map of `(-1, 1)` onto `0..=255`, clipping outside values.
pub fn to_gray(v: f64) -> u8 {
    let g = ((v + 1.0) * 0.5 * 255.0).round();
    if g.is_nan() {
        0
    } else {
        g.clamp(0.0, 255.0) as u8
    }
}

pub fn write_preview<T: Scalar>(path: &Path, pixels: &[T], width: usize, height: usize) -> CliResult<()> {
    let mut img = GrayImage::new(width as u32, height as u32);
    for (i, v) in pixels.iter().enumerate() {
        img.put_pixel((i % width) as u32, (i / width) as u32, Luma([to_gray(v.as_f64())]));
    }
    img.save(path).map_err(anyhow::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_hits_the_ends_and_clips() {
        assert_eq!(to_gray(-1.0), 0);
        assert_eq!(to_gray(1.0), 255);
        assert_eq!(to_gray(0.0), 128);
        assert_eq!(to_gray(-3.0), 0);
        assert_eq!(to_gray(7.0), 255);
        assert_eq!(to_gray(f64::NAN), 0);
    }
}
