use crate::error::{invalid, Result};

/// Pixels trimmed from each side when cropping a `src`-sized image that will
/// be resampled to `target`: one sixteenth of the side, never cutting below
/// the target size.
pub fn crop_margin(src: usize, target: usize) -> usize {
    (src / 16).min(src.saturating_sub(target) / 2)
}

pub fn center_crop<P: Copy>(img: &[P], size: usize, margin: usize) -> Vec<P> {
    let out = size - 2 * margin;
    let mut v = Vec::with_capacity(out * out);
    for y in margin..margin + out {
        v.extend_from_slice(&img[y * size + margin..y * size + margin + out]);
    }
    v
}

/// Bilinear resampling with pixel-centre alignment: output pixel `i` samples
/// source coordinate `(i + 0.5) * src / dst - 0.5`, clamped to the border.
pub fn resample_bilinear(img: &[f64], src: usize, dst: usize) -> Vec<f64> {
    if src == dst {
        return img.to_vec();
    }
    let scale = src as f64 / dst as f64;
    let axis: Vec<(usize, usize, f64)> = (0..dst)
        .map(|i| {
            let c = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = c.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, c - lo as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(dst * dst);
    for &(y0, y1, fy) in &axis {
        for &(x0, x1, fx) in &axis {
            let top = img[y0 * src + x0] * (1.0 - fx) + img[y0 * src + x1] * fx;
            let bot = img[y1 * src + x0] * (1.0 - fx) + img[y1 * src + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Nearest-neighbour resampling for label planes, same alignment as
/// [`resample_bilinear`].
pub fn resample_labels(labels: &[u8], src: usize, dst: usize) -> Vec<u8> {
    if src == dst {
        return labels.to_vec();
    }
    let scale = src as f64 / dst as f64;
    let idx: Vec<usize> = (0..dst)
        .map(|i| (((i as f64 + 0.5) * scale) as usize).min(src - 1))
        .collect();
    let mut out = Vec::with_capacity(dst * dst);
    for &y in &idx {
        for &x in &idx {
            out.push(labels[y * src + x]);
        }
    }
    out
}

/// Subtracts the image mean and divides by the (population) standard
/// deviation.
pub fn z_normalize(img: &[f64]) -> Result<Vec<f64>> {
    if img.is_empty() || img.iter().any(|v| !v.is_finite()) {
        return Err(invalid("image is empty or not finite"));
    }
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    let var = img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 1e-12) {
        return Err(invalid("constant image has zero standard deviation"));
    }
    Ok(img.iter().map(|v| (v - mean) / sd).collect())
}

/// Crop, bilinear resample to `target`, then z-normalize.
pub fn preprocess(img: &[f64], size: usize, target: usize) -> Result<Vec<f64>> {
    if img.len() != size * size {
        return Err(invalid(format!("image has {} pixels, expected {size}x{size}", img.len())));
    }
    if target == 0 || target > size {
        return Err(invalid(format!("target size {target} exceeds source size {size}")));
    }
    let m = crop_margin(size, target);
    let cropped = center_crop(img, size, m);
    z_normalize(&resample_bilinear(&cropped, size - 2 * m, target))
}

/// Geometric part of [`preprocess`] applied to a label plane.
pub fn preprocess_labels(labels: &[u8], size: usize, target: usize) -> Vec<u8> {
    let m = crop_margin(size, target);
    resample_labels(&center_crop(labels, size, m), size - 2 * m, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn stats(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
    }

    #[test]
    fn normalized_moments() {
        let mut rng = rng_from_seed(1);
        let img: Vec<f64> = (0..72 * 72).map(|_| rng.random_range(0.0..3.0)).collect();
        let out = preprocess(&img, 72, 64).unwrap();
        assert_eq!(out.len(), 64 * 64);
        let (m, s) = stats(&out);
        assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_resample_is_constant() {
        let img = vec![2.5; 40 * 40];
        assert!(resample_bilinear(&img, 40, 17).iter().all(|&v| (v - 2.5).abs() < 1e-12));
        assert!(preprocess(&img, 40, 32).is_err());
    }

    #[test]
    fn ramp_halving_is_averaged_ramp() {
        // f(y, x) = 3x + 2y + 1; averaging pixel pairs gives f at the midpoints.
        let n = 16;
        let img: Vec<f64> = (0..n * n).map(|i| 3.0 * (i % n) as f64 + 2.0 * (i / n) as f64 + 1.0).collect();
        let out = resample_bilinear(&img, n, n / 2);
        for y in 0..n / 2 {
            for x in 0..n / 2 {
                let want = 3.0 * (2 * x) as f64 + 1.5 + 2.0 * (2 * y) as f64 + 1.0 + 1.0;
                assert!((out[y * n / 2 + x] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn crop_respects_target() {
        assert_eq!(crop_margin(72, 64), 4);
        assert_eq!(crop_margin(64, 64), 0);
        assert_eq!(crop_margin(256, 64), 16);
        let labels: Vec<u8> = (0..72 * 72).map(|i| (i % 5) as u8).collect();
        assert_eq!(preprocess_labels(&labels, 72, 64).len(), 64 * 64);
    }

    proptest! {
        #[test]
        fn idempotent_on_normalized_images(seed in 0u64..1000) {
            let mut rng = rng_from_seed(seed);
            let img: Vec<f64> = (0..32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let once = preprocess(&img, 32, 32).unwrap();
            let twice = preprocess(&once, 32, 32).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }
    }
}
