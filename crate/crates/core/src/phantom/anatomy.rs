use rand::Rng;

use crate::error::{invalid, Result};
use crate::tensor::rng_from_seed;

pub const BACKGROUND: u8 = 0;
pub const FEMUR: u8 = 1;
pub const FEMORAL_CARTILAGE: u8 = 2;
pub const TIBIA: u8 = 3;
pub const TIBIAL_CARTILAGE: u8 = 4;
pub const NUM_CLASSES: usize = 5;

/// Largest cartilage band thickness in pixels. Bands are grown by Euclidean
/// distance from the bone, so this bounds the cartilage-to-bone distance.
pub const MAX_CARTILAGE_PX: u32 = 2;

/// Per-pixel class labels of one synthetic slice.
#[derive(Clone, Debug, PartialEq)]
pub struct AnatomyMap {
    pub size: usize,
    /// Millimetres per pixel (isotropic).
    pub spacing: f64,
    pub seed: u64,
    /// Row-major labels in `0..NUM_CLASSES`.
    pub labels: Vec<u8>,
}

impl AnatomyMap {
    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.size + x]
    }

    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

#[derive(Clone, Copy, Debug)]
struct Bone {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    /// Superellipse exponent; larger values flatten the joint surface.
    power: f64,
}

impl Bone {
    /// Local frame coordinates `(u, v)` normalized by the semi-axes, with `v`
    /// pointing down in image space before rotation.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        ((c * dx + s * dy) / self.a, (-s * dx + c * dy) / self.b)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        u.abs().powf(self.power) + v.abs().powf(self.power) <= 1.0
    }

    fn scaled(&self, k: f64) -> Self {
        Self {
            a: self.a * k,
            b: self.b * k,
            ..*self
        }
    }
}

/// Subject-level geometry; individual slices scale the bones with a smooth
/// through-plane profile.
#[derive(Clone, Copy, Debug)]
pub struct SubjectGeometry {
    size: usize,
    femur: Bone,
    tibia: Bone,
    femoral_thickness: u32,
    tibial_thickness: u32,
    /// Fraction of each bone's width lined with cartilage.
    coverage: f64,
}

impl SubjectGeometry {
    pub fn sample(seed: u64, size: usize) -> Result<Self> {
        if size < 32 {
            return Err(invalid(format!(
                "anatomy size {size} is too small to fit both bones (minimum 32)"
            )));
        }
        let mut rng = rng_from_seed(seed);
        let s = size as f64;
        let cx = s / 2.0 + rng.random_range(-0.04..0.04) * s;
        let gap_y = s / 2.0 + rng.random_range(-0.03..0.03) * s;
        let half_gap = rng.random_range(0.035..0.05) * s;
        let fb = rng.random_range(0.17..0.22) * s;
        let tb = rng.random_range(0.14..0.18) * s;
        let femur = Bone {
            cx: cx + rng.random_range(-0.02..0.02) * s,
            cy: gap_y - half_gap - fb,
            a: rng.random_range(0.27..0.33) * s,
            b: fb,
            angle: rng.random_range(-0.12..0.12),
            power: 2.0,
        };
        let tibia = Bone {
            cx: cx + rng.random_range(-0.02..0.02) * s,
            cy: gap_y + half_gap + tb,
            a: rng.random_range(0.26..0.31) * s,
            b: tb,
            angle: rng.random_range(-0.08..0.08),
            power: 2.6,
        };
        Ok(Self {
            size,
            femur,
            tibia,
            femoral_thickness: rng.random_range(1..=MAX_CARTILAGE_PX),
            tibial_thickness: rng.random_range(1..=MAX_CARTILAGE_PX),
            coverage: rng.random_range(0.6..0.8),
        })
    }

    /// Rasterizes the slice at through-plane position `t` in `[0, 1]`;
    /// bones are largest at the centre slice.
    pub fn slice(&self, t: f64, spacing: f64, seed: u64) -> AnatomyMap {
        let k = 0.85 + 0.15 * (std::f64::consts::PI * t.clamp(0.0, 1.0)).sin();
        let femur = self.femur.scaled(k);
        let tibia = self.tibia.scaled(k);
        let n = self.size;
        let mut labels = vec![BACKGROUND; n * n];
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64, y as f64);
                if femur.contains(px, py) {
                    labels[y * n + x] = FEMUR;
                } else if tibia.contains(px, py) {
                    labels[y * n + x] = TIBIA;
                }
            }
        }
        let bands = [
            (femur, FEMUR, FEMORAL_CARTILAGE, self.femoral_thickness, 1.0),
            (tibia, TIBIA, TIBIAL_CARTILAGE, self.tibial_thickness, -1.0),
        ];
        let bone_labels = labels.clone();
        for (bone, bone_label, cart, thick, facing) in bands {
            let r = thick as isize;
            for y in 0..n {
                for x in 0..n {
                    if labels[y * n + x] != BACKGROUND {
                        continue;
                    }
                    let (u, v) = bone.local(x as f64, y as f64);
                    // gap-facing half of the bone, central part only
                    if v * facing <= 0.0 || u.abs() > self.coverage {
                        continue;
                    }
                    if near(&bone_labels, n, x, y, r, bone_label) {
                        labels[y * n + x] = cart;
                    }
                }
            }
        }
        AnatomyMap {
            size: n,
            spacing,
            seed,
            labels,
        }
    }
}

/// Whether a pixel labelled `target` lies within Euclidean distance `r`.
fn near(labels: &[u8], n: usize, x: usize, y: usize, r: isize, target: u8) -> bool {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy < 0 || xx < 0 || yy >= n as isize || xx >= n as isize {
                continue;
            }
            if labels[yy as usize * n + xx as usize] == target {
                return true;
            }
        }
    }
    false
}

/// A single centre slice for `seed`.
pub fn generate_anatomy(seed: u64, size: usize, spacing: f64) -> Result<AnatomyMap> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(invalid(format!("pixel spacing {spacing} must be positive")));
    }
    Ok(SubjectGeometry::sample(seed, size)?.slice(0.5, spacing, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn within(map: &AnatomyMap, x: usize, y: usize, target: u8) -> bool {
        // exhaustive scan, independent of the band-growing code
        let n = map.size;
        (0..n).any(|yy| {
            (0..n).any(|xx| {
                let d2 = (xx as f64 - x as f64).powi(2) + (yy as f64 - y as f64).powi(2);
                d2 <= 4.0 && map.label(yy, xx) == target
            })
        })
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_anatomy(4, 64, 0.5).unwrap(), generate_anatomy(4, 64, 0.5).unwrap());
        assert_ne!(generate_anatomy(4, 64, 0.5).unwrap(), generate_anatomy(5, 64, 0.5).unwrap());
    }

    #[test]
    fn too_small_rejected() {
        assert!(generate_anatomy(0, 31, 0.5).is_err());
        assert!(generate_anatomy(0, 64, 0.0).is_err());
    }

    #[test]
    fn histogram_and_adjacency_over_seeds() {
        for seed in 0..100 {
            let m = generate_anatomy(seed, 48, 0.5).unwrap();
            let h = m.histogram();
            assert!(h.iter().all(|&c| c > 0), "seed {seed}: {h:?}");
            assert!(((h[2] + h[4]) as f64) < 0.2 * (h[1] + h[3]) as f64, "seed {seed}: {h:?}");
            assert!(h[0] > m.labels.len() / 2, "background must be the majority");
            for y in 0..m.size {
                for x in 0..m.size {
                    match m.label(y, x) {
                        FEMORAL_CARTILAGE => assert!(within(&m, x, y, FEMUR)),
                        TIBIAL_CARTILAGE => assert!(within(&m, x, y, TIBIA)),
                        _ => {}
                    }
                }
            }
        }
    }

    #[test]
    fn slices_vary_through_plane() {
        let g = SubjectGeometry::sample(3, 64).unwrap();
        let edge = g.slice(0.0, 0.5, 0).histogram();
        let mid = g.slice(0.5, 0.5, 0).histogram();
        assert!(mid[1] > edge[1] && mid[3] > edge[3]);
    }
}
