use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::anatomy::{AnatomyMap, NUM_CLASSES};
use crate::error::{invalid, Error, Result};
use crate::tensor::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StyleId {
    /// Fat-suppressed gradient echo: dark bone, bright cartilage.
    Reference,
    /// Proton-density-like: bright bone, dark cartilage.
    TargetA,
    /// T2-like: low signal overall.
    TargetB,
}

impl StyleId {
    pub fn name(self) -> &'static str {
        match self {
            StyleId::Reference => "reference",
            StyleId::TargetA => "target_a",
            StyleId::TargetB => "target_b",
        }
    }
}

impl fmt::Display for StyleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StyleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(StyleId::Reference),
            "target_a" => Ok(StyleId::TargetA),
            "target_b" => Ok(StyleId::TargetB),
            other => Err(invalid(format!("unknown style {other:?}"))),
        }
    }
}

/// Intensity model of one image domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    pub id: StyleId,
    /// Mean intensity per class label.
    pub means: [f64; NUM_CLASSES],
    /// Peak deviation of the multiplicative bias field from 1.
    pub bias_amplitude: f64,
    pub noise_sigma: f64,
}

impl DomainStyle {
    pub fn preset(id: StyleId) -> Self {
        //                      bg    femur  f.cart tibia  t.cart
        let means = match id {
            StyleId::Reference => [0.45, 0.15, 0.95, 0.25, 0.82],
            StyleId::TargetA => [0.35, 0.90, 0.08, 0.75, 0.18],
            StyleId::TargetB => [0.15, 0.22, 0.42, 0.30, 0.50],
        };
        Self {
            id,
            means,
            bias_amplitude: 0.1,
            noise_sigma: 0.03,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !(self.bias_amplitude >= 0.0 && self.bias_amplitude < 1.0) {
            return Err(invalid("style needs noise sigma >= 0 and bias amplitude in [0, 1)"));
        }
        for i in 0..NUM_CLASSES {
            if !self.means[i].is_finite() {
                return Err(invalid(format!("style mean for class {i} is not finite")));
            }
            for j in 0..i {
                if self.means[i] == self.means[j] {
                    return Err(invalid(format!("style means for classes {j} and {i} coincide")));
                }
            }
        }
        Ok(())
    }
}

/// Class-mean lookup times a smooth bias field plus Gaussian noise.
///
/// The bias field is `1 + amp * (cos(p1) + cos(p2)) / 2` with two plane waves
/// of at most one cycle per image and uniformly random phase, so its
/// expectation over seeds is exactly 1.
pub fn render_image(anatomy: &AnatomyMap, style: &DomainStyle, seed: u64) -> Result<Vec<f64>> {
    style.validate()?;
    let n = anatomy.size;
    let mut rng = rng_from_seed(seed);
    let mut waves = [(0.0, 0.0, 0.0); 2];
    for w in &mut waves {
        let theta = rng.random_range(0.0..TAU);
        let freq = rng.random_range(0.3..1.0) / n as f64;
        *w = (freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..TAU));
    }
    let noise = Normal::new(0.0, style.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let mut img = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let mean = style.means[anatomy.label(y, x) as usize];
            let field: f64 = waves
                .iter()
                .map(|&(fx, fy, phase)| (TAU * (fx * x as f64 + fy * y as f64) + phase).cos())
                .sum::<f64>()
                / 2.0;
            let bias = 1.0 + style.bias_amplitude * field;
            let eps = if style.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            img.push(mean * bias + eps);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::anatomy::generate_anatomy;

    fn class_means(img: &[f64], map: &AnatomyMap) -> [f64; NUM_CLASSES] {
        let mut s = [0.0; NUM_CLASSES];
        let mut c = [0usize; NUM_CLASSES];
        for (v, &l) in img.iter().zip(&map.labels) {
            s[l as usize] += v;
            c[l as usize] += 1;
        }
        std::array::from_fn(|i| s[i] / c[i] as f64)
    }

    #[test]
    fn noiseless_is_lookup() {
        let map = generate_anatomy(1, 48, 0.5).unwrap();
        let style = DomainStyle {
            bias_amplitude: 0.0,
            noise_sigma: 0.0,
            ..DomainStyle::preset(StyleId::Reference)
        };
        let img = render_image(&map, &style, 9).unwrap();
        for (v, &l) in img.iter().zip(&map.labels) {
            assert_eq!(*v, style.means[l as usize]);
        }
    }

    #[test]
    fn cartilage_ordering_flips_between_styles() {
        let r = DomainStyle::preset(StyleId::Reference).means;
        let a = DomainStyle::preset(StyleId::TargetA).means;
        let brightest = |m: &[f64; 5]| (0..5).max_by(|&i, &j| m[i].total_cmp(&m[j])).unwrap();
        let darkest = |m: &[f64; 5]| (0..5).min_by(|&i, &j| m[i].total_cmp(&m[j])).unwrap();
        assert_eq!(brightest(&r), 2);
        assert_eq!(darkest(&a), 2);
        // and on rendered pixels
        let map = generate_anatomy(2, 48, 0.5).unwrap();
        let mr = class_means(&render_image(&map, &DomainStyle::preset(StyleId::Reference), 1).unwrap(), &map);
        let ma = class_means(&render_image(&map, &DomainStyle::preset(StyleId::TargetA), 1).unwrap(), &map);
        assert!(mr[2] > mr[0] && mr[2] > mr[1] && mr[2] > mr[3]);
        assert!(ma[2] < ma[0] && ma[2] < ma[1] && ma[2] < ma[3]);
    }

    #[test]
    fn monte_carlo_means_match_table() {
        let map = generate_anatomy(3, 32, 0.5).unwrap();
        let style = DomainStyle::preset(StyleId::TargetA);
        let mut acc = vec![0.0; map.labels.len()];
        let runs = 1000;
        for s in 0..runs {
            for (a, v) in acc.iter_mut().zip(render_image(&map, &style, 1000 + s).unwrap()) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= runs as f64);
        let m = class_means(&acc, &map);
        for c in 0..NUM_CLASSES {
            let rel = (m[c] - style.means[c]).abs() / style.means[c];
            assert!(rel < 0.02, "class {c}: {} vs {}", m[c], style.means[c]);
        }
    }

    #[test]
    fn invalid_styles_rejected() {
        let map = generate_anatomy(1, 32, 0.5).unwrap();
        let mut s = DomainStyle::preset(StyleId::Reference);
        s.means[3] = s.means[1];
        assert!(render_image(&map, &s, 0).is_err());
        let s = DomainStyle {
            noise_sigma: -1.0,
            ..DomainStyle::preset(StyleId::Reference)
        };
        assert!(render_image(&map, &s, 0).is_err());
        assert_eq!("target_b".parse::<StyleId>().unwrap(), StyleId::TargetB);
    }

    #[test]
    fn noiseless_intensity_identifies_label() {
        let map = generate_anatomy(4, 48, 0.5).unwrap();
        let style = DomainStyle {
            bias_amplitude: 0.0,
            noise_sigma: 0.0,
            ..DomainStyle::preset(StyleId::TargetB)
        };
        let img = render_image(&map, &style, 0).unwrap();
        for (v, &l) in img.iter().zip(&map.labels) {
            let decoded = style.means.iter().position(|m| m == v).unwrap();
            assert_eq!(decoded, l as usize);
        }
    }
}
