use crate::error::{invalid, Error, Result};

/// Foreground pixels of one class on a `height x width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    /// Millimetres per pixel.
    pub spacing: f64,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, spacing: f64, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid(format!(
                "mask has {} pixels, expected {width}x{height}",
                data.len()
            )));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(invalid(format!("spacing {spacing} must be positive")));
        }
        Ok(Self {
            width,
            height,
            spacing,
            data,
        })
    }

    /// Pixels of `labels` equal to `class`.
    pub fn from_labels(labels: &[u8], width: usize, height: usize, class: u8, spacing: f64) -> Result<Self> {
        Self::new(width, height, spacing, labels.iter().map(|&l| l == class).collect())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.contains(&true)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub(crate) fn check_pair(&self, other: &Self) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::ShapeMismatch {
                layer: "mask pair".into(),
                expected: format!("{}x{}", self.height, self.width),
                actual: format!("{}x{}", other.height, other.width),
            });
        }
        Ok(())
    }
}

/// `(|S ∩ R|, |S|, |R|)`.
pub fn overlap_counts(s: &BinaryMask, r: &BinaryMask) -> Result<(usize, usize, usize)> {
    s.check_pair(r)?;
    let mut inter = 0;
    let mut cs = 0;
    let mut cr = 0;
    for (&a, &b) in s.data.iter().zip(&r.data) {
        inter += usize::from(a && b);
        cs += usize::from(a);
        cr += usize::from(b);
    }
    Ok((inter, cs, cr))
}

/// Dice from counts; two empty masks agree perfectly.
pub fn dice_from_counts(inter: usize, cs: usize, cr: usize) -> f64 {
    if cs + cr == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (cs + cr) as f64
    }
}

/// Volumetric overlap error from counts; two empty masks give 0.
pub fn voe_from_counts(inter: usize, cs: usize, cr: usize) -> f64 {
    let union = cs + cr - inter;
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// `2|S ∩ R| / (|S| + |R|)`.
pub fn dice(s: &BinaryMask, r: &BinaryMask) -> Result<f64> {
    let (i, a, b) = overlap_counts(s, r)?;
    Ok(dice_from_counts(i, a, b))
}

/// `1 - |S ∩ R| / |S ∪ R|`.
pub fn voe(s: &BinaryMask, r: &BinaryMask) -> Result<f64> {
    let (i, a, b) = overlap_counts(s, r)?;
    Ok(voe_from_counts(i, a, b))
}

/// Per-class correct (`n_ii`) and total (`t_i`) pixel counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub correct: Vec<u64>,
    pub total: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            correct: vec![0; classes],
            total: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch {
                layer: "label pair".into(),
                expected: truth.len().to_string(),
                actual: pred.len().to_string(),
            });
        }
        for (&p, &t) in pred.iter().zip(truth) {
            let t = t as usize;
            if t >= self.total.len() {
                return Err(invalid(format!("label {t} outside 0..{}", self.total.len())));
            }
            self.total[t] += 1;
            self.correct[t] += u64::from(p as usize == t);
        }
        Ok(())
    }

    /// `Σ n_ii / Σ t_i` over classes present in the truth and not excluded.
    pub fn accuracy(&self, excluded: &[u8]) -> f64 {
        let mut num = 0;
        let mut den = 0;
        for c in 0..self.total.len() {
            if self.total[c] == 0 || excluded.contains(&(c as u8)) {
                continue;
            }
            num += self.correct[c];
            den += self.total[c];
        }
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }
}

/// Pixel accuracy of `pred` against `truth` with its confusion counts.
pub fn per_pixel_accuracy(pred: &[u8], truth: &[u8], classes: usize) -> Result<(f64, ConfusionCounts)> {
    let mut c = ConfusionCounts::new(classes);
    c.add(pred, truth)?;
    Ok((c.accuracy(&[]), c))
}
