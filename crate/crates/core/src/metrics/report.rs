//! Per-subject scores and their summary tables.

use std::fmt::Write as _;

use super::overlap::{dice_from_counts, voe_from_counts, BinaryMask};
use super::surface::surface_distance_sum;
use super::wilcoxon::{wilcoxon_signed_rank, WilcoxonResult};
use crate::error::{invalid, Result};
use crate::phantom::{FEMORAL_CARTILAGE, FEMUR, NUM_CLASSES, TIBIA, TIBIAL_CARTILAGE};

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "femur",
    "femoral_cartilage",
    "tibia",
    "tibial_cartilage",
];

/// Classes scored in reports.
pub const EVAL_CLASSES: [u8; 4] = [FEMUR, FEMORAL_CARTILAGE, TIBIA, TIBIAL_CARTILAGE];

/// Classes that also get a VOE column.
pub const VOE_CLASSES: [u8; 2] = [FEMORAL_CARTILAGE, TIBIAL_CARTILAGE];

pub const REPORT_HEADER: &str = "dataset,method,class,DC_mean,DC_std,VOE_mean,VOE_std,ASSD_mean_mm,ASSD_std_mm";
pub const SUBJECT_HEADER: &str = "dataset,method,subject,class,DC,VOE,ASSD_mm";
pub const PVALUE_HEADER: &str = "class,metric,method_a,method_b,n,w_plus,p,exact,degenerate,significant";

/// Evaluation choices written as `#` lines above every report table.
pub const REPORT_NOTES: [&str; 4] = [
    "VOE region: full mask per cartilage class (no central-slice ROI)",
    "FCN-score classifier: depth-2 R-Net segmentation head trained on real target slices",
    "ASSD: boundary distances summed over slices where both masks are non-empty",
    "std: sample standard deviation across subjects",
];

pub fn report_preamble() -> String {
    REPORT_NOTES.iter().map(|n| format!("# {n}\n")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Dice,
    Voe,
    Assd,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Dice, Metric::Voe, Metric::Assd];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "DC",
            Metric::Voe => "VOE",
            Metric::Assd => "ASSD_mm",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub class: u8,
    pub dice: f64,
    /// Cartilage classes only.
    pub voe: Option<f64>,
    /// `None` when no slice has both masks non-empty.
    pub assd: Option<f64>,
}

impl ClassScore {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Dice => Some(self.dice),
            Metric::Voe => self.voe,
            Metric::Assd => self.assd,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectScores {
    pub subject: String,
    pub classes: Vec<ClassScore>,
}

impl SubjectScores {
    pub fn class(&self, c: u8) -> Option<&ClassScore> {
        self.classes.iter().find(|s| s.class == c)
    }
}

/// Volumetric scores of one subject from its predicted and true slices.
pub fn score_subject(
    subject: &str,
    pred: &[Vec<u8>],
    truth: &[Vec<u8>],
    size: usize,
    spacing: f64,
) -> Result<SubjectScores> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(invalid(format!(
            "subject {subject}: {} predicted slices for {} true slices",
            pred.len(),
            truth.len()
        )));
    }
    let mut classes = Vec::with_capacity(EVAL_CLASSES.len());
    for &c in &EVAL_CLASSES {
        let (mut inter, mut cs, mut cr) = (0, 0, 0);
        let (mut dist, mut boundary) = (0.0, 0);
        for (p, t) in pred.iter().zip(truth) {
            let s = BinaryMask::from_labels(p, size, size, c, spacing)?;
            let r = BinaryMask::from_labels(t, size, size, c, spacing)?;
            let (i, a, b) = super::overlap_counts(&s, &r)?;
            inter += i;
            cs += a;
            cr += b;
            if a > 0 && b > 0 {
                let (sum, n) = surface_distance_sum(&s, &r)?;
                dist += sum;
                boundary += n;
            }
        }
        classes.push(ClassScore {
            class: c,
            dice: dice_from_counts(inter, cs, cr),
            voe: VOE_CLASSES.contains(&c).then(|| voe_from_counts(inter, cs, cr)),
            assd: (boundary > 0).then(|| dist / boundary as f64),
        });
    }
    Ok(SubjectScores {
        subject: subject.to_string(),
        classes,
    })
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    /// `None` for an empty sample; a single value has std 0.
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.10}")).unwrap_or_default()
}

/// Scores of one method on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub dataset: String,
    pub method: String,
    pub subjects: Vec<SubjectScores>,
    pub fcn_score: Option<Summary>,
}

impl MetricsReport {
    pub fn new(dataset: &str, method: &str, subjects: Vec<SubjectScores>) -> Self {
        Self {
            dataset: dataset.to_string(),
            method: method.to_string(),
            subjects,
            fcn_score: None,
        }
    }

    /// Per-subject values of `metric` for `class`, `None` where undefined.
    pub fn values(&self, class: u8, metric: Metric) -> Vec<Option<f64>> {
        self.subjects
            .iter()
            .map(|s| s.class(class).and_then(|c| c.get(metric)))
            .collect()
    }

    pub fn summary(&self, class: u8, metric: Metric) -> Option<Summary> {
        let v: Vec<f64> = self.values(class, metric).into_iter().flatten().collect();
        Summary::of(&v)
    }

    /// Notes, header and one row per scored class.
    pub fn to_csv(&self) -> String {
        let mut out = report_preamble();
        if let Some(f) = self.fcn_score {
            let _ = writeln!(out, "# FCN-score: {:.10} +- {:.10} (n={})", f.mean, f.std, f.n);
        }
        out.push_str(REPORT_HEADER);
        out.push('\n');
        for &c in &EVAL_CLASSES {
            let _ = write!(out, "{},{},{}", self.dataset, self.method, CLASS_NAMES[c as usize]);
            for m in Metric::ALL {
                let s = self.summary(c, m);
                let _ = write!(out, ",{},{}", cell(s.map(|s| s.mean)), cell(s.map(|s| s.std)));
            }
            out.push('\n');
        }
        out
    }

    pub fn subjects_csv(&self) -> String {
        let mut out = format!("{SUBJECT_HEADER}\n");
        for s in &self.subjects {
            for c in &s.classes {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    self.dataset,
                    self.method,
                    s.subject,
                    CLASS_NAMES[c.class as usize],
                    cell(Some(c.dice)),
                    cell(c.voe),
                    cell(c.assd)
                );
            }
        }
        out
    }
}

/// Paired test of two reports on one class and metric. Subjects must match;
/// pairs where either value is undefined are dropped.
pub fn compare(a: &MetricsReport, b: &MetricsReport, class: u8, metric: Metric) -> Result<WilcoxonResult> {
    check_subjects(a, b)?;
    let (x, y): (Vec<f64>, Vec<f64>) = a
        .values(class, metric)
        .into_iter()
        .zip(b.values(class, metric))
        .filter_map(|(u, v)| Some((u?, v?)))
        .unzip();
    wilcoxon_signed_rank(&x, &y)
}

/// Wilcoxon p-values for every method pair, class and metric. Untestable
/// comparisons (too few pairs) are written with an `NA` p-value.
pub fn pvalue_csv(reports: &[MetricsReport]) -> Result<String> {
    let mut out = format!("{PVALUE_HEADER}\n");
    for (i, a) in reports.iter().enumerate() {
        for b in &reports[i + 1..] {
            check_subjects(a, b)?;
            for &c in &EVAL_CLASSES {
                for m in Metric::ALL {
                    if m == Metric::Voe && !VOE_CLASSES.contains(&c) {
                        continue;
                    }
                    let name = CLASS_NAMES[c as usize];
                    match compare(a, b, c, m) {
                        Ok(r) => {
                            let _ = writeln!(
                                out,
                                "{name},{},{},{},{},{},{:.6e},{},{},{}",
                                m.name(),
                                a.method,
                                b.method,
                                r.n,
                                r.w_plus,
                                r.p,
                                r.exact,
                                r.degenerate,
                                r.significant()
                            );
                        }
                        Err(_) => {
                            let _ = writeln!(out, "{name},{},{},{},,,NA,,,", m.name(), a.method, b.method);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn check_subjects(a: &MetricsReport, b: &MetricsReport) -> Result<()> {
    let same = a.subjects.len() == b.subjects.len()
        && a.subjects.iter().zip(&b.subjects).all(|(x, y)| x.subject == y.subject);
    if same {
        Ok(())
    } else {
        Err(invalid(format!(
            "{} and {} were evaluated on different subjects",
            a.method, b.method
        )))
    }
}
