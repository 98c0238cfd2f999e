//! Segmentation accuracy, surface distance, image realism and paired
//! significance tests.

mod fcn;
mod overlap;
mod report;
mod surface;
mod wilcoxon;

pub use fcn::{fcn_score, FcnClassifier, FCN_DEPTH};
pub use overlap::{
    dice, dice_from_counts, overlap_counts, per_pixel_accuracy, voe, voe_from_counts, BinaryMask, ConfusionCounts,
};
pub use report::{
    compare, pvalue_csv, report_preamble, score_subject, ClassScore, Metric, MetricsReport, Summary, SubjectScores,
    CLASS_NAMES, EVAL_CLASSES, PVALUE_HEADER, REPORT_HEADER, REPORT_NOTES, SUBJECT_HEADER, VOE_CLASSES,
};
pub use surface::{assd, boundary, squared_distance_transform, surface_distance_sum};
pub use wilcoxon::{average_ranks, wilcoxon_normal_approximation, wilcoxon_signed_rank, WilcoxonResult, EXACT_MAX_N};
