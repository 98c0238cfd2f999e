use std::fmt::Write as _;
use std::fs;

use adverseg_core::metrics::{Metric, MetricsReport, CLASS_NAMES, EVAL_CLASSES};
use adverseg_core::trainer::Models;
use adverseg_core::Scalar;

use crate::config::{ExperimentConfig, MethodName};
use crate::error::{invalid, CliResult};
use crate::layout::{Dataset, Layout};

use super::evaluate::{fcn_classifier, score_method, synthetic_fcn, write_csv};
use super::train::{load_best, train_run, TrainOptions};

pub const SWEEP_FILE: &str = "sweep.csv";

/// Header of the sweep table: weight, realism score, per-class Dice.
pub fn sweep_header() -> String {
    let mut h = String::from("lambda_seg,FCN_mean,FCN_std");
    for &c in &EVAL_CLASSES {
        let _ = write!(h, ",DC_{}", CLASS_NAMES[c as usize]);
    }
    h.push_str(",DC_mean");
    h
}

/// Mean over subjects and classes of the Dice coefficient.
pub fn mean_dice(report: &MetricsReport) -> f64 {
    let per_class: Vec<f64> = EVAL_CLASSES
        .iter()
        .map(|&c| report.summary(c, Metric::Dice).map_or(0.0, |s| s.mean))
        .collect();
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

pub struct SweepRow {
    pub lambda_seg: f64,
    pub report: MetricsReport,
}

/// Retrains the joint model once per segmentation weight and tabulates
/// realism and target Dice for each. With `parallel`, the pending trainings
/// run on one thread each; every run is seeded independently, so the results
/// match the sequential order.
pub fn sweep<T: Scalar>(
    cfg: &ExperimentConfig,
    layout: &Layout,
    opts: TrainOptions,
    parallel: bool,
) -> CliResult<Vec<SweepRow>> {
    let mut seen = cfg.sweep.lambda_seg.clone();
    seen.sort_by(f64::total_cmp);
    seen.dedup();
    if seen.len() != cfg.sweep.lambda_seg.len() {
        return Err(invalid("sweep.lambda_seg has repeated values"));
    }
    let data = Dataset::load(layout, cfg)?;
    let test = data.target_test()?;
    let method = MethodName::Susan;
    let pending: Vec<f64> = cfg
        .sweep
        .lambda_seg
        .iter()
        .copied()
        .filter(|&l| opts.force || load_best::<T>(cfg, &layout.sweep_run(l), method, l).is_err())
        .collect();
    let run = |lambda: f64| -> CliResult<()> {
        log::info!("sweep: training lambda_seg = {lambda}");
        train_run::<T>(cfg, &data, method, lambda, &layout.sweep_run(lambda), opts).map(|_| ())
    };
    if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = pending.iter().map(|&l| s.spawn(move || run(l))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep training thread panicked"))
                .collect::<CliResult<Vec<()>>>()
        })?;
    } else {
        for &l in &pending {
            run(l)?;
        }
    }
    let mut rows = Vec::new();
    for &lambda in &cfg.sweep.lambda_seg {
        let dir = layout.sweep_run(lambda);
        if !pending.contains(&lambda) {
            log::info!("sweep: reusing finished run for lambda_seg = {lambda}");
        }
        let models = load_best::<T>(cfg, &dir, method, lambda)?;
        let report = score_method(&cfg.data.target_style, method.as_str(), Some(models.target_segmenter()), &test)?;
        rows.push((lambda, models, report));
    }
    let clf = fcn_classifier::<T>(cfg, layout, &data)?;
    let mut table = Vec::new();
    let mut out = Vec::new();
    for (lambda, models, mut report) in rows {
        let Models::Susan(m) = &models else { unreachable!() };
        let fcn = synthetic_fcn(&clf, &m.f, &data.reference_val()?)?;
        report.fcn_score = Some(fcn);
        let dir = layout.sweep_run(lambda);
        fs::write(dir.join("report.csv"), report.to_csv())?;
        fs::write(dir.join("subjects.csv"), report.subjects_csv())?;
        let mut row = format!("{lambda},{:.6},{:.6}", fcn.mean, fcn.std);
        for &c in &EVAL_CLASSES {
            let d = report.summary(c, Metric::Dice).map_or(f64::NAN, |s| s.mean);
            let _ = write!(row, ",{d:.6}");
        }
        let _ = write!(row, ",{:.6}", mean_dice(&report));
        table.push(row);
        out.push(SweepRow {
            lambda_seg: lambda,
            report,
        });
    }
    write_csv(&layout.sweep().join(SWEEP_FILE), &sweep_header(), &table)?;
    Ok(out)
}
