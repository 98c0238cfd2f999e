use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use adverseg_core::metrics::{
    pvalue_csv, report_preamble, score_subject, FcnClassifier, MetricsReport, Summary, FCN_DEPTH,
};
use adverseg_core::networks::RNet;
use adverseg_core::objectives::l1;
use adverseg_core::phantom::Subject;
use adverseg_core::trainer::{labeled_slices, segment, to_network_units, Models, SupervisedData, TrainState};
use adverseg_core::{Scalar, Tensor4};

use crate::config::{ExperimentConfig, MethodName};
use crate::error::{invalid, CliResult};
use crate::layout::{Dataset, Layout};

use super::train::load_best;

pub const GROUND_TRUTH: &str = "ground-truth";
pub const FCN_HEADER: &str = "images,method,FCN_mean,FCN_std,n";
pub const CYCLE_HEADER: &str = "method,images,trained_l1,untrained_l1,ratio";

const CHUNK: usize = 8;

/// All slices of `s` in network units, `S x 1 x H x W`.
pub fn subject_tensor<T: Scalar>(s: &Subject) -> CliResult<Tensor4<T>> {
    let parts: Vec<Tensor4<T>> = s.images.iter().map(|z| to_network_units(z, s.size)).collect();
    Ok(Tensor4::stack(&parts.iter().collect::<Vec<_>>())?)
}

/// Translation head of `net` over a batch, in eval mode.
pub fn translate_batch<T: Scalar>(net: &RNet<T>, x: &Tensor4<T>) -> CliResult<Tensor4<T>> {
    let n = x.shape().n();
    let mut parts = Vec::new();
    for lo in (0..n).step_by(CHUNK) {
        let items: Vec<Tensor4<T>> = (lo..(lo + CHUNK).min(n)).map(|i| x.batch_item(i)).collect();
        let (out, _) = net.infer(&Tensor4::stack(&items.iter().collect::<Vec<_>>())?)?;
        parts.push(out.ok_or_else(|| invalid("network has no translation head"))?);
    }
    Ok(Tensor4::stack(&parts.iter().collect::<Vec<_>>())?)
}

fn planes(labels: Vec<u8>, plane: usize) -> Vec<Vec<u8>> {
    labels.chunks(plane).map(<[u8]>::to_vec).collect()
}

/// Scores `segmenter` (or the ground truth itself when `None`) on `test`.
pub fn score_method<T: Scalar>(
    dataset: &str,
    method: &str,
    segmenter: Option<&RNet<T>>,
    test: &[&Subject],
) -> CliResult<MetricsReport> {
    let mut subjects = Vec::with_capacity(test.len());
    for s in test {
        let pred = match segmenter {
            Some(net) => planes(segment(net, &subject_tensor::<T>(s)?)?, s.size * s.size),
            None => s.masks.clone(),
        };
        subjects.push(score_subject(&s.id, &pred, &s.masks, s.size, s.spacing)?);
    }
    Ok(MetricsReport::new(dataset, method, subjects))
}

/// The realism classifier: the supervised baseline when one was trained at
/// the classifier depth, otherwise a fresh one trained on real target slices.
pub fn fcn_classifier<T: Scalar>(
    cfg: &ExperimentConfig,
    layout: &Layout,
    data: &Dataset,
) -> CliResult<FcnClassifier<T>> {
    let train = labeled_slices::<T>(&data.target_train()?);
    let method = MethodName::SupervisedBaseline;
    if cfg.network.depth == FCN_DEPTH {
        if let Ok(models) = load_best::<T>(cfg, &layout.run(method), method, cfg.train.lambda_seg) {
            log::info!("FCN-score classifier: trained supervised baseline");
            return Ok(FcnClassifier::from_network(models.target_segmenter().clone(), &train));
        }
    }
    log::info!("FCN-score classifier: training on real target slices");
    let tc = cfg.train_config(method, cfg.train.lambda_seg)?;
    let sup = SupervisedData {
        train,
        val: labeled_slices::<T>(&data.target_val()?),
    };
    Ok(FcnClassifier::train(&tc, &sup)?)
}

/// Per-subject classifier accuracy on `images(s)` against each subject's masks.
pub fn fcn_summary<T: Scalar>(
    clf: &FcnClassifier<T>,
    subjects: &[&Subject],
    images: impl Fn(&Subject) -> CliResult<Tensor4<T>>,
) -> CliResult<Summary> {
    let mut scores = Vec::with_capacity(subjects.len());
    for s in subjects {
        scores.push(clf.score(&images(s)?, &s.masks.concat())?);
    }
    Summary::of(&scores).ok_or_else(|| invalid("no subjects to score"))
}

/// FCN-score of reference images translated by `f` into the target domain.
pub fn synthetic_fcn<T: Scalar>(clf: &FcnClassifier<T>, f: &RNet<T>, reference: &[&Subject]) -> CliResult<Summary> {
    fcn_summary(clf, reference, |s| translate_batch(f, &subject_tensor(s)?))
}

pub fn fcn_row(images: &str, method: &str, s: &Summary) -> String {
    format!("{images},{method},{:.6},{:.6},{}", s.mean, s.std, s.n)
}

/// Mean absolute cycle error `|g(f(x)) - x|` over `subjects`.
pub fn cycle_error<T: Scalar>(f: &RNet<T>, g: &RNet<T>, subjects: &[&Subject]) -> CliResult<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in subjects {
        let x = subject_tensor::<T>(s)?;
        let back = translate_batch(g, &translate_batch(f, &x)?)?;
        sum += l1(&back, &x)? * x.len() as f64;
        n += x.len();
    }
    Ok(sum / n as f64)
}

/// Cycle errors of trained and freshly initialized generators on both
/// domains' hold-out images.
pub fn cycle_rows<T: Scalar>(
    cfg: &ExperimentConfig,
    models: &Models<T>,
    data: &Dataset,
    lambda_seg: f64,
) -> CliResult<Vec<String>> {
    let Models::Susan(m) = models else {
        return Err(invalid("cycle error needs both generators"));
    };
    let fresh = TrainState::<T>::fresh(&cfg.train_config(MethodName::Susan, lambda_seg)?)?;
    let Models::Susan(u) = &fresh.models else { unreachable!() };
    let (target, reference) = (data.target_test()?, data.reference_val()?);
    let rows = [
        ("target-test", cycle_error(&m.b, &m.f, &target)?, cycle_error(&u.b, &u.f, &target)?),
        ("reference-val", cycle_error(&m.f, &m.b, &reference)?, cycle_error(&u.f, &u.b, &reference)?),
    ];
    Ok(rows
        .iter()
        .map(|(images, t, u)| format!("susan,{images},{t:.6},{u:.6},{:.6}", t / u))
        .collect())
}

pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> CliResult<()> {
    let mut out = report_preamble();
    let _ = writeln!(out, "{header}");
    for r in rows {
        let _ = writeln!(out, "{r}");
    }
    fs::write(path, out)?;
    Ok(())
}

pub struct EvaluateOptions {
    pub methods: Vec<MethodName>,
    pub ground_truth: bool,
}

/// Scores every requested method on the target test split and writes the
/// report, per-subject, p-value, FCN-score and cycle tables to `eval/`.
pub fn evaluate<T: Scalar>(cfg: &ExperimentConfig, layout: &Layout, opts: &EvaluateOptions) -> CliResult<Vec<MetricsReport>> {
    let data = Dataset::load(layout, cfg)?;
    let test = data.target_test()?;
    let lambda = cfg.train.lambda_seg;
    let dataset = cfg.data.target_style.as_str();
    let dir = layout.eval();
    fs::create_dir_all(&dir)?;

    let mut loaded = Vec::new();
    for &m in &opts.methods {
        loaded.push((m, load_best::<T>(cfg, &layout.run(m), m, lambda)?));
    }
    let clf = match loaded.is_empty() {
        true => None,
        false => Some(fcn_classifier::<T>(cfg, layout, &data)?),
    };
    let mut fcn_rows = Vec::new();
    if let Some(clf) = &clf {
        fcn_rows.push(fcn_row("real-target-train", "real", &fcn_summary(clf, &data.target_train()?, subject_tensor)?));
        fcn_rows.push(fcn_row("real-target-test", "real", &fcn_summary(clf, &test, subject_tensor)?));
    }
    let mut cycle = Vec::new();
    let mut reports = Vec::new();
    if opts.ground_truth {
        reports.push(score_method::<T>(dataset, GROUND_TRUTH, None, &test)?);
    }
    for (m, models) in &loaded {
        let mut report = score_method(dataset, m.as_str(), Some(models.target_segmenter()), &test)?;
        if let (Models::Susan(s), Some(clf)) = (models, &clf) {
            let synth = synthetic_fcn(clf, &s.f, &data.reference_val()?)?;
            fcn_rows.push(fcn_row("translated-reference-val", m.as_str(), &synth));
            report.fcn_score = Some(synth);
            cycle.extend(cycle_rows(cfg, models, &data, lambda)?);
        }
        reports.push(report);
    }
    for r in &reports {
        fs::write(dir.join(format!("{}_report.csv", r.method)), r.to_csv())?;
        fs::write(dir.join(format!("{}_subjects.csv", r.method)), r.subjects_csv())?;
    }
    if reports.len() > 1 {
        fs::write(dir.join("pvalues.csv"), pvalue_csv(&reports)?)?;
    }
    if !fcn_rows.is_empty() {
        write_csv(&dir.join("fcn.csv"), FCN_HEADER, &fcn_rows)?;
    }
    if !cycle.is_empty() {
        write_csv(&dir.join("cycle.csv"), CYCLE_HEADER, &cycle)?;
    }
    Ok(reports)
}
