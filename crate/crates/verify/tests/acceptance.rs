//! End-to-end acceptance run.
//!
//! Prints one `PASS`/`FAIL` line per criterion and exits non-zero when any
//! criterion fails. The benchmark criteria share one full-scale pipeline run
//! (generate, train, evaluate, sweep) written below the cargo test tmpdir.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use adverseg_cli::commands::train::HISTORY;
use adverseg_cli::layout::{content_hash, Dataset};
use adverseg_cli::{ExperimentConfig, Layout, MethodName};
use adverseg_core::diagnostics::{gradient_suite, tolerance};
use adverseg_core::metrics::{
    assd, dice, per_pixel_accuracy, voe, wilcoxon_signed_rank, BinaryMask, CLASS_NAMES, EVAL_CLASSES, EXACT_MAX_N,
};
use adverseg_core::objectives::{adversarial_from_probs, segmentation_from_probs, total_objective, LossWeights};
use adverseg_core::tensor::Labels;
use adverseg_core::trainer::{audit, Checkpoint, IterationRecord, SusanData, TrainData, Trainer};
use adverseg_core::{Scalar, Shape, Tensor4};
use anyhow::{anyhow, bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn check(id: u32, name: &str, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f))
        .unwrap_or_else(|p| Err(anyhow!("panicked: {}", panic_text(&p))));
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e:#}")),
    };
    println!("{} criterion {id} {name}: {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
    pass
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_default()
}

// Gradient checks.

fn gradients<T: Scalar>() -> Result<(usize, f64, Vec<String>)> {
    let results = gradient_suite::<T>(7)?;
    let worst = results.iter().map(|r| r.error).fold(0.0, f64::max);
    let failed = results
        .iter()
        .filter(|r| !r.passes(tolerance::<T>()))
        .map(|r| r.case.name())
        .collect();
    Ok((results.len(), worst, failed))
}

fn criterion_gradients() -> Result<Outcome> {
    let start = Instant::now();
    let (n64, worst64, failed64) = gradients::<f64>()?;
    let (n32, worst32, failed32) = gradients::<f32>()?;
    let secs = start.elapsed().as_secs_f64();
    let pass = failed64.is_empty() && failed32.is_empty() && secs < 60.0;
    let mut detail = format!("{n64} cases, worst f64 {worst64:.2e} (< 1e-6), worst f32 {worst32:.2e} (< 1e-3)");
    if !pass {
        detail.push_str(&format!(", failing f64 {failed64:?} f32 {failed32:?}, {secs:.1}s"));
    }
    ensure!(n64 == n32, "suites differ in size");
    outcome(pass, detail)
}

// Metric oracles.

const SIDE: usize = 16;

fn random_mask(rng: &mut ChaCha8Rng, spacing: f64) -> BinaryMask {
    loop {
        let density = rng.random_range(0.03..0.6);
        let data: Vec<bool> = (0..SIDE * SIDE).map(|_| rng.random_bool(density)).collect();
        if data.iter().any(|&b| b) {
            return BinaryMask::new(SIDE, SIDE, spacing, data).expect("valid mask");
        }
    }
}

fn cells(m: &BinaryMask) -> Vec<bool> {
    (0..SIDE * SIDE).map(|i| m.get(i / SIDE, i % SIDE)).collect()
}

/// Surface pixels: inside, with a 4-neighbour outside the mask or the image.
fn surface(m: &[bool]) -> Vec<(i64, i64)> {
    let n = SIDE as i64;
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < n && x < n && m[(y * n + x) as usize];
    let mut out = Vec::new();
    for y in 0..n {
        for x in 0..n {
            if inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !inside(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exhaustive pairwise surface distance, each direction summed separately.
fn assd_oracle(s: &[bool], r: &[bool], spacing: f64) -> f64 {
    let (bs, br) = (surface(s), surface(r));
    let one_way = |from: &[(i64, i64)], to: &[(i64, i64)]| -> f64 {
        let mut sum = 0.0;
        for p in from {
            let d = to
                .iter()
                .map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt())
                .fold(f64::INFINITY, f64::min);
            sum += d * spacing;
        }
        sum
    };
    (one_way(&bs, &br) + one_way(&br, &bs)) / (bs.len() + br.len()) as f64
}

fn criterion_metric_oracles() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = Vec::new();
    let mut worst_identity: f64 = 0.0;
    for case in 0..1000 {
        let spacing = [0.5, 1.0, 0.35][case % 3];
        let (s, r) = (random_mask(&mut rng, spacing), random_mask(&mut rng, spacing));
        let (sv, rv) = (cells(&s), cells(&r));
        let inter = sv.iter().zip(&rv).filter(|(a, b)| **a && **b).count();
        let (cs, cr) = (sv.iter().filter(|&&a| a).count(), rv.iter().filter(|&&b| b).count());
        let union = sv.iter().zip(&rv).filter(|(a, b)| **a || **b).count();
        let dc_oracle = 2.0 * inter as f64 / (cs + cr) as f64;
        let voe_oracle = 1.0 - inter as f64 / union as f64;
        let (dc, ve, sd) = (dice(&s, &r)?, voe(&s, &r)?, assd(&s, &r)?);
        if dc != dc_oracle {
            mismatches.push(format!("dice #{case}"));
        }
        if ve != voe_oracle {
            mismatches.push(format!("voe #{case}"));
        }
        if sd != assd_oracle(&sv, &rv, spacing) {
            mismatches.push(format!("assd #{case}"));
        }
        worst_identity = worst_identity.max((ve - (1.0 - dc / (2.0 - dc))).abs());

        let pred: Vec<u8> = (0..SIDE * SIDE).map(|_| rng.random_range(0..5u8)).collect();
        let truth: Vec<u8> = (0..SIDE * SIDE).map(|_| rng.random_range(0..5u8)).collect();
        let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
        let (acc, _) = per_pixel_accuracy(&pred, &truth, 5)?;
        if acc != correct as f64 / (SIDE * SIDE) as f64 {
            mismatches.push(format!("accuracy #{case}"));
        }
    }
    let pass = mismatches.is_empty() && worst_identity <= 1e-12;
    outcome(
        pass,
        format!(
            "1000 pairs, {} oracle mismatches{}, VOE identity error {worst_identity:.1e}",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default()
        ),
    )
}

// Closed-form losses.

fn criterion_closed_forms() -> Result<Outcome> {
    let half = Tensor4::<f64>::filled(Shape::new(2, 1, 6, 6), 0.5);
    let (disc, _) = adversarial_from_probs(&half, &half)?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, h, w) = (2, 8, 8);
    let labels: Vec<u8> = (0..n * h * w).map(|_| rng.random_range(0..5u8)).collect();
    let masks = Labels::new(n, h, w, labels, false)?;
    let uniform = Tensor4::<f64>::filled(Shape::new(n, 5, h, w), 0.2);
    let seg = segmentation_from_probs(&uniform, &uniform, &masks)?;

    let weights = LossWeights::default();
    let example = total_objective(0.1, 0.2, -1.0, -1.0, &weights)?.total;
    let zeros = total_objective(0.0, 0.0, 0.0, 0.0, &weights)?.total;

    let disc_ok = (disc - -1.38629).abs() <= 1e-5;
    let seg_ok = (seg - 2.0 * 5f64.ln()).abs() <= 1e-5;
    let total_ok = example == 0.0 && zeros == 0.0;
    outcome(
        disc_ok && seg_ok && total_ok,
        format!("adversarial at 0.5 = {disc:.6}, segmentation at uniform = {seg:.6}, weighted example total = {example}"),
    )
}

// Signed-rank test.

/// Two-sided exact p-value by enumerating all 2^n sign patterns.
fn wilcoxon_brute(a: &[f64], b: &[f64]) -> Option<f64> {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&v| v != 0.0).collect();
    let n = d.len();
    if !(5..=EXACT_MAX_N).contains(&n) {
        return None;
    }
    // Doubled average ranks are integers.
    let doubled: Vec<u64> = d
        .iter()
        .map(|v| {
            let less = d.iter().filter(|u| u.abs() < v.abs()).count() as u64;
            let tied = d.iter().filter(|u| u.abs() == v.abs()).count() as u64;
            2 * less + tied + 1
        })
        .collect();
    let observed: u64 = d.iter().zip(&doubled).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for signs in 0u64..1 << n {
        let w: u64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| doubled[i]).sum();
        le += u64::from(w <= observed);
        ge += u64::from(w >= observed);
    }
    Some((2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0))
}

fn criterion_wilcoxon() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut compared, mut mismatches) = (0, 0);
    for _ in 0..600 {
        let n = rng.random_range(5..=EXACT_MAX_N);
        // Coarse values so that ties and zero differences occur.
        let a: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) * 0.5).collect();
        let b: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) * 0.5).collect();
        let Some(expected) = wilcoxon_brute(&a, &b) else { continue };
        let got = wilcoxon_signed_rank(&a, &b)?;
        compared += 1;
        if !got.exact || got.p != expected {
            mismatches += 1;
        }
    }
    let six = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0; 6])?.p;
    ensure!(compared >= 300, "only {compared} samples reached the exact path");
    outcome(
        mismatches == 0 && six == 0.03125,
        format!("{compared} samples, {mismatches} mismatches against enumeration, n = 6 all positive p = {six}"),
    )
}

// Full-scale benchmark.

struct Bench {
    layout: Layout,
    cfg: ExperimentConfig,
    graphs_checked: u64,
    target_label_uses: u64,
}

fn cli(out: &Path, args: &[&str]) -> Result<()> {
    let mut argv = vec!["adverseg".to_string(), "--out".into(), out.display().to_string()];
    argv.extend(["--precision", "f32", "--force"].map(String::from));
    argv.extend(args.iter().map(|s| s.to_string()));
    let code = adverseg_cli::run(&argv);
    ensure!(code == 0, "`{}` exited with {code}", argv[1..].join(" "));
    Ok(())
}

fn run_benchmark(out: &Path) -> Result<Bench> {
    for step in [&["generate"][..], &["train"], &["evaluate"], &["sweep"]] {
        let start = Instant::now();
        cli(out, step)?;
        eprintln!("acceptance: {} finished in {:.0}s", step[0], start.elapsed().as_secs_f64());
    }
    let mut cfg = ExperimentConfig::default();
    cfg.out = out.to_path_buf();
    Ok(Bench {
        layout: Layout::new(out),
        cfg,
        graphs_checked: audit::graphs_checked(),
        target_label_uses: audit::target_label_uses(),
    })
}

/// Data rows of a CSV with `#` preamble lines, keyed by header name.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let header = lines.next().context("empty table")?.split(',').map(String::from).collect();
        let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).with_context(|| format!("no column {name}"))
    }

    fn value(&self, key_col: &str, key: &str, col: &str) -> Result<f64> {
        let (k, c) = (self.col(key_col)?, self.col(col)?);
        let row = self.rows.iter().find(|r| r[k] == key).with_context(|| format!("no row {key}"))?;
        row[c].parse().with_context(|| format!("{col} of {key}"))
    }
}

fn dice_means(eval: &Path, method: &str) -> Result<Vec<f64>> {
    let t = Table::read(&eval.join(format!("{method}_report.csv")))?;
    EVAL_CLASSES
        .iter()
        .map(|&c| t.value("class", CLASS_NAMES[c as usize], "DC_mean"))
        .collect()
}

fn criterion_benchmark(b: &Bench) -> Result<Outcome> {
    let eval = b.layout.eval();
    let susan = dice_means(&eval, MethodName::Susan.as_str())?;
    let baseline = dice_means(&eval, MethodName::SupervisedBaseline.as_str())?;
    // EVAL_CLASSES is femur, femoral cartilage, tibia, tibial cartilage.
    let bones = [susan[0], susan[2]];
    let gaps: Vec<f64> = susan.iter().zip(&baseline).map(|(s, r)| (s - r).abs()).collect();
    let worst_gap = gaps.iter().copied().fold(0.0, f64::max);
    let ratio = Table::read(&eval.join("cycle.csv"))?.value("images", "target-test", "ratio")?;
    let (a, bb, c) = (bones.iter().all(|&d| d >= 0.90), worst_gap <= 0.08, ratio <= 0.5);
    let fmt = |v: &[f64]| v.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>().join("/");
    outcome(
        a && bb && c,
        format!(
            "(a) {} bone Dice {} (>= 0.90); (b) {} SUSAN {} vs baseline {}, worst gap {worst_gap:.3} (<= 0.08); \
             (c) {} cycle l1 ratio {ratio:.3} (<= 0.5)",
            pf(a),
            fmt(&bones),
            pf(bb),
            fmt(&susan),
            fmt(&baseline),
            pf(c)
        ),
    )
}

fn pf(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

fn criterion_sweep(b: &Bench) -> Result<Outcome> {
    let t = Table::read(&b.layout.sweep().join("sweep.csv"))?;
    let at = |l: &str| t.value("lambda_seg", l, "DC_mean");
    let (d05, d5, d10) = (at("0.5")?, at("5")?, at("10")?);
    outcome(
        d05 < d5 && (d5 - d10).abs() <= 0.05,
        format!("mean Dice {d05:.4} at 0.5, {d5:.4} at 5, {d10:.4} at 10"),
    )
}

fn criterion_fcn_gap(b: &Bench) -> Result<Outcome> {
    let t = Table::read(&b.layout.eval().join("fcn.csv"))?;
    let real = t.value("images", "real-target-test", "FCN_mean")?;
    let synthetic = t.value("images", "translated-reference-val", "FCN_mean")?;
    let gap = (real - synthetic).abs();
    outcome(
        gap <= 0.10,
        format!("real hold-out {real:.4}, translated {synthetic:.4}, gap {gap:.4} (<= 0.10)"),
    )
}

fn loss_bits(r: &IterationRecord) -> [u64; 7] {
    let l = &r.report;
    [l.cycle, l.seg, l.gan_forward, l.gan_backward, l.total, r.disc_x, r.disc_y].map(f64::to_bits)
}

/// Three steps, a checkpoint, five more steps; then the same five from the
/// reloaded checkpoint.
fn resume_matches(b: &Bench, scratch: &Path) -> Result<bool> {
    let data = Dataset::load(&b.layout, &b.cfg)?;
    let susan = SusanData::<f32>::new(
        &data.reference_train()?,
        &data.reference_val()?,
        &data.target_train()?,
        &data.target_val()?,
    )?;
    let tc = b.cfg.train_config(MethodName::Susan, b.cfg.train.lambda_seg)?;
    let ckpt = scratch.join("resume.susn");
    let mut first = Trainer::new(tc.clone(), TrainData::Susan(&susan))?;
    for _ in 0..3 {
        first.step()?;
    }
    Checkpoint::save(&ckpt, &first.state, "acceptance")?;
    let mut straight = Vec::new();
    for _ in 0..5 {
        straight.push(loss_bits(&first.step()?));
    }
    let (state, _) = Checkpoint::load::<f32>(&ckpt, &tc)?;
    let mut second = Trainer::resume(tc, TrainData::Susan(&susan), state)?;
    let mut resumed = Vec::new();
    for _ in 0..5 {
        resumed.push(loss_bits(&second.step()?));
    }
    Ok(straight == resumed)
}

fn criterion_determinism(b: &Bench, scratch: &Path) -> Result<Outcome> {
    // The sweep retrains the default weight from scratch: a full repeat of
    // training and scoring under the same seed.
    let eval = b.layout.eval();
    let repeat = b.layout.sweep_run(b.cfg.train.lambda_seg);
    let mut differing = Vec::new();
    for (a, r) in [("susan_report.csv", "report.csv"), ("susan_subjects.csv", "subjects.csv")] {
        if fs::read(eval.join(a))? != fs::read(repeat.join(r))? {
            differing.push(a);
        }
    }
    // Regenerating the dataset reproduces every file.
    let regen = scratch.join("regenerated");
    cli(&regen, &["generate"])?;
    let same_data = content_hash(&Layout::new(&regen))? == content_hash(&b.layout)?;
    let history = fs::read_to_string(b.layout.run(MethodName::Susan).join(HISTORY))?;
    ensure!(history.lines().count() > 1, "empty training history");
    let resumed = resume_matches(b, scratch)?;
    outcome(
        differing.is_empty() && same_data && resumed,
        format!(
            "metric CSVs {}, regenerated data {}, next 5 losses after resume {}",
            if differing.is_empty() { "identical".to_string() } else { format!("differ: {differing:?}") },
            if same_data { "identical" } else { "differs" },
            if resumed { "bitwise equal" } else { "differ" }
        ),
    )
}

fn criterion_leakage(b: &Bench) -> Result<Outcome> {
    outcome(
        b.graphs_checked > 0 && b.target_label_uses == 0,
        format!(
            "{} generator objectives audited, {} target label planes found",
            b.graphs_checked, b.target_label_uses
        ),
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let (out, scratch) = (root.join("benchmark"), root.join("scratch"));
    let _ = fs::remove_dir_all(&scratch);
    if let Err(e) = fs::create_dir_all(&scratch) {
        eprintln!("cannot create {}: {e}", scratch.display());
        return ExitCode::FAILURE;
    }

    let mut all = true;
    all &= check(1, "gradient correctness", criterion_gradients);
    all &= check(2, "metric oracle equivalence", criterion_metric_oracles);
    all &= check(3, "closed-form loss values", criterion_closed_forms);

    eprintln!("acceptance: running the full benchmark in {}", out.display());
    let start = Instant::now();
    let bench = catch_unwind(|| run_benchmark(&out)).unwrap_or_else(|p| Err(anyhow!("panicked: {}", panic_text(&p))));
    eprintln!("acceptance: benchmark pipeline took {:.0}s", start.elapsed().as_secs_f64());
    let with_bench = |f: &dyn Fn(&Bench) -> Result<Outcome>| -> Result<Outcome> {
        match &bench {
            Ok(b) => f(b),
            Err(e) => bail!("benchmark pipeline failed: {e:#}"),
        }
    };
    all &= check(4, "desk-scale benchmark", || with_bench(&criterion_benchmark));
    all &= check(5, "segmentation weight ordering", || with_bench(&criterion_sweep));
    all &= check(6, "FCN-score gap", || with_bench(&criterion_fcn_gap));
    all &= check(7, "signed-rank test correctness", criterion_wilcoxon);
    all &= check(8, "determinism and persistence", || {
        with_bench(&|b| criterion_determinism(b, &scratch))
    });
    all &= check(9, "no-leakage audit", || with_bench(&criterion_leakage));

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
