use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use adverseg_core::trainer::{
    Checkpoint, Models, SupervisedData, SusanData, TrainData, Trainer, ValidationRecord, HISTORY_HEADER,
};
use adverseg_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MethodName};
use crate::error::{invalid, CliError, CliResult};
use crate::layout::{fresh_dir, is_non_empty, Dataset};

pub const BEST: &str = "best.susn";
pub const LAST: &str = "last.susn";
pub const HISTORY: &str = "history.csv";
pub const VALIDATION: &str = "validation.csv";
pub const SUMMARY: &str = "summary.toml";
pub const VALIDATION_HEADER: &str = "iteration,epoch,loss";

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub force: bool,
    /// Continue from `last.susn` when the run directory already has one.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many iterations are complete.
    pub max_iterations: Option<u64>,
}

/// Outcome of one run, also written to `summary.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub lambda_seg: f64,
    pub run_hash: String,
    pub iterations: u64,
    pub complete: bool,
    pub best_val: Option<f64>,
    pub best_iteration: Option<u64>,
    pub initial_val: Option<f64>,
}

fn validation_row(v: &ValidationRecord) -> String {
    format!("{},{},{:.9e}", v.iteration, v.epoch, v.loss)
}

/// Keeps the header and rows whose leading iteration id is at most `upto`.
fn truncate_csv(path: &Path, upto: u64) -> CliResult<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|v| v.parse::<u64>().ok())
                .is_some_and(|it| it <= upto);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn append(path: &Path, rows: impl Iterator<Item = String>) -> CliResult<()> {
    let mut f = fs::OpenOptions::new().append(true).create(true).open(path)?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    Ok(())
}

/// Trains `method` with segmentation weight `lambda_seg` into `dir`.
pub fn train_run<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &Dataset,
    method: MethodName,
    lambda_seg: f64,
    dir: &Path,
    opts: TrainOptions,
) -> CliResult<RunSummary> {
    let tc = cfg.train_config(method, lambda_seg)?;
    tc.validate()?;
    let run_hash = cfg.run_hash(method, lambda_seg);
    let last = dir.join(LAST);
    let resuming = opts.resume && last.exists();
    if !resuming {
        fresh_dir(dir, opts.force)?;
    } else if !is_non_empty(dir) {
        return Err(invalid(format!("nothing to resume in {}", dir.display())));
    }

    let susan;
    let supervised;
    let train_data = match method {
        MethodName::Susan => {
            susan = SusanData::<T>::new(
                &data.reference_train()?,
                &data.reference_val()?,
                &data.target_train()?,
                &data.target_val()?,
            )?;
            TrainData::Susan(&susan)
        }
        MethodName::SupervisedBaseline => {
            // The baseline sees target masks; it exists only for comparison.
            supervised = SupervisedData {
                train: adverseg_core::trainer::labeled_slices::<T>(&data.target_train()?),
                val: adverseg_core::trainer::labeled_slices::<T>(&data.target_val()?),
            };
            TrainData::Supervised(&supervised)
        }
    };

    let (history, validation) = (dir.join(HISTORY), dir.join(VALIDATION));
    let mut trainer = if resuming {
        let (state, hash) = Checkpoint::load::<T>(&last, &tc)?;
        if hash != run_hash {
            return Err(invalid(format!(
                "{} was written under a different configuration",
                last.display()
            )));
        }
        truncate_csv(&history, state.iteration)?;
        truncate_csv(&validation, state.iteration)?;
        log::info!("resuming {method} at iteration {}", state.iteration);
        Trainer::resume(tc, train_data, state)?
    } else {
        fs::write(dir.join("config.toml"), cfg.canonical())?;
        fs::write(&history, format!("{HISTORY_HEADER}\n"))?;
        fs::write(&validation, format!("{VALIDATION_HEADER}\n"))?;
        Trainer::new(tc, train_data)?
    };

    let per_epoch = trainer.iterations_per_epoch();
    let stop_at = opts.max_iterations.unwrap_or(u64::MAX);
    let mut flushed = (0usize, 0usize);
    let flush = |t: &Trainer<'_, T>, flushed: &mut (usize, usize)| -> CliResult<()> {
        append(&history, t.history[flushed.0..].iter().map(|r| r.csv_row()))?;
        append(&validation, t.validations[flushed.1..].iter().map(validation_row))?;
        *flushed = (t.history.len(), t.validations.len());
        Checkpoint::save(&last, &t.state, &run_hash)?;
        Ok(())
    };
    while !trainer.is_done() && trainer.state.iteration < stop_at {
        trainer.step().map_err(|e| CliError::Runtime(e.into()))?;
        if trainer.state.iteration % per_epoch == 0 {
            flush(&trainer, &mut flushed)?;
        }
    }
    flush(&trainer, &mut flushed)?;

    let complete = trainer.is_done();
    let state = &trainer.state;
    if complete {
        let (_, _, best) = state.best.as_ref().expect("a finished run has validated");
        Checkpoint::save_models(&dir.join(BEST), best, &run_hash)?;
    }
    let summary = RunSummary {
        method: method.to_string(),
        lambda_seg,
        run_hash,
        iterations: state.iteration,
        complete,
        best_val: state.best.as_ref().map(|b| b.0),
        best_iteration: state.best.as_ref().map(|b| b.1),
        initial_val: state.initial_val,
    };
    fs::write(dir.join(SUMMARY), toml::to_string(&summary).expect("summary serializes"))?;
    Ok(summary)
}

/// Best networks of a finished run, checked against the configuration.
pub fn load_best<T: Scalar>(
    cfg: &ExperimentConfig,
    dir: &Path,
    method: MethodName,
    lambda_seg: f64,
) -> CliResult<Models<T>> {
    let path: PathBuf = dir.join(BEST);
    if !path.exists() {
        return Err(invalid(format!(
            "no trained {method} model at {}; run `train` first",
            path.display()
        )));
    }
    let tc = cfg.train_config(method, lambda_seg)?;
    let (models, hash) = Checkpoint::load_models::<T>(&path, &tc)?;
    if hash != cfg.run_hash(method, lambda_seg) {
        return Err(invalid(format!(
            "{} was trained under a different configuration",
            path.display()
        )));
    }
    Ok(models)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_keeps_header_and_earlier_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        fs::write(&p, "iteration,x\n1,a\n2,b\n3,c\n").unwrap();
        truncate_csv(&p, 2).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "iteration,x\n1,a\n2,b\n");
    }
}
