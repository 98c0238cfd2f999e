use std::path::{Path, PathBuf};

use adverseg_core::objectives::l1;
use adverseg_core::phantom::Subject;
use adverseg_core::tensor::io::{self, DType, Entry};
use adverseg_core::trainer::{to_network_units, Models};
use adverseg_core::{Scalar, Tensor4};

use crate::config::{ExperimentConfig, MethodName};
use crate::error::{invalid, CliResult};
use crate::layout::{fresh_dir, Dataset, Layout};
use crate::preview::write_preview;

use super::evaluate::{subject_tensor, translate_batch, write_csv};
use super::train::load_best;

pub const TRANSLATE_HEADER: &str = "input,slices,cycle_l1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Direction {
    /// Reference to target with the forward generator.
    Forward,
    /// Target to reference with the backward generator.
    Backward,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

pub struct TranslateOptions {
    pub method: MethodName,
    pub direction: Direction,
    /// Image files (`*.image.susn`); empty means the default hold-out split.
    pub inputs: Vec<PathBuf>,
    pub force: bool,
}

/// Reads a stored slice stack (z-normalized) into network units.
fn read_images<T: Scalar>(path: &Path) -> CliResult<Tensor4<T>> {
    let entries = io::load(path)?;
    let e = entries
        .iter()
        .find(|e| e.name == "image")
        .or(entries.first())
        .ok_or_else(|| invalid(format!("{}: no tensor entries", path.display())))?;
    let t = e.to_tensor::<f64>()?;
    let s = t.shape();
    if s.c() != 1 || s.h() != s.w() {
        return Err(invalid(format!("{}: expected N x 1 x S x S images, got {s}", path.display())));
    }
    let parts: Vec<Tensor4<T>> = (0..s.n()).map(|i| to_network_units(t.item(i), s.h())).collect();
    Ok(Tensor4::stack(&parts.iter().collect::<Vec<_>>())?)
}

pub struct Translated {
    pub name: String,
    pub slices: usize,
    pub cycle_l1: f64,
}

/// Translates every input with the requested generator, writing a tensor
/// file and one PNG preview per slice.
pub fn translate<T: Scalar>(cfg: &ExperimentConfig, layout: &Layout, opts: &TranslateOptions) -> CliResult<Vec<Translated>> {
    let lambda = cfg.train.lambda_seg;
    let models = load_best::<T>(cfg, &layout.run(opts.method), opts.method, lambda)?;
    let Models::Susan(m) = &models else {
        return Err(invalid(format!(
            "{} checkpoints hold no translation generators",
            opts.method
        )));
    };
    let (there, back) = match opts.direction {
        Direction::Forward => (&m.f, &m.b),
        Direction::Backward => (&m.b, &m.f),
    };

    let mut inputs: Vec<(String, Tensor4<T>)> = Vec::new();
    if opts.inputs.is_empty() {
        let data = Dataset::load(layout, cfg)?;
        let subjects: Vec<&Subject> = match opts.direction {
            Direction::Forward => data.reference_val()?,
            Direction::Backward => data.target_test()?,
        };
        for s in subjects {
            inputs.push((s.id.clone(), subject_tensor(s)?));
        }
    } else {
        for p in &opts.inputs {
            let name = p
                .file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.trim_end_matches(".susn").trim_end_matches(".image").to_string())
                .ok_or_else(|| invalid(format!("bad input path {}", p.display())))?;
            inputs.push((name, read_images(p)?));
        }
    }

    let dir = layout.translate(opts.direction.as_str());
    fresh_dir(&dir, opts.force)?;
    let mut out = Vec::new();
    let mut rows = Vec::new();
    for (name, x) in inputs {
        let y = translate_batch(there, &x)?;
        let cycle = l1(&translate_batch(back, &y)?, &x)?;
        io::save(dir.join(format!("{name}.translated.susn")), &[Entry::tensor("translated", &y, DType::of::<T>())])?;
        let s = y.shape();
        for i in 0..s.n() {
            write_preview(&dir.join(format!("{name}_s{i:02}.png")), y.item(i), s.w(), s.h())?;
        }
        rows.push(format!("{name},{},{cycle:.6}", s.n()));
        out.push(Translated {
            name,
            slices: s.n(),
            cycle_l1: cycle,
        });
    }
    write_csv(&dir.join("summary.csv"), TRANSLATE_HEADER, &rows)?;
    Ok(out)
}
