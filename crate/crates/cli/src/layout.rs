//! Output directory layout and dataset loading.

use std::fs;
use std::path::{Path, PathBuf};

use adverseg_core::phantom::{load_domain, select, DatasetSplit, DomainRole, Subject};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MethodName};
use crate::error::{invalid, CliResult};
use crate::manifest::{file_hash, sha256_hex, tree_hash};

#[derive(Clone, Debug)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn domain(&self, role: DomainRole) -> PathBuf {
        self.data().join(role.dir_name())
    }

    pub fn splits(&self) -> PathBuf {
        self.data().join("splits.txt")
    }

    pub fn dataset_info(&self) -> PathBuf {
        self.data().join("dataset.toml")
    }

    pub fn run(&self, method: MethodName) -> PathBuf {
        self.out.join("runs").join(method.as_str())
    }

    pub fn eval(&self) -> PathBuf {
        self.out.join("eval")
    }

    pub fn sweep(&self) -> PathBuf {
        self.out.join("sweep")
    }

    pub fn sweep_run(&self, lambda_seg: f64) -> PathBuf {
        self.sweep().join(format!("lambda_{lambda_seg}"))
    }

    pub fn translate(&self, direction: &str) -> PathBuf {
        self.out.join("translate").join(direction)
    }
}

/// True when `dir` exists and holds at least one entry.
pub fn is_non_empty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Prepares `dir` for fresh output: refuses to clobber existing content
/// unless `force` is set, in which case the directory is emptied.
pub fn fresh_dir(dir: &Path, force: bool) -> CliResult<()> {
    if is_non_empty(dir) {
        if !force {
            return Err(invalid(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Identity of a generated dataset, stored next to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub config_hash: String,
    pub content_hash: String,
    pub reference_subjects: usize,
    pub target_subjects: usize,
}

/// Hash over both domain directories and the split file.
pub fn content_hash(layout: &Layout) -> CliResult<String> {
    let parts = [
        tree_hash(&layout.domain(DomainRole::Reference))?,
        tree_hash(&layout.domain(DomainRole::Target))?,
        file_hash(&layout.splits())?,
    ];
    Ok(sha256_hex(parts.join("\n").as_bytes()))
}

/// A loaded dataset with its partitions.
pub struct Dataset {
    pub reference: Vec<Subject>,
    pub target: Vec<Subject>,
    pub split: DatasetSplit,
    pub hash: String,
}

impl Dataset {
    /// Loads the dataset under `layout`, checking that it was generated from
    /// the same data settings and has not changed since.
    pub fn load(layout: &Layout, cfg: &ExperimentConfig) -> CliResult<Self> {
        let info_path = layout.dataset_info();
        let text = fs::read_to_string(&info_path).map_err(|e| {
            invalid(format!("{}: {e}; run `generate` first", info_path.display()))
        })?;
        let info: DatasetInfo =
            toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", info_path.display())))?;
        if info.config_hash != cfg.dataset_hash() {
            return Err(invalid(format!(
                "dataset in {} was generated with different data settings or seed",
                layout.data().display()
            )));
        }
        let hash = content_hash(layout)?;
        if hash != info.content_hash {
            return Err(invalid(format!(
                "dataset files in {} changed since generation",
                layout.data().display()
            )));
        }
        let split = DatasetSplit::from_text(&fs::read_to_string(layout.splits())?)?;
        Ok(Self {
            reference: load_domain(&layout.domain(DomainRole::Reference), DomainRole::Reference)?,
            target: load_domain(&layout.domain(DomainRole::Target), DomainRole::Target)?,
            split,
            hash,
        })
    }

    pub fn reference_train(&self) -> CliResult<Vec<&Subject>> {
        Ok(select(&self.reference, &self.split.reference.train)?)
    }

    pub fn reference_val(&self) -> CliResult<Vec<&Subject>> {
        Ok(select(&self.reference, &self.split.reference.val)?)
    }

    pub fn target_train(&self) -> CliResult<Vec<&Subject>> {
        Ok(select(&self.target, &self.split.target.train)?)
    }

    pub fn target_val(&self) -> CliResult<Vec<&Subject>> {
        Ok(select(&self.target, &self.split.target.val)?)
    }

    /// Hold-out target subjects, which must carry a mask for every slice.
    pub fn target_test(&self) -> CliResult<Vec<&Subject>> {
        let test = select(&self.target, &self.split.target.test)?;
        for s in &test {
            let plane = s.size * s.size;
            if s.masks.len() != s.slice_count() || s.masks.iter().any(|m| m.len() != plane) {
                return Err(invalid(format!("test subject {} lacks ground-truth masks", s.id)));
            }
        }
        if test.is_empty() {
            return Err(invalid("the target test split is empty"));
        }
        Ok(test)
    }
}
