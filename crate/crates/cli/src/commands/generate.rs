use std::fs;

use adverseg_core::phantom::{build_splits, generate_domain, save_domain, DomainRole};

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::layout::{content_hash, fresh_dir, DatasetInfo, Layout};

pub struct GenerateSummary {
    pub reference_subjects: usize,
    pub target_subjects: usize,
    pub content_hash: String,
}

/// Renders both domains, the subject split and the dataset identity file.
pub fn generate(cfg: &ExperimentConfig, layout: &Layout, force: bool) -> CliResult<GenerateSummary> {
    let dc = cfg.dataset()?;
    dc.validate()?;
    let split = build_splits(dc.reference_subjects, dc.target_subjects, cfg.seed)?;
    fresh_dir(&layout.data(), force)?;
    for role in [DomainRole::Reference, DomainRole::Target] {
        let subjects = generate_domain(&dc, role, cfg.seed)?;
        save_domain(&layout.domain(role), &subjects)?;
        log::info!("wrote {} {} subjects", subjects.len(), role.dir_name());
    }
    fs::write(layout.splits(), split.to_text())?;
    let info = DatasetInfo {
        config_hash: cfg.dataset_hash(),
        content_hash: content_hash(layout)?,
        reference_subjects: dc.reference_subjects,
        target_subjects: dc.target_subjects,
    };
    fs::write(layout.dataset_info(), toml::to_string(&info).expect("dataset info serializes"))?;
    Ok(GenerateSummary {
        reference_subjects: info.reference_subjects,
        target_subjects: info.target_subjects,
        content_hash: info.content_hash,
    })
}
