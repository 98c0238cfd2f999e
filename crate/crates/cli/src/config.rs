//! Experiment configuration: a TOML file with fixed sections. Unknown keys are
//! rejected and every field has a default, so an empty file is valid.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use adverseg_core::networks::{DiscriminatorConfig, RNetConfig};
use adverseg_core::objectives::{GanForm, LossWeights};
use adverseg_core::phantom::{DatasetConfig, StyleId};
use adverseg_core::trainer::{Method, SelectionLoss, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::sha256_hex;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Susan,
    SupervisedBaseline,
}

impl MethodName {
    pub fn core(self) -> Method {
        match self {
            MethodName::Susan => Method::Susan,
            MethodName::SupervisedBaseline => Method::SupervisedBaseline,
        }
    }

    pub fn as_str(self) -> &'static str {
        self.core().name()
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanFormName {
    #[default]
    NonSaturating,
    Saturating,
    LeastSquares,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionName {
    #[default]
    Generator,
    WithDiscriminators,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub image_size: usize,
    pub source_size: usize,
    pub slices_per_subject: usize,
    pub spacing_mm: f64,
    pub reference_subjects: usize,
    pub target_subjects: usize,
    /// `target_a` or `target_b`.
    pub target_style: String,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            image_size: d.image_size,
            source_size: d.source_size,
            slices_per_subject: d.slices_per_subject,
            spacing_mm: d.spacing,
            reference_subjects: d.reference_subjects,
            target_subjects: d.target_subjects,
            target_style: d.target_style.name().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub depth: usize,
    pub base_channels: usize,
    pub leaky_alpha: f64,
    pub disc_depth: usize,
    pub disc_base_channels: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let d = DiscriminatorConfig::default();
        Self {
            depth: 2,
            base_channels: 16,
            leaky_alpha: RNetConfig::default().leaky_alpha,
            disc_depth: d.depth,
            disc_base_channels: d.base_channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_cyc: f64,
    pub lambda_gan: f64,
    pub lambda_seg: f64,
    pub gan_form: GanFormName,
    pub selection: SelectionName,
    pub validate_every: usize,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lambda_cyc: t.weights.cyc,
            lambda_gan: t.weights.gan,
            lambda_seg: t.weights.seg,
            gan_form: GanFormName::default(),
            selection: SelectionName::default(),
            validate_every: t.validate_every,
            divergence_factor: t.divergence_factor,
            divergence_patience: t.divergence_patience,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub lambda_seg: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lambda_seg: vec![0.5, 5.0, 10.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,
    pub out: PathBuf,
    pub methods: Vec<MethodName>,
    pub data: DataSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            precision: Precision::F32,
            out: PathBuf::from("out"),
            methods: vec![MethodName::Susan, MethodName::SupervisedBaseline],
            data: DataSection::default(),
            network: NetworkSection::default(),
            train: TrainSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl FromStr for ExperimentConfig {
    type Err = CliError;

    fn from_str(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        text.parse()
            .map_err(|e: CliError| CliError::Validation(format!("{}: {e}", path.display())))
    }

    /// Canonical text: every field spelled out in a fixed order.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        let v = |e: adverseg_core::Error| CliError::Validation(e.to_string());
        self.dataset().map_err(|e| CliError::Validation(e.to_string()))?.validate().map_err(v)?;
        for m in [MethodName::Susan, MethodName::SupervisedBaseline] {
            self.train_config(m, self.train.lambda_seg)?.validate().map_err(v)?;
        }
        if self.methods.is_empty() {
            return Err(CliError::Validation("methods must not be empty".into()));
        }
        if self.sweep.lambda_seg.is_empty() || self.sweep.lambda_seg.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(CliError::Validation(
                "sweep.lambda_seg needs at least one finite value >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn dataset(&self) -> CliResult<DatasetConfig> {
        let d = &self.data;
        let style: StyleId = d
            .target_style
            .parse()
            .map_err(|e: adverseg_core::Error| CliError::Validation(e.to_string()))?;
        if style == StyleId::Reference {
            return Err(CliError::Validation(
                "data.target_style must differ from the reference style".into(),
            ));
        }
        Ok(DatasetConfig {
            image_size: d.image_size,
            source_size: d.source_size,
            slices_per_subject: d.slices_per_subject,
            spacing: d.spacing_mm,
            reference_subjects: d.reference_subjects,
            target_subjects: d.target_subjects,
            target_style: style,
        })
    }

    pub fn train_config(&self, method: MethodName, lambda_seg: f64) -> CliResult<TrainConfig> {
        let (n, t) = (&self.network, &self.train);
        Ok(TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            weights: LossWeights {
                cyc: t.lambda_cyc,
                gan: t.lambda_gan,
                seg: lambda_seg,
            },
            seed: self.seed,
            method: method.core(),
            gan_form: match t.gan_form {
                GanFormName::NonSaturating => GanForm::NonSaturating,
                GanFormName::Saturating => GanForm::Saturating,
                GanFormName::LeastSquares => GanForm::LeastSquares,
            },
            selection: match t.selection {
                SelectionName::Generator => SelectionLoss::Generator,
                SelectionName::WithDiscriminators => SelectionLoss::WithDiscriminators,
            },
            validate_every: t.validate_every,
            rnet: RNetConfig {
                input_size: self.data.image_size,
                depth: n.depth,
                base_channels: n.base_channels,
                leaky_alpha: n.leaky_alpha,
                translation_head: method == MethodName::Susan,
                ..RNetConfig::default()
            },
            discriminator: DiscriminatorConfig {
                input_size: self.data.image_size,
                depth: n.disc_depth,
                base_channels: n.disc_base_channels,
                leaky_alpha: n.leaky_alpha,
                ..DiscriminatorConfig::default()
            },
            divergence_factor: t.divergence_factor,
            divergence_patience: t.divergence_patience,
        })
    }

    /// Identifies the generated dataset: seed plus the data section.
    pub fn dataset_hash(&self) -> String {
        let text = toml::to_string(&self.data).expect("data section serializes");
        sha256_hex(format!("seed = {}\n{text}", self.seed).as_bytes())
    }

    /// Identifies one training run: everything that influences its result.
    pub fn run_hash(&self, method: MethodName, lambda_seg: f64) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.methods = vec![method];
        c.train.lambda_seg = lambda_seg;
        c.sweep = SweepSection::default();
        sha256_hex(c.canonical().as_bytes())
    }
}
