//! Alternating adversarial training, the supervised baseline, model
//! selection and argmax segmentation.

mod checkpoint;
mod segment;
mod steps;

pub use checkpoint::{Checkpoint, Models, Optimizers};
pub use segment::{argmax_labels, segment, segment_reference, segment_target, to_network_units, INPUT_SCALE};
pub use steps::{
    discriminator_step, generator_step, supervised_loss, supervised_step, Fakes, SusanModels,
    SusanOptimizers,
};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{invalid, Error, Result};
use crate::networks::{DiscriminatorConfig, PatchDiscriminator, RNet, RNetConfig};
use crate::objectives::{adversarial_from_probs, evaluate_objective, GanForm, LossReport, LossWeights};
use crate::phantom::Subject;
use crate::tensor::{derive_seed, rng_from_seed, AdamConfig, AdamState, Labels, Scalar, Tensor4};

/// Process-wide leakage instrumentation for joint training.
pub mod audit {
    use std::sync::atomic::{AtomicU64, Ordering};

    pub(crate) static SUSAN_GRAPHS: AtomicU64 = AtomicU64::new(0);
    pub(crate) static TARGET_LABEL_USES: AtomicU64 = AtomicU64::new(0);

    /// Generator objectives inspected so far.
    pub fn graphs_checked() -> u64 {
        SUSAN_GRAPHS.load(Ordering::Relaxed)
    }

    /// Target-domain label planes found in generator objectives.
    pub fn target_label_uses() -> u64 {
        TARGET_LABEL_USES.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Susan,
    SupervisedBaseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Susan => "susan",
            Method::SupervisedBaseline => "supervised-baseline",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "susan" => Ok(Method::Susan),
            "supervised-baseline" => Ok(Method::SupervisedBaseline),
            other => Err(invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Which loss drives model selection in joint training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SelectionLoss {
    /// Weighted generator-side objective only.
    #[default]
    Generator,
    /// Generator objective plus `gan` times both discriminator objectives.
    WithDiscriminators,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub method: Method,
    pub gan_form: GanForm,
    pub selection: SelectionLoss,
    /// Validation every this many epochs (the final epoch is always validated).
    pub validate_every: usize,
    pub rnet: RNetConfig,
    pub discriminator: DiscriminatorConfig,
    /// Abort when validation loss exceeds `factor` times its initial value
    /// for `patience` consecutive validations.
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 3,
            epochs: 20,
            weights: LossWeights::default(),
            seed: 0,
            method: Method::Susan,
            gan_form: GanForm::NonSaturating,
            selection: SelectionLoss::Generator,
            validate_every: 1,
            rnet: RNetConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            divergence_factor: 10.0,
            divergence_patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.validate_every == 0 {
            return Err(invalid("batch size, epochs and validation cadence must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate {} must be positive", self.lr)));
        }
        self.weights.validate()?;
        self.rnet.validate()?;
        if self.method == Method::Susan {
            self.discriminator.validate()?;
            if self.discriminator.input_size != self.rnet.input_size {
                return Err(invalid("discriminator and generator input sizes differ"));
            }
            if !self.rnet.translation_head {
                return Err(invalid("joint training needs the translation head"));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// A slice in network units with its label plane.
#[derive(Clone, Debug)]
pub struct LabeledSlice<T> {
    pub image: Tensor4<T>,
    pub labels: Labels,
}

/// Inputs of joint training. Target slices carry no labels at all.
#[derive(Clone, Debug)]
pub struct SusanData<T> {
    pub reference_train: Vec<LabeledSlice<T>>,
    pub reference_val: Vec<LabeledSlice<T>>,
    pub target_train: Vec<Tensor4<T>>,
    pub target_val: Vec<Tensor4<T>>,
}

/// Inputs of the supervised baseline.
#[derive(Clone, Debug)]
pub struct SupervisedData<T> {
    pub train: Vec<LabeledSlice<T>>,
    pub val: Vec<LabeledSlice<T>>,
}

/// Every slice of `subjects` with its labels, in network units.
pub fn labeled_slices<T: Scalar>(subjects: &[&Subject]) -> Vec<LabeledSlice<T>> {
    subjects
        .iter()
        .flat_map(|s| {
            (0..s.slice_count()).map(move |i| LabeledSlice {
                image: to_network_units(&s.images[i], s.size),
                labels: s.labels(i),
            })
        })
        .collect()
}

/// Every slice of `subjects` as an unlabelled image in network units.
pub fn unlabeled_slices<T: Scalar>(subjects: &[&Subject]) -> Vec<Tensor4<T>> {
    subjects
        .iter()
        .flat_map(|s| s.images.iter().map(move |img| to_network_units(img, s.size)))
        .collect()
}

impl<T: Scalar> SusanData<T> {
    /// Builds joint-training data; reference subjects must not be flagged
    /// evaluation-only, and target masks are never read.
    pub fn new(
        reference_train: &[&Subject],
        reference_val: &[&Subject],
        target_train: &[&Subject],
        target_val: &[&Subject],
    ) -> Result<Self> {
        if let Some(s) = reference_train.iter().chain(reference_val).find(|s| s.evaluation_only) {
            return Err(Error::MaskLeakage(format!(
                "subject {} has evaluation-only masks and cannot supervise training",
                s.id
            )));
        }
        Ok(Self {
            reference_train: labeled_slices(reference_train),
            reference_val: labeled_slices(reference_val),
            target_train: unlabeled_slices(target_train),
            target_val: unlabeled_slices(target_val),
        })
    }
}

fn stack_images<T: Scalar>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    Tensor4::stack(parts)
}

fn stack_labels(parts: &[&Labels]) -> Result<Labels> {
    let first = parts.first().ok_or_else(|| invalid("empty batch"))?;
    let values: Vec<u8> = parts.iter().flat_map(|l| l.values.iter().copied()).collect();
    let n = parts.iter().map(|l| l.n).sum();
    Labels::new(n, first.h, first.w, values, parts.iter().any(|l| l.from_target))
}

fn labeled_batch<T: Scalar>(items: &[&LabeledSlice<T>]) -> Result<(Tensor4<T>, Labels)> {
    let imgs: Vec<&Tensor4<T>> = items.iter().map(|s| &s.image).collect();
    let labs: Vec<&Labels> = items.iter().map(|s| &s.labels).collect();
    Ok((stack_images(&imgs)?, stack_labels(&labs)?))
}

/// One row of the per-iteration loss history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub report: LossReport,
    pub disc_x: f64,
    pub disc_y: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub loss: f64,
}

pub const HISTORY_HEADER: &str = "iteration,epoch,cycle,seg,gan_f,gan_b,total,disc_x,disc_y,wall_time_s";

impl IterationRecord {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.3}",
            self.iteration,
            self.epoch,
            r.cycle,
            r.seg,
            r.gan_forward,
            r.gan_backward,
            r.total,
            self.disc_x,
            self.disc_y,
            self.wall_seconds
        )
    }
}

/// Mutable training state; everything needed to continue bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub models: Models<T>,
    pub optimizers: Optimizers<T>,
    /// Completed iterations.
    pub iteration: u64,
    /// Position in the endless shuffled target-slice stream.
    pub target_cursor: u64,
    pub initial_val: Option<f64>,
    pub diverging_for: usize,
    pub best: Option<(f64, u64, Models<T>)>,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.seed;
        let (models, optimizers) = match cfg.method {
            Method::Susan => {
                let m = SusanModels {
                    f: RNet::new(cfg.rnet, derive_seed(s, &[10]))?,
                    b: RNet::new(cfg.rnet, derive_seed(s, &[11]))?,
                    d_x: PatchDiscriminator::new(cfg.discriminator, derive_seed(s, &[12]))?,
                    d_y: PatchDiscriminator::new(cfg.discriminator, derive_seed(s, &[13]))?,
                };
                let o = SusanOptimizers {
                    f: adam_for(cfg, &m.f),
                    b: adam_for(cfg, &m.b),
                    d_x: adam_for(cfg, &m.d_x),
                    d_y: adam_for(cfg, &m.d_y),
                };
                (Models::Susan(m), Optimizers::Susan(o))
            }
            Method::SupervisedBaseline => {
                let rc = RNetConfig {
                    translation_head: false,
                    ..cfg.rnet
                };
                let net = RNet::new(rc, derive_seed(s, &[20]))?;
                let o = adam_for(cfg, &net);
                (Models::Supervised(net), Optimizers::Supervised(o))
            }
        };
        Ok(Self {
            models,
            optimizers,
            iteration: 0,
            target_cursor: 0,
            initial_val: None,
            diverging_for: 0,
            best: None,
        })
    }
}

fn adam_for<T: Scalar, N: crate::networks::Network<T>>(cfg: &TrainConfig, n: &N) -> AdamState<T> {
    AdamState::new(cfg.adam(), &n.params().tensors)
}

/// Where the training data comes from.
pub enum TrainData<'a, T> {
    Susan(&'a SusanData<T>),
    Supervised(&'a SupervisedData<T>),
}

impl<T> TrainData<'_, T> {
    fn train_len(&self) -> usize {
        match self {
            TrainData::Susan(d) => d.reference_train.len(),
            TrainData::Supervised(d) => d.train.len(),
        }
    }

    fn val_len(&self) -> usize {
        match self {
            TrainData::Susan(d) => d.reference_val.len().min(d.target_val.len()),
            TrainData::Supervised(d) => d.val.len(),
        }
    }
}

/// Result of a completed run.
pub struct TrainOutcome<T> {
    pub best: Models<T>,
    pub best_val: f64,
    pub best_iteration: u64,
    pub state: TrainState<T>,
    pub history: Vec<IterationRecord>,
    pub validations: Vec<ValidationRecord>,
}

/// Drives iterations over a fixed dataset.
pub struct Trainer<'a, T> {
    cfg: TrainConfig,
    data: TrainData<'a, T>,
    pub state: TrainState<T>,
    pub history: Vec<IterationRecord>,
    pub validations: Vec<ValidationRecord>,
    started: Instant,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(cfg: TrainConfig, data: TrainData<'a, T>) -> Result<Self> {
        let state = TrainState::fresh(&cfg)?;
        Self::resume(cfg, data, state)
    }

    pub fn resume(cfg: TrainConfig, data: TrainData<'a, T>, state: TrainState<T>) -> Result<Self> {
        cfg.validate()?;
        match (&data, cfg.method, &state.models) {
            (TrainData::Susan(d), Method::Susan, Models::Susan(_)) => {
                if d.target_train.is_empty() {
                    return Err(invalid("no target training slices"));
                }
            }
            (TrainData::Supervised(_), Method::SupervisedBaseline, Models::Supervised(_)) => {}
            _ => return Err(invalid("method, data and models disagree")),
        }
        if data.train_len() == 0 {
            return Err(invalid("no training slices"));
        }
        if data.val_len() == 0 {
            return Err(invalid("validation set is empty"));
        }
        Ok(Self {
            cfg,
            data,
            state,
            history: Vec::new(),
            validations: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iterations_per_epoch(&self) -> u64 {
        self.data.train_len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_iterations(&self) -> u64 {
        self.iterations_per_epoch() * self.cfg.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.total_iterations()
    }

    /// Reference-slice indices of batch `k` within `epoch`.
    fn batch_indices(&self, epoch: u64, k: u64) -> Vec<usize> {
        let n = self.data.train_len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(self.cfg.seed, &[100, epoch])));
        let lo = k as usize * self.cfg.batch_size;
        order[lo..(lo + self.cfg.batch_size).min(n)].to_vec()
    }

    /// Next `count` entries of the target stream: consecutive shuffled passes.
    fn target_indices(&mut self, count: usize, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        let mut perm_pass = u64::MAX;
        let mut perm: Vec<usize> = Vec::new();
        for _ in 0..count {
            let c = self.state.target_cursor;
            let pass = c / n as u64;
            if pass != perm_pass {
                perm = (0..n).collect();
                perm.shuffle(&mut rng_from_seed(derive_seed(self.cfg.seed, &[200, pass])));
                perm_pass = pass;
            }
            out.push(perm[(c % n as u64) as usize]);
            self.state.target_cursor += 1;
        }
        out
    }

    /// Validation loss of the current models.
    pub fn validation_loss(&self) -> Result<f64> {
        validation_loss(&self.cfg, &self.data, &self.state.models)
    }

    /// Runs one iteration (and the validation that closes an epoch, if due).
    pub fn step(&mut self) -> Result<IterationRecord> {
        if self.state.initial_val.is_none() {
            let v = self.validation_loss()?;
            self.record_validation(v, 0)?;
        }
        let per_epoch = self.iterations_per_epoch();
        let it = self.state.iteration;
        let (epoch, k) = (it / per_epoch, it % per_epoch);
        let idx = self.batch_indices(epoch, k);
        let cfg = self.cfg.clone();
        let (report, disc_x, disc_y) = match self.data {
            TrainData::Susan(d) => {
                let items: Vec<&LabeledSlice<T>> = idx.iter().map(|&i| &d.reference_train[i]).collect();
                let (x, masks) = labeled_batch(&items)?;
                let ti = self.target_indices(idx.len(), d.target_train.len());
                let ys: Vec<&Tensor4<T>> = ti.iter().map(|&i| &d.target_train[i]).collect();
                let y = stack_images(&ys)?;
                let (Models::Susan(m), Optimizers::Susan(o)) = (&mut self.state.models, &mut self.state.optimizers)
                else {
                    unreachable!("checked in resume")
                };
                let (report, fakes) = generator_step(m, o, &x, &masks, &y, &cfg.weights, cfg.gan_form)?;
                let (dx, dy) = discriminator_step(m, o, &x, &y, &fakes, cfg.gan_form)?;
                (report, dx, dy)
            }
            TrainData::Supervised(d) => {
                let items: Vec<&LabeledSlice<T>> = idx.iter().map(|&i| &d.train[i]).collect();
                let (x, masks) = labeled_batch(&items)?;
                let (Models::Supervised(n), Optimizers::Supervised(o)) =
                    (&mut self.state.models, &mut self.state.optimizers)
                else {
                    unreachable!("checked in resume")
                };
                (supervised_step(n, o, &x, &masks)?, 0.0, 0.0)
            }
        };
        self.state.iteration += 1;
        let rec = IterationRecord {
            iteration: self.state.iteration,
            epoch: epoch as usize + 1,
            report,
            disc_x,
            disc_y,
            wall_seconds: self.started.elapsed().as_secs_f64(),
        };
        self.history.push(rec);
        let epoch_done = k + 1 == per_epoch;
        let last = self.is_done();
        if epoch_done && ((epoch + 1) % self.cfg.validate_every as u64 == 0 || last) {
            let v = self.validation_loss()?;
            self.record_validation(v, epoch as usize + 1)?;
        }
        Ok(rec)
    }

    fn record_validation(&mut self, loss: f64, epoch: usize) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss at epoch {epoch}")));
        }
        let it = self.state.iteration;
        self.validations.push(ValidationRecord {
            iteration: it,
            epoch,
            loss,
        });
        log::info!("epoch {epoch} iteration {it}: validation loss {loss:.6}");
        match self.state.initial_val {
            None => self.state.initial_val = Some(loss),
            Some(init) if init > 0.0 && loss > self.cfg.divergence_factor * init => {
                self.state.diverging_for += 1;
                if self.state.diverging_for >= self.cfg.divergence_patience {
                    return Err(Error::Training(format!(
                        "diverged: validation loss {loss:.4} above {}x initial {init:.4} for {} validations",
                        self.cfg.divergence_factor, self.state.diverging_for
                    )));
                }
            }
            Some(_) => self.state.diverging_for = 0,
        }
        if self.state.best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
            self.state.best = Some((loss, it, self.state.models.clone()));
        }
        Ok(())
    }

    /// Iterates until the configured number of epochs is complete.
    pub fn run(mut self) -> Result<TrainOutcome<T>> {
        while !self.is_done() {
            self.step()?;
        }
        if self.state.initial_val.is_none() {
            let v = self.validation_loss()?;
            self.record_validation(v, 0)?;
        }
        let (best_val, best_iteration, best) = self.state.best.clone().expect("validated at least once");
        Ok(TrainOutcome {
            best,
            best_val,
            best_iteration,
            state: self.state,
            history: self.history,
            validations: self.validations,
        })
    }
}

const VAL_BATCH: usize = 8;

fn validation_loss<T: Scalar>(cfg: &TrainConfig, data: &TrainData<'_, T>, models: &Models<T>) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    match (data, models) {
        (TrainData::Susan(d), Models::Susan(m)) => {
            let n = d.reference_val.len();
            for lo in (0..n).step_by(VAL_BATCH) {
                let hi = (lo + VAL_BATCH).min(n);
                let items: Vec<&LabeledSlice<T>> = d.reference_val[lo..hi].iter().collect();
                let (x, masks) = labeled_batch(&items)?;
                let ys: Vec<&Tensor4<T>> = (lo..hi).map(|i| &d.target_val[i % d.target_val.len()]).collect();
                let y = stack_images(&ys)?;
                let r = evaluate_objective((&m.f, &m.b, &m.d_x, &m.d_y), &x, &masks, &y, &cfg.weights, cfg.gan_form)?;
                let mut v = r.total;
                if cfg.selection == SelectionLoss::WithDiscriminators {
                    let (fx, _) = m.f.infer(&x)?;
                    let (by, _) = m.b.infer(&y)?;
                    let (oy, _) = adversarial_from_probs(&m.d_y.probabilities(&y)?, &m.d_y.probabilities(&fx.expect("head"))?)?;
                    let (ox, _) = adversarial_from_probs(&m.d_x.probabilities(&x)?, &m.d_x.probabilities(&by.expect("head"))?)?;
                    v += cfg.weights.gan * (ox + oy);
                }
                total += v * (hi - lo) as f64;
                count += hi - lo;
            }
        }
        (TrainData::Supervised(d), Models::Supervised(net)) => {
            let n = d.val.len();
            for lo in (0..n).step_by(VAL_BATCH) {
                let hi = (lo + VAL_BATCH).min(n);
                let items: Vec<&LabeledSlice<T>> = d.val[lo..hi].iter().collect();
                let (x, masks) = labeled_batch(&items)?;
                total += supervised_loss(net, &x, &masks)? * (hi - lo) as f64;
                count += hi - lo;
            }
        }
        _ => return Err(invalid("method, data and models disagree")),
    }
    Ok(total / count as f64)
}

/// Trains a supervised baseline to completion.
pub fn train_supervised<T: Scalar>(cfg: &TrainConfig, data: &SupervisedData<T>) -> Result<TrainOutcome<T>> {
    let cfg = TrainConfig {
        method: Method::SupervisedBaseline,
        ..cfg.clone()
    };
    Trainer::new(cfg, TrainData::Supervised(data))?.run()
}

/// Trains the joint model to completion.
pub fn train<T: Scalar>(cfg: &TrainConfig, data: &SusanData<T>) -> Result<TrainOutcome<T>> {
    let cfg = TrainConfig {
        method: Method::Susan,
        ..cfg.clone()
    };
    Trainer::new(cfg, TrainData::Susan(data))?.run()
}
