//! Realism score of images: pixel accuracy of a segmenter trained on real
//! target-domain slices.

use super::overlap::ConfusionCounts;
use crate::error::{invalid, Result};
use crate::networks::RNet;
use crate::phantom::NUM_CLASSES;
use crate::tensor::{Scalar, Tensor4};
use crate::trainer::{segment, train_supervised, LabeledSlice, SupervisedData, TrainConfig};

/// Depth of the stand-in classifier.
pub const FCN_DEPTH: usize = 2;

#[derive(Clone, Debug)]
pub struct FcnClassifier<T> {
    net: RNet<T>,
    trained: [bool; NUM_CLASSES],
}

fn classes_seen<'a>(labels: impl IntoIterator<Item = &'a [u8]>) -> [bool; NUM_CLASSES] {
    let mut seen = [false; NUM_CLASSES];
    for plane in labels {
        for &l in plane {
            if let Some(s) = seen.get_mut(l as usize) {
                *s = true;
            }
        }
    }
    seen
}

impl<T: Scalar> FcnClassifier<T> {
    /// Trains a fresh classifier on real slices with `cfg`'s optimizer and
    /// schedule, at depth [`FCN_DEPTH`].
    pub fn train(cfg: &TrainConfig, data: &SupervisedData<T>) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.rnet.depth = FCN_DEPTH;
        let out = train_supervised(&cfg, data)?;
        Ok(Self::from_network(
            out.best.target_segmenter().clone(),
            &data.train,
        ))
    }

    /// Wraps an already trained segmenter; `train` lists its training slices.
    pub fn from_network(net: RNet<T>, train: &[LabeledSlice<T>]) -> Self {
        Self {
            net,
            trained: classes_seen(train.iter().map(|s| &s.labels.values[..])),
        }
    }

    pub fn trained_classes(&self) -> [bool; NUM_CLASSES] {
        self.trained
    }

    pub fn counts(&self, images: &Tensor4<T>, truths: &[u8]) -> Result<ConfusionCounts> {
        if images.len() != truths.len() {
            return Err(invalid(format!(
                "{} truth labels for {} pixels",
                truths.len(),
                images.len()
            )));
        }
        let pred = segment(&self.net, images)?;
        let mut c = ConfusionCounts::new(NUM_CLASSES);
        c.add(&pred, truths)?;
        Ok(c)
    }

    /// Pixel accuracy over classes present in `truths`, excluding any class
    /// the classifier never saw in training.
    pub fn score(&self, images: &Tensor4<T>, truths: &[u8]) -> Result<f64> {
        let c = self.counts(images, truths)?;
        let excluded: Vec<u8> = (0..NUM_CLASSES as u8)
            .filter(|&k| !self.trained[k as usize] && c.total[k as usize] > 0)
            .collect();
        for k in &excluded {
            log::warn!("class {k} is absent from the classifier's training masks; excluded from the score");
        }
        Ok(c.accuracy(&excluded))
    }
}

/// Trains a classifier on `real_train` and scores `images` against `truths`.
pub fn fcn_score<T: Scalar>(
    cfg: &TrainConfig,
    real_train: &SupervisedData<T>,
    images: &Tensor4<T>,
    truths: &[u8],
) -> Result<f64> {
    FcnClassifier::train(cfg, real_train)?.score(images, truths)
}
