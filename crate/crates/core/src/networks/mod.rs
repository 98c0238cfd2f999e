//! The dual-output encoder-decoder generator and the patch discriminator.

mod discriminator;
mod rnet;

pub use discriminator::{DiscriminatorConfig, PatchDiscriminator};
pub use rnet::{RNet, RNetConfig, RNetOutput};

use crate::error::{Error, Result};
use crate::tensor::io::{DType, Entry};
use crate::tensor::{BatchStats, Bound, Graph, NodeId, Scalar, Shape, Tensor4};

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BN_MOMENTUM: f64 = 0.99;

/// Named, ordered learnable tensors plus batch-norm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor4<T>>,
    pub running: Vec<RunningStats<T>>,
}

impl<T: Scalar> ParamSet<T> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            running: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor4<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Folds recorded batch statistics into the running averages, in the
    /// order the layers were executed.
    pub fn absorb(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let keep = T::of(BN_MOMENTUM);
        let take = T::one() - keep;
        for (layer, s) in stats {
            let r = &mut self.running[*layer];
            for (m, &b) in r.mean.iter_mut().zip(&s.mean) {
                *m = keep * *m + take * b;
            }
            for (v, &b) in r.var.iter_mut().zip(&s.var) {
                *v = keep * *v + take * b;
            }
        }
    }

    /// SUSN entries named `<prefix>.<param>`; running statistics are stored as
    /// `<prefix>.<bn>.running_mean` / `.running_var` with shape `1xCx1x1`.
    pub fn entries(&self, prefix: &str, dtype: DType) -> Vec<Entry> {
        let mut out: Vec<Entry> = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| Entry::tensor(format!("{prefix}.{n}"), t, dtype))
            .collect();
        for r in &self.running {
            let shape = Shape::new(1, r.mean.len(), 1, 1);
            for (suffix, v) in [("running_mean", &r.mean), ("running_var", &r.var)] {
                let t = Tensor4::from_vec(shape, v.clone()).expect("running stat shape");
                out.push(Entry::tensor(format!("{prefix}.{}.{suffix}", r.name), &t, dtype));
            }
        }
        out
    }

    /// Loads values written by [`ParamSet::entries`]; every tensor must be
    /// present with an identical shape.
    pub fn load_entries(&mut self, prefix: &str, entries: &[Entry]) -> Result<()> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing {name}")))
        };
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let e = find(&format!("{prefix}.{n}"))?;
            let v = e.to_tensor::<T>()?;
            if v.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    layer: format!("{prefix}.{n}"),
                    expected: t.shape().to_string(),
                    actual: v.shape().to_string(),
                });
            }
            *t = v;
        }
        for r in &mut self.running {
            for (suffix, dst) in [("running_mean", &mut r.mean), ("running_var", &mut r.var)] {
                let name = format!("{prefix}.{}.{suffix}", r.name);
                let v = find(&name)?.to_tensor::<T>()?.into_vec();
                if v.len() != dst.len() {
                    return Err(Error::ShapeMismatch {
                        layer: name,
                        expected: dst.len().to_string(),
                        actual: v.len().to_string(),
                    });
                }
                *dst = v;
            }
        }
        Ok(())
    }
}

/// Common surface of every trainable network.
pub trait Network<T: Scalar> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;

    fn parameter_count(&self) -> usize {
        self.params().count()
    }

    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        g.bind(&self.params().tensors, trainable)
    }
}

/// Sequential reader over bound parameters and batch-norm buffers, used by
/// forward passes that walk layers in construction order.
pub(crate) struct Walker<'a, T> {
    params: &'a ParamSet<T>,
    bound: &'a Bound,
    next: usize,
    next_bn: usize,
    pub stats: Vec<(usize, BatchStats<T>)>,
}

impl<'a, T: Scalar> Walker<'a, T> {
    pub fn new(params: &'a ParamSet<T>, bound: &'a Bound) -> Result<Self> {
        if bound.nodes.len() != params.tensors.len() {
            return Err(Error::Graph(format!(
                "binding holds {} tensors, network has {}",
                bound.nodes.len(),
                params.tensors.len()
            )));
        }
        Ok(Self {
            params,
            bound,
            next: 0,
            next_bn: 0,
            stats: Vec::new(),
        })
    }

    fn take(&mut self) -> NodeId {
        let id = self.bound.nodes[self.next];
        self.next += 1;
        id
    }

    pub fn conv(&mut self, g: &mut Graph<T>, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let w = self.take();
        let b = self.take();
        g.conv2d(x, w, Some(b), stride, pad)
            .map_err(|e| self.rename(e))
    }

    pub fn deconv(&mut self, g: &mut Graph<T>, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let w = self.take();
        let b = self.take();
        g.deconv2d(x, w, Some(b), stride, pad)
            .map_err(|e| self.rename(e))
    }

    pub fn batch_norm(&mut self, g: &mut Graph<T>, x: NodeId, mode: crate::tensor::Mode) -> Result<NodeId> {
        let gamma = self.take();
        let beta = self.take();
        let layer = self.next_bn;
        self.next_bn += 1;
        let eps = T::of(crate::tensor::BN_EPS);
        match mode {
            crate::tensor::Mode::Train => {
                let (y, s) = g.batch_norm_train(x, gamma, beta, eps)?;
                self.stats.push((layer, s));
                Ok(y)
            }
            crate::tensor::Mode::Eval => {
                let r = &self.params.running[layer];
                g.batch_norm_eval(x, gamma, beta, &r.mean, &r.var, eps)
            }
        }
    }

    fn rename(&self, e: Error) -> Error {
        let name = self
            .params
            .names
            .get(self.next.saturating_sub(2))
            .cloned()
            .unwrap_or_default();
        match e {
            Error::ShapeMismatch {
                expected, actual, ..
            } => Error::ShapeMismatch {
                layer: name,
                expected,
                actual,
            },
            other => other,
        }
    }

    pub fn finish(self) -> Vec<(usize, BatchStats<T>)> {
        debug_assert_eq!(self.next, self.params.tensors.len());
        self.stats
    }
}

/// Builds parameter sets layer by layer with He-initialized weights.
pub(crate) struct Builder<T> {
    pub params: ParamSet<T>,
    seed: u64,
}

impl<T: Scalar> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: ParamSet::new(),
            seed,
        }
    }

    fn weight(&mut self, name: String, shape: Shape, fan_in: usize) -> Result<()> {
        let idx = self.params.tensors.len() as u64;
        let w = crate::tensor::he_initialize(shape, fan_in, crate::tensor::derive_seed(self.seed, &[idx]))?;
        self.params.push(name, w);
        Ok(())
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        self.weight(format!("{name}.weight"), Shape::new(cout, cin, k, k), cin * k * k)?;
        self.params
            .push(format!("{name}.bias"), Tensor4::zeros(Shape::new(1, cout, 1, 1)));
        Ok(())
    }

    /// Transposed convolution; each output pixel of a stride-`s` layer sees
    /// `cin * (k / s)^2` inputs, which is used as the fan-in.
    pub fn deconv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<()> {
        let taps = (k / stride.max(1)).max(1);
        self.weight(format!("{name}.weight"), Shape::new(cin, cout, k, k), cin * taps * taps)?;
        self.params
            .push(format!("{name}.bias"), Tensor4::zeros(Shape::new(1, cout, 1, 1)));
        Ok(())
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) {
        self.params.push(
            format!("{name}.scale"),
            Tensor4::filled(Shape::new(1, c, 1, 1), T::one()),
        );
        self.params
            .push(format!("{name}.shift"), Tensor4::zeros(Shape::new(1, c, 1, 1)));
        self.params.running.push(RunningStats {
            name: name.to_string(),
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        });
    }
}
