//! Standalone layer descriptions and a one-shot `apply_layer` entry point.

use super::graph::Graph;
use super::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Batch-norm behaviour: batch statistics while training, running
/// statistics otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub enum LayerKind<T> {
    /// Weight `[C_out, C_in, kh, kw]`, bias `[C_out]`.
    Conv {
        weight: Tensor4<T>,
        bias: Tensor4<T>,
        stride: usize,
        pad: usize,
    },
    /// Weight `[C_in, C_out, kh, kw]`, bias `[C_out]`.
    Deconv {
        weight: Tensor4<T>,
        bias: Tensor4<T>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        scale: Tensor4<T>,
        shift: Tensor4<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
    },
    Relu,
    LeakyRelu(T),
    Sigmoid,
    Tanh,
    Softmax,
}

#[derive(Clone, Debug)]
pub struct LayerSpec<T> {
    pub name: String,
    pub kind: LayerKind<T>,
}

impl<T: Scalar> LayerSpec<T> {
    pub fn new(name: impl Into<String>, kind: LayerKind<T>) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    pub fn conv(weight: Tensor4<T>, bias: Tensor4<T>, stride: usize, pad: usize) -> Self {
        Self::new(
            "conv",
            LayerKind::Conv {
                weight,
                bias,
                stride,
                pad,
            },
        )
    }

    /// Builds the layer into `g` on top of `x`.
    pub fn build(
        &self,
        g: &mut Graph<T>,
        x: super::NodeId,
        mode: Mode,
    ) -> Result<super::NodeId> {
        let named = |e: Error| match e {
            Error::ShapeMismatch {
                expected, actual, ..
            } => Error::ShapeMismatch {
                layer: self.name.clone(),
                expected,
                actual,
            },
            other => other,
        };
        match &self.kind {
            LayerKind::Conv {
                weight,
                bias,
                stride,
                pad,
            } => {
                let w = g.variable(weight.clone());
                let b = g.variable(bias.clone());
                g.conv2d(x, w, Some(b), *stride, *pad).map_err(named)
            }
            LayerKind::Deconv {
                weight,
                bias,
                stride,
                pad,
            } => {
                let w = g.variable(weight.clone());
                let b = g.variable(bias.clone());
                g.deconv2d(x, w, Some(b), *stride, *pad).map_err(named)
            }
            LayerKind::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
            } => {
                let s = g.variable(scale.clone());
                let b = g.variable(shift.clone());
                let eps = T::of(BN_EPS);
                match mode {
                    Mode::Train => g.batch_norm_train(x, s, b, eps).map(|r| r.0).map_err(named),
                    Mode::Eval => g
                        .batch_norm_eval(x, s, b, running_mean, running_var, eps)
                        .map_err(named),
                }
            }
            LayerKind::Relu => Ok(g.relu(x)),
            LayerKind::LeakyRelu(a) => g.leaky_relu(x, *a),
            LayerKind::Sigmoid => Ok(g.sigmoid(x)),
            LayerKind::Tanh => Ok(g.tanh(x)),
            LayerKind::Softmax => Ok(g.softmax(x)),
        }
    }
}

/// Applies a single layer to `x`.
pub fn apply_layer<T: Scalar>(spec: &LayerSpec<T>, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
    x.ensure_finite(&format!("input to {}", spec.name))?;
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let y = spec.build(&mut g, xi, mode)?;
    Ok(g.value(y).clone())
}
