//! Tape-based reverse-mode differentiation over [`Tensor4`] values.
//!
//! Every operation appends a node holding its forward value and whatever the
//! backward pass needs. Nodes are only ever appended, so the tape order is a
//! valid topological order and [`Graph::backward`] walks it in reverse.

use std::sync::Arc;

use super::kernels::{conv_output_size, deconv_output_size, gemm, Window};
use super::{Scalar, Shape, Tensor4};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-pixel class labels for a batch, row-major over (N, H, W).
///
/// `from_target` records whether the labels come from a target (unannotated)
/// domain. Training in joint mode refuses any loss built from such labels.
#[derive(Clone, Debug)]
pub struct Labels {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub values: Arc<[u8]>,
    pub from_target: bool,
}

impl Labels {
    pub fn new(n: usize, h: usize, w: usize, values: Vec<u8>, from_target: bool) -> Result<Self> {
        if values.len() != n * h * w {
            return Err(Error::ShapeMismatch {
                layer: "labels".into(),
                expected: format!("{} labels for {n}x{h}x{w}", n * h * w),
                actual: format!("{}", values.len()),
            });
        }
        Ok(Self {
            n,
            h,
            w,
            values: values.into(),
            from_target,
        })
    }
}

/// Batch statistics computed by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased per-channel variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        win: Window,
    },
    Deconv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        /// Sliding window of the adjoint convolution (output -> input).
        win: Window,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Batch statistics (train) versus frozen running statistics (eval).
        batch: bool,
    },
    Relu(NodeId),
    LeakyRelu(NodeId, T),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    Concat(NodeId, NodeId),
    Sub(NodeId, NodeId),
    SumAll(NodeId),
    MeanAbs(NodeId),
    L1Mean(NodeId, NodeId),
    SoftmaxXent {
        logits: NodeId,
        labels: Labels,
    },
    Nll {
        probs: NodeId,
        labels: Labels,
        eps: T,
    },
    MeanLogSigmoid {
        x: NodeId,
        sign: T,
        eps: T,
    },
    MeanSqTarget {
        x: NodeId,
        target: T,
    },
    Weighted(Vec<(NodeId, T)>),
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Parameter leaves of one network bound into a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    pub nodes: Vec<NodeId>,
    pub trainable: bool,
}

/// A recorded computation. Build it with the op methods, then call
/// [`Graph::backward`] on a scalar node.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    label_uses: Vec<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(layer: &str, expected: impl ToString, actual: impl ToString) -> Error {
    Error::ShapeMismatch {
        layer: layer.to_string(),
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            label_uses: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor4<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; no gradient is ever produced for it.
    pub fn input(&mut self, t: Tensor4<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is wanted.
    pub fn variable(&mut self, t: Tensor4<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Copies a node's value into a fresh constant leaf, cutting gradient flow.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.input(v)
    }

    /// Binds a parameter list as leaves. Frozen bindings still let gradients
    /// flow through to the data path, they just never produce parameter grads.
    pub fn bind(&mut self, params: &[Tensor4<T>], trainable: bool) -> Bound {
        let nodes = params
            .iter()
            .map(|p| self.push(p.clone(), Op::Leaf, trainable))
            .collect();
        Bound { nodes, trainable }
    }

    /// Number of losses built from labels, split as (reference, target).
    pub fn label_provenance(&self) -> (usize, usize) {
        let target = self.label_uses.iter().filter(|&&t| t).count();
        (self.label_uses.len() - target, target)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c() != xs.c() {
            return Err(mismatch(
                "conv2d",
                format!("input with {} channels", ws.c()),
                xs,
            ));
        }
        let oh = conv_output_size(xs.h(), ws.h(), stride, pad)
            .ok_or_else(|| mismatch("conv2d", format!("input covering kernel {ws}"), xs))?;
        let ow = conv_output_size(xs.w(), ws.w(), stride, pad)
            .ok_or_else(|| mismatch("conv2d", format!("input covering kernel {ws}"), xs))?;
        if let Some(b) = b {
            if self.shape(b).len() != ws.n() {
                return Err(mismatch("conv2d bias", ws.n(), self.shape(b)));
            }
        }
        let win = Window {
            channels: xs.c(),
            h: xs.h(),
            w: xs.w(),
            kh: ws.h(),
            kw: ws.w(),
            stride,
            pad,
            oh,
            ow,
        };
        let out_c = ws.n();
        let mut out = Tensor4::zeros(Shape::new(xs.n(), out_c, oh, ow));
        let mut col = vec![T::zero(); win.rows() * win.cols()];
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            for n in 0..xs.n() {
                win.im2col(xv.item(n), &mut col);
                gemm(
                    out_c,
                    win.rows(),
                    win.cols(),
                    wv,
                    false,
                    &col,
                    false,
                    out.item_mut(n),
                    false,
                );
            }
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data();
                add_channel_bias(&mut out, bv);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Conv { x, w, b, win }, rg))
    }

    /// Transposed convolution with weight layout `[C_in, C_out, kh, kw]`.
    pub fn deconv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.n() != xs.c() {
            return Err(mismatch(
                "deconv2d",
                format!("input with {} channels", ws.n()),
                xs,
            ));
        }
        let oh = deconv_output_size(xs.h(), ws.h(), stride, pad)
            .ok_or_else(|| mismatch("deconv2d", "positive output size", xs))?;
        let ow = deconv_output_size(xs.w(), ws.w(), stride, pad)
            .ok_or_else(|| mismatch("deconv2d", "positive output size", xs))?;
        let out_c = ws.c();
        if let Some(b) = b {
            if self.shape(b).len() != out_c {
                return Err(mismatch("deconv2d bias", out_c, self.shape(b)));
            }
        }
        // Adjoint window maps the (oh, ow) output onto the (h, w) input grid.
        let win = Window {
            channels: out_c,
            h: oh,
            w: ow,
            kh: ws.h(),
            kw: ws.w(),
            stride,
            pad,
            oh: xs.h(),
            ow: xs.w(),
        };
        if conv_output_size(oh, ws.h(), stride, pad) != Some(xs.h())
            || conv_output_size(ow, ws.w(), stride, pad) != Some(xs.w())
        {
            return Err(mismatch("deconv2d", "invertible stride arithmetic", xs));
        }
        let mut out = Tensor4::zeros(Shape::new(xs.n(), out_c, oh, ow));
        let mut col = vec![T::zero(); win.rows() * win.cols()];
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            for n in 0..xs.n() {
                // col (Cout*k*k x HW) = W^T (Cout*k*k x Cin) * x (Cin x HW)
                gemm(
                    win.rows(),
                    xs.c(),
                    win.cols(),
                    wv,
                    true,
                    xv.item(n),
                    false,
                    &mut col,
                    false,
                );
                win.col2im(&col, out.item_mut(n));
            }
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data();
                add_channel_bias(&mut out, bv);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Deconv { x, w, b, win }, rg))
    }

    /// Batch normalization over (N, H, W) per channel using the batch's own
    /// statistics. Returns the output node and the batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<(NodeId, BatchStats<T>)> {
        let xs = self.shape(x);
        self.check_affine("batch_norm", xs, gamma, beta)?;
        let (c, plane) = (xs.c(), xs.plane());
        let m = xs.n() * plane;
        if m < 2 {
            return Err(mismatch("batch_norm", "at least 2 values per channel", xs));
        }
        let mf = T::of(m as f64);
        let xv = &self.nodes[x.0].value;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for n in 0..xs.n() {
                s = s + xv.item(n)[ch * plane..(ch + 1) * plane].iter().copied().sum();
            }
            let mu = s / mf;
            let mut q = T::zero();
            for n in 0..xs.n() {
                for &v in &xv.item(n)[ch * plane..(ch + 1) * plane] {
                    q = q + (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = q / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, &mean, &inv_std);
        let unbiased = var
            .iter()
            .map(|&v| v * mf / T::of((m - 1) as f64))
            .collect();
        let rg = self.rg(&[x, gamma, beta]);
        let id = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: true,
            },
            rg,
        );
        Ok((id, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        self.check_affine("batch_norm", xs, gamma, beta)?;
        if running_mean.len() != xs.c() || running_var.len() != xs.c() {
            return Err(mismatch(
                "batch_norm running statistics",
                xs.c(),
                running_mean.len(),
            ));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let (xhat, out) = self.normalize(x, gamma, beta, running_mean, &inv_std);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: false,
            },
            rg,
        ))
    }

    fn check_affine(&self, layer: &str, xs: Shape, gamma: NodeId, beta: NodeId) -> Result<()> {
        for p in [gamma, beta] {
            if self.shape(p).len() != xs.c() {
                return Err(mismatch(
                    layer,
                    format!("{} affine parameters", xs.c()),
                    self.shape(p),
                ));
            }
        }
        Ok(())
    }

    fn normalize(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        inv_std: &[T],
    ) -> (Vec<T>, Tensor4<T>) {
        let xv = &self.nodes[x.0].value;
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let xs = xv.shape();
        let plane = xs.plane();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = Tensor4::zeros(xs);
        for n in 0..xs.n() {
            for ch in 0..xs.c() {
                let base = (n * xs.c() + ch) * plane;
                for i in base..base + plane {
                    let h = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out.data_mut()[i] = g[ch] * h + b[ch];
                }
            }
        }
        (xhat, out)
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let out = self.nodes[x.0].value.map(f);
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: T) -> Result<NodeId> {
        if !(alpha > T::zero() && alpha < T::one()) {
            return Err(Error::InvalidArgument(format!(
                "leaky-relu slope {alpha} outside (0, 1)"
            )));
        }
        Ok(self.unary(
            x,
            move |v| if v > T::zero() { v } else { alpha * v },
            Op::LeakyRelu(x, alpha),
        ))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let out = softmax_channels(&self.nodes[x.0].value);
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Channel-wise concatenation `[a, b]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n(), sa.h(), sa.w()) != (sb.n(), sb.h(), sb.w()) {
            return Err(mismatch("concat", sa, sb));
        }
        let shape = Shape::new(sa.n(), sa.c() + sb.c(), sa.h(), sa.w());
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..sa.n() {
            data.extend_from_slice(self.nodes[a.0].value.item(n));
            data.extend_from_slice(self.nodes[b.0].value.item(n));
        }
        let out = Tensor4::from_vec(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p - q).collect();
        let out = Tensor4::from_vec(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    fn same_shape(&self, layer: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(layer, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn scalar_node(&mut self, v: T, op: Op<T>, deps: &[NodeId]) -> NodeId {
        let rg = self.rg(deps);
        self.push(Tensor4::scalar(v), op, rg)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.sum();
        self.scalar_node(v, Op::SumAll(x), &[x])
    }

    pub fn mean_abs(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let v = xv.data().iter().map(|v| v.abs()).sum::<T>() / T::of(xv.len() as f64);
        self.scalar_node(v, Op::MeanAbs(x), &[x])
    }

    /// Mean absolute difference between two equally shaped tensors.
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("l1", a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let v = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| (p - q).abs())
            .sum::<T>()
            / T::of(av.len() as f64);
        Ok(self.scalar_node(v, Op::L1Mean(a, b), &[a, b]))
    }

    fn check_labels(&mut self, layer: &str, s: Shape, labels: &Labels) -> Result<()> {
        if (labels.n, labels.h, labels.w) != (s.n(), s.h(), s.w()) {
            return Err(mismatch(
                layer,
                format!("{}x_x{}x{}", s.n(), s.h(), s.w()),
                format!("labels {}x{}x{}", labels.n, labels.h, labels.w),
            ));
        }
        if let Some(&bad) = labels.values.iter().find(|&&l| l as usize >= s.c()) {
            return Err(Error::InvalidArgument(format!(
                "{layer}: label {bad} outside 0..{}",
                s.c()
            )));
        }
        self.label_uses.push(labels.from_target);
        Ok(())
    }

    /// Mean over pixels of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &Labels) -> Result<NodeId> {
        let s = self.shape(logits);
        self.check_labels("softmax_cross_entropy", s, labels)?;
        let lv = &self.nodes[logits.0].value;
        let (c, plane) = (s.c(), s.plane());
        let mut total = 0.0f64;
        for n in 0..s.n() {
            let item = lv.item(n);
            for p in 0..plane {
                let mut mx = T::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(item[ch * plane + p]);
                }
                let mut z = T::zero();
                for ch in 0..c {
                    z = z + (item[ch * plane + p] - mx).exp();
                }
                let lab = labels.values[n * plane + p] as usize;
                let lse = mx + z.ln();
                total += (lse - item[lab * plane + p]).as_f64();
            }
        }
        let v = T::of(total / (s.n() * plane) as f64);
        let op = Op::SoftmaxXent {
            logits,
            labels: labels.clone(),
        };
        Ok(self.scalar_node(v, op, &[logits]))
    }

    /// Mean over pixels of `-log clamp(p[label], eps, 1)` for probabilities
    /// laid out over channels.
    pub fn nll(&mut self, probs: NodeId, labels: &Labels, eps: T) -> Result<NodeId> {
        let s = self.shape(probs);
        self.check_labels("nll", s, labels)?;
        let pv = &self.nodes[probs.0].value;
        let plane = s.plane();
        let mut total = 0.0f64;
        for n in 0..s.n() {
            let item = pv.item(n);
            for p in 0..plane {
                let lab = labels.values[n * plane + p] as usize;
                total -= item[lab * plane + p].max(eps).ln().as_f64();
            }
        }
        let v = T::of(total / (s.n() * plane) as f64);
        let op = Op::Nll {
            probs,
            labels: labels.clone(),
            eps,
        };
        Ok(self.scalar_node(v, op, &[probs]))
    }

    /// Mean of `log clamp(sigmoid(sign * x), eps, 1 - eps)`.
    ///
    /// With `sign = 1` this is `mean log D`, with `sign = -1` it is
    /// `mean log(1 - D)` for `D = sigmoid(x)`.
    pub fn mean_log_sigmoid(&mut self, x: NodeId, sign: T, eps: T) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let lo = eps.ln();
        let hi = (T::one() - eps).ln();
        let total: f64 = xv
            .data()
            .iter()
            .map(|&v| log_sigmoid(sign * v).max(lo).min(hi).as_f64())
            .sum();
        let v = T::of(total / xv.len() as f64);
        self.scalar_node(v, Op::MeanLogSigmoid { x, sign, eps }, &[x])
    }

    /// Mean of `(x - target)^2`.
    pub fn mean_sq_target(&mut self, x: NodeId, target: T) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let total: f64 = xv
            .data()
            .iter()
            .map(|&v| ((v - target) * (v - target)).as_f64())
            .sum();
        let v = T::of(total / xv.len() as f64);
        self.scalar_node(v, Op::MeanSqTarget { x, target }, &[x])
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        let mut v = T::zero();
        for &(id, w) in terms {
            if self.shape(id) != Shape::scalar() {
                return Err(mismatch("weighted_sum", Shape::scalar(), self.shape(id)));
            }
            v = v + w * self.nodes[id.0].value.value();
        }
        let deps: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        Ok(self.scalar_node(v, Op::Weighted(terms.to_vec()), &deps))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("node {} not in graph", loss.0)));
        }
        let ls = self.shape(loss);
        if ls != Shape::scalar() {
            return Err(Error::Graph(format!("loss must be scalar, got {ls}")));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor4::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor4<T>>], id: NodeId, f: impl FnOnce(&mut [T])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        let t = slot.get_or_insert_with(|| Tensor4::zeros(self.nodes[id.0].value.shape()));
        f(t.data_mut());
    }

    fn backward_node(&self, i: usize, g: &Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, win } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let out_c = wv.shape().n();
                let (rows, cols) = (win.rows(), win.cols());
                let need_w = self.nodes[w.0].requires_grad;
                let need_x = self.nodes[x.0].requires_grad;
                let mut col = vec![T::zero(); rows * cols];
                let mut dw = vec![T::zero(); wv.len()];
                let mut dx = if need_x {
                    vec![T::zero(); xv.len()]
                } else {
                    Vec::new()
                };
                let item_in = xv.shape().item();
                for n in 0..xv.shape().n() {
                    let gy = g.item(n);
                    if need_w {
                        win.im2col(xv.item(n), &mut col);
                        gemm(out_c, cols, rows, gy, false, &col, true, &mut dw, true);
                    }
                    if need_x {
                        gemm(rows, out_c, cols, wv.data(), true, gy, false, &mut col, false);
                        win.col2im(&col, &mut dx[n * item_in..(n + 1) * item_in]);
                    }
                }
                if need_w {
                    self.accumulate(grads, *w, |d| add_into(d, &dw));
                }
                if need_x {
                    self.accumulate(grads, *x, |d| add_into(d, &dx));
                }
                if let Some(b) = b {
                    let db = channel_sums(g);
                    self.accumulate(grads, *b, |d| add_into(d, &db));
                }
            }
            Op::Deconv { x, w, b, win } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let cin = xv.shape().c();
                let (rows, cols) = (win.rows(), win.cols());
                let need_w = self.nodes[w.0].requires_grad;
                let need_x = self.nodes[x.0].requires_grad;
                let mut col = vec![T::zero(); rows * cols];
                let mut dw = vec![T::zero(); wv.len()];
                let mut dx = if need_x {
                    vec![T::zero(); xv.len()]
                } else {
                    Vec::new()
                };
                let item_in = xv.shape().item();
                for n in 0..xv.shape().n() {
                    win.im2col(g.item(n), &mut col);
                    if need_x {
                        gemm(
                            cin,
                            rows,
                            cols,
                            wv.data(),
                            false,
                            &col,
                            false,
                            &mut dx[n * item_in..(n + 1) * item_in],
                            false,
                        );
                    }
                    if need_w {
                        gemm(cin, cols, rows, xv.item(n), false, &col, true, &mut dw, true);
                    }
                }
                if need_w {
                    self.accumulate(grads, *w, |d| add_into(d, &dw));
                }
                if need_x {
                    self.accumulate(grads, *x, |d| add_into(d, &dx));
                }
                if let Some(b) = b {
                    let db = channel_sums(g);
                    self.accumulate(grads, *b, |d| add_into(d, &db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let s = g.shape();
                let plane = s.plane();
                let c = s.c();
                let gam = self.nodes[gamma.0].value.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for n in 0..s.n() {
                    for ch in 0..c {
                        let base = (n * c + ch) * plane;
                        for k in base..base + plane {
                            dgamma[ch] = dgamma[ch] + gd[k] * xhat[k];
                            dbeta[ch] = dbeta[ch] + gd[k];
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); s.len()];
                    let m = T::of((s.n() * plane) as f64);
                    for ch in 0..c {
                        let k_scale = gam[ch] * inv_std[ch];
                        for n in 0..s.n() {
                            let base = (n * c + ch) * plane;
                            for k in base..base + plane {
                                dx[k] = if *batch {
                                    // dy*gamma has sum dbeta*gamma and
                                    // xhat-projection dgamma*gamma.
                                    k_scale * (gd[k] - dbeta[ch] / m - xhat[k] * dgamma[ch] / m)
                                } else {
                                    k_scale * gd[k]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, |d| add_into(d, &dx));
                }
                self.accumulate(grads, *gamma, |d| add_into(d, &dgamma));
                self.accumulate(grads, *beta, |d| add_into(d, &dbeta));
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                self.accumulate(grads, *x, |d| {
                    for ((d, &gv), &v) in d.iter_mut().zip(gd).zip(xv) {
                        if v > T::zero() {
                            *d = *d + gv;
                        }
                    }
                });
            }
            Op::LeakyRelu(x, alpha) => {
                let xv = self.nodes[x.0].value.data();
                let a = *alpha;
                self.accumulate(grads, *x, |d| {
                    for ((d, &gv), &v) in d.iter_mut().zip(gd).zip(xv) {
                        *d = *d + if v > T::zero() { gv } else { a * gv };
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |d| {
                    for ((d, &gv), &s) in d.iter_mut().zip(gd).zip(y) {
                        *d = *d + gv * s * (T::one() - s);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |d| {
                    for ((d, &gv), &t) in d.iter_mut().zip(gd).zip(y) {
                        *d = *d + gv * (T::one() - t * t);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let s = y.shape();
                let (c, plane) = (s.c(), s.plane());
                let mut dx = vec![T::zero(); s.len()];
                for n in 0..s.n() {
                    let base = n * c * plane;
                    for p in 0..plane {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let k = base + ch * plane + p;
                            dot = dot + gd[k] * y.data()[k];
                        }
                        for ch in 0..c {
                            let k = base + ch * plane + p;
                            dx[k] = y.data()[k] * (gd[k] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, |d| add_into(d, &dx));
            }
            Op::Concat(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (ia, ib) = (sa.item(), sb.item());
                self.accumulate(grads, *a, |d| {
                    for n in 0..sa.n() {
                        let src = &gd[n * (ia + ib)..n * (ia + ib) + ia];
                        add_into(&mut d[n * ia..(n + 1) * ia], src);
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for n in 0..sb.n() {
                        let src = &gd[n * (ia + ib) + ia..(n + 1) * (ia + ib)];
                        add_into(&mut d[n * ib..(n + 1) * ib], src);
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| {
                    for (d, &gv) in d.iter_mut().zip(gd) {
                        *d = *d - gv;
                    }
                });
            }
            Op::SumAll(x) => {
                let s = g.value();
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d = *d + s));
            }
            Op::MeanAbs(x) => {
                let xv = self.nodes[x.0].value.data();
                let s = g.value() / T::of(xv.len() as f64);
                self.accumulate(grads, *x, |d| {
                    for (d, &v) in d.iter_mut().zip(xv) {
                        *d = *d + s * sign(v);
                    }
                });
            }
            Op::L1Mean(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let s = g.value() / T::of(av.len() as f64);
                self.accumulate(grads, *a, |d| {
                    for ((d, &p), &q) in d.iter_mut().zip(av).zip(bv) {
                        *d = *d + s * sign(p - q);
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, &p), &q) in d.iter_mut().zip(av).zip(bv) {
                        *d = *d - s * sign(p - q);
                    }
                });
            }
            Op::SoftmaxXent { logits, labels } => {
                let lv = &self.nodes[logits.0].value;
                let s = lv.shape();
                let (c, plane) = (s.c(), s.plane());
                let scale = g.value() / T::of((s.n() * plane) as f64);
                let mut probs = softmax_channels(lv);
                let pd = probs.data_mut();
                for n in 0..s.n() {
                    for p in 0..plane {
                        let lab = labels.values[n * plane + p] as usize;
                        let k = (n * c + lab) * plane + p;
                        pd[k] = pd[k] - T::one();
                    }
                }
                pd.iter_mut().for_each(|v| *v = *v * scale);
                self.accumulate(grads, *logits, |d| add_into(d, pd));
            }
            Op::Nll { probs, labels, eps } => {
                let pv = &self.nodes[probs.0].value;
                let s = pv.shape();
                let (c, plane) = (s.c(), s.plane());
                let scale = g.value() / T::of((s.n() * plane) as f64);
                self.accumulate(grads, *probs, |d| {
                    for n in 0..s.n() {
                        for p in 0..plane {
                            let lab = labels.values[n * plane + p] as usize;
                            let k = (n * c + lab) * plane + p;
                            let pk = pv.data()[k];
                            if pk > *eps {
                                d[k] = d[k] - scale / pk;
                            }
                        }
                    }
                });
            }
            Op::MeanLogSigmoid { x, sign: sg, eps } => {
                let xv = self.nodes[x.0].value.data();
                let lo = eps.ln();
                let hi = (T::one() - *eps).ln();
                let scale = g.value() / T::of(xv.len() as f64);
                let sg = *sg;
                self.accumulate(grads, *x, |d| {
                    for (d, &v) in d.iter_mut().zip(xv) {
                        let ls = log_sigmoid(sg * v);
                        if ls > lo && ls < hi {
                            // d/dv log sigmoid(s v) = s (1 - sigmoid(s v))
                            *d = *d + scale * sg * (T::one() - sigmoid(sg * v));
                        }
                    }
                });
            }
            Op::MeanSqTarget { x, target } => {
                let xv = self.nodes[x.0].value.data();
                let scale = g.value() * T::of(2.0) / T::of(xv.len() as f64);
                self.accumulate(grads, *x, |d| {
                    for (d, &v) in d.iter_mut().zip(xv) {
                        *d = *d + scale * (v - *target);
                    }
                });
            }
            Op::Weighted(terms) => {
                let s = g.value();
                for &(id, w) in terms {
                    self.accumulate(grads, id, |d| d[0] = d[0] + s * w);
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor4<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of `shape` if the loss does not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, shape: Shape) -> Tensor4<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor4::zeros(shape))
    }

    /// Gradients of a bound parameter set, in binding order.
    pub fn collect(&self, graph: &Graph<T>, bound: &Bound) -> Vec<Tensor4<T>> {
        bound
            .nodes
            .iter()
            .map(|&id| self.get_or_zeros(id, graph.shape(id)))
            .collect()
    }
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `log(sigmoid(v))`.
#[inline]
pub(crate) fn log_sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        -(-v).exp().ln_1p()
    } else {
        v - v.exp().ln_1p()
    }
}

pub(crate) fn softmax_channels<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let (c, plane) = (s.c(), s.plane());
    let mut out = Tensor4::zeros(s);
    let od = out.data_mut();
    let xd = x.data();
    for n in 0..s.n() {
        let base = n * c * plane;
        for p in 0..plane {
            let mut mx = T::neg_infinity();
            for ch in 0..c {
                mx = mx.max(xd[base + ch * plane + p]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (xd[base + ch * plane + p] - mx).exp();
                od[base + ch * plane + p] = e;
                z = z + e;
            }
            for ch in 0..c {
                let k = base + ch * plane + p;
                od[k] = od[k] / z;
            }
        }
    }
    out
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn add_channel_bias<T: Scalar>(out: &mut Tensor4<T>, bias: &[T]) {
    let s = out.shape();
    let plane = s.plane();
    let d = out.data_mut();
    for n in 0..s.n() {
        for (ch, &b) in bias.iter().enumerate() {
            let base = (n * s.c() + ch) * plane;
            d[base..base + plane].iter_mut().for_each(|v| *v = *v + b);
        }
    }
}

fn channel_sums<T: Scalar>(g: &Tensor4<T>) -> Vec<T> {
    let s = g.shape();
    let plane = s.plane();
    let mut out = vec![T::zero(); s.c()];
    for n in 0..s.n() {
        for (ch, o) in out.iter_mut().enumerate() {
            let base = (n * s.c() + ch) * plane;
            *o = *o + g.data()[base..base + plane].iter().copied().sum();
        }
    }
    out
}
