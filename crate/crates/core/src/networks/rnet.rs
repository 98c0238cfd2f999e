use super::{Builder, Network, ParamSet, Walker};
use crate::error::{invalid, Result};
use crate::tensor::{BatchStats, Bound, Graph, Mode, NodeId, Scalar, Tensor4};

/// Architecture of the dual-output generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RNetConfig {
    /// Square input extent in pixels.
    pub input_size: usize,
    /// Number of stride-2 down-sampling stages (mirrored by up-sampling stages).
    pub depth: usize,
    pub base_channels: usize,
    pub classes: usize,
    pub in_channels: usize,
    /// Slope of the encoder leaky ReLU.
    pub leaky_alpha: f64,
    /// Without the translation head the network is a plain segmentation U-Net.
    pub translation_head: bool,
}

impl Default for RNetConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            depth: 4,
            base_channels: 16,
            classes: 5,
            in_channels: 1,
            leaky_alpha: 0.2,
            translation_head: true,
        }
    }
}

impl RNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(invalid("R-Net depth must be at least 1"));
        }
        if self.classes < 2 {
            return Err(invalid("R-Net needs at least 2 classes"));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(invalid("R-Net channel counts must be positive"));
        }
        if !(self.leaky_alpha > 0.0 && self.leaky_alpha < 1.0) {
            return Err(invalid("leaky-relu slope must lie in (0, 1)"));
        }
        let stride = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(invalid(format!(
                "input size {} is not divisible by 2^{} = {stride}",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    /// Feature channels at resolution level `level` (0 = full resolution).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(3)
    }
}

/// Nodes produced by one generator pass.
pub struct RNetOutput<T> {
    /// `tanh` image, absent when the translation head is removed.
    pub translated: Option<NodeId>,
    /// Pre-softmax class scores.
    pub logits: NodeId,
    /// Softmax over classes.
    pub probs: NodeId,
    /// Batch statistics from training-mode normalization, in layer order.
    pub stats: Vec<(usize, BatchStats<T>)>,
}

/// U-Net style encoder-decoder whose decoder feeds two heads: a single-channel
/// image translation head and a per-pixel class-probability head.
///
/// Layout for depth `D` and channels `c_l`:
/// - `enc0`: 3x3 conv to `c_0`, leaky ReLU
/// - `enc{l}` for `l = 1..=D`: 4x4 stride-2 conv, batch norm, leaky ReLU
/// - `dec{l}` for `l = D..=1`: 4x4 stride-2 transposed conv to `c_{l-1}`,
///   batch norm, ReLU, concatenated with the `enc{l-1}` output
/// - `trans`: 3x3 conv to 1 channel, tanh
/// - `seg`: 3x3 conv to the class count, softmax
#[derive(Clone, Debug, PartialEq)]
pub struct RNet<T> {
    config: RNetConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> Network<T> for RNet<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

impl<T: Scalar> RNet<T> {
    pub fn new(config: RNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(seed);
        b.conv("enc0.conv", config.in_channels, config.channels(0), 3)?;
        for l in 1..=config.depth {
            let name = format!("enc{l}");
            b.conv(&format!("{name}.conv"), config.channels(l - 1), config.channels(l), 4)?;
            b.batch_norm(&format!("{name}.bn"), config.channels(l));
        }
        for l in (1..=config.depth).rev() {
            let cin = if l == config.depth {
                config.channels(l)
            } else {
                2 * config.channels(l)
            };
            let name = format!("dec{l}");
            b.deconv(&format!("{name}.deconv"), cin, config.channels(l - 1), 4, 2)?;
            b.batch_norm(&format!("{name}.bn"), config.channels(l - 1));
        }
        let trunk = 2 * config.channels(0);
        if config.translation_head {
            b.conv("trans.conv", trunk, config.in_channels, 3)?;
        }
        b.conv("seg.conv", trunk, config.classes, 3)?;
        Ok(Self {
            config,
            params: b.params,
        })
    }

    pub fn config(&self) -> &RNetConfig {
        &self.config
    }

    /// Records one forward pass into `g`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: NodeId,
        mode: Mode,
    ) -> Result<RNetOutput<T>> {
        let c = &self.config;
        let xs = g.shape(x);
        if xs.h() != c.input_size || xs.w() != c.input_size || xs.c() != c.in_channels {
            return Err(crate::Error::ShapeMismatch {
                layer: "rnet input".into(),
                expected: format!("Nx{}x{}x{}", c.in_channels, c.input_size, c.input_size),
                actual: xs.to_string(),
            });
        }
        let alpha = T::of(c.leaky_alpha);
        let mut w = Walker::new(&self.params, bound)?;

        let h = w.conv(g, x, 1, 1)?;
        let mut skips = vec![g.leaky_relu(h, alpha)?];
        for _ in 1..=c.depth {
            let prev = *skips.last().expect("encoder level");
            let h = w.conv(g, prev, 2, 1)?;
            let h = w.batch_norm(g, h, mode)?;
            skips.push(g.leaky_relu(h, alpha)?);
        }
        let mut h = skips.pop().expect("bottleneck");
        for l in (1..=c.depth).rev() {
            let up = w.deconv(g, h, 2, 1)?;
            let up = w.batch_norm(g, up, mode)?;
            let up = g.relu(up);
            h = g.concat(up, skips[l - 1])?;
        }
        let translated = if c.translation_head {
            let t = w.conv(g, h, 1, 1)?;
            Some(g.tanh(t))
        } else {
            None
        };
        let logits = w.conv(g, h, 1, 1)?;
        let probs = g.softmax(logits);
        Ok(RNetOutput {
            translated,
            logits,
            probs,
            stats: w.finish(),
        })
    }

    /// Eval-mode pass returning `(translated, probs)` values.
    pub fn infer(&self, x: &Tensor4<T>) -> Result<(Option<Tensor4<T>>, Tensor4<T>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xi = g.input(x.clone());
        let out = self.forward(&mut g, &bound, xi, Mode::Eval)?;
        let t = out.translated.map(|t| g.value(t).clone());
        Ok((t, g.value(out.probs).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rng_from_seed, Shape};
    use rand::Rng;

    fn cfg(depth: usize, size: usize) -> RNetConfig {
        RNetConfig {
            input_size: size,
            depth,
            base_channels: 4,
            ..RNetConfig::default()
        }
    }

    fn random_input(n: usize, size: usize, seed: u64) -> Tensor4<f64> {
        let mut rng = rng_from_seed(seed);
        Tensor4::from_fn(Shape::new(n, 1, size, size), |_| rng.random_range(-1.0..1.0))
    }

    /// Counts parameters by tracing the documented layer list.
    fn traced_count(c: &RNetConfig) -> usize {
        let ch = |l: usize| c.base_channels << l.min(3);
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let bn = |ch: usize| 2 * ch;
        let mut total = conv(c.in_channels, ch(0), 3);
        for l in 1..=c.depth {
            total += conv(ch(l - 1), ch(l), 4) + bn(ch(l));
        }
        for l in (1..=c.depth).rev() {
            let cin = if l == c.depth { ch(l) } else { 2 * ch(l) };
            total += conv(cin, ch(l - 1), 4) + bn(ch(l - 1));
        }
        if c.translation_head {
            total += conv(2 * ch(0), c.in_channels, 3);
        }
        total + conv(2 * ch(0), c.classes, 3)
    }

    #[test]
    fn parameter_count_matches_trace() {
        let c = RNetConfig {
            input_size: 64,
            depth: 4,
            base_channels: 16,
            ..RNetConfig::default()
        };
        let net = RNet::<f32>::new(c, 1).unwrap();
        assert_eq!(net.parameter_count(), traced_count(&c));
        for depth in 1..=5 {
            let c = cfg(depth, 64);
            assert_eq!(RNet::<f32>::new(c, 1).unwrap().parameter_count(), traced_count(&c));
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = RNet::<f32>::new(cfg(2, 16), 9).unwrap();
        let b = RNet::<f32>::new(cfg(2, 16), 9).unwrap();
        let c = RNet::<f32>::new(cfg(2, 16), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params().tensors, c.params().tensors);
    }

    #[test]
    fn indivisible_input_rejected() {
        assert!(RNet::<f32>::new(cfg(3, 20), 0).is_err());
        assert!(RNet::<f32>::new(cfg(0, 16), 0).is_err());
    }

    #[test]
    fn depth_one_has_both_heads_at_full_resolution() {
        let net = RNet::<f64>::new(cfg(1, 8), 3).unwrap();
        let x = random_input(2, 8, 1);
        let (t, p) = net.infer(&x).unwrap();
        assert_eq!(t.unwrap().shape(), Shape::new(2, 1, 8, 8));
        assert_eq!(p.shape(), Shape::new(2, 5, 8, 8));
    }

    #[test]
    fn probabilities_sum_to_one_and_translation_is_bounded() {
        for seed in 0..10 {
            let net = RNet::<f32>::new(cfg(2, 16), seed).unwrap();
            let x = random_input(2, 16, seed + 100).cast::<f32>();
            let mut g = Graph::new();
            let b = net.bind(&mut g, true);
            let xi = g.input(x);
            let out = net.forward(&mut g, &b, xi, Mode::Train).unwrap();
            let t = g.value(out.translated.unwrap());
            assert!(t.data().iter().all(|v| *v > -1.0 && *v < 1.0));
            let p = g.value(out.probs);
            for n in 0..2 {
                for y in 0..16 {
                    for xx in 0..16 {
                        let s: f32 = (0..5).map(|c| p.get(n, c, y, xx)).sum();
                        assert!((s - 1.0).abs() < 1e-5);
                        assert!((0..5).all(|c| p.get(n, c, y, xx) >= 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let net = RNet::<f32>::new(cfg(2, 16), 4).unwrap();
        let x = random_input(3, 16, 5).cast::<f32>();
        let (t1, p1) = net.infer(&x).unwrap();
        let (t2, p2) = net.infer(&x).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn wrong_spatial_size_rejected() {
        let net = RNet::<f32>::new(cfg(2, 16), 4).unwrap();
        let x = Tensor4::<f32>::zeros(Shape::new(1, 1, 8, 8));
        assert!(net.infer(&x).is_err());
    }

    fn outputs(net: &RNet<f64>, x: &Tensor4<f64>) -> (Tensor4<f64>, Tensor4<f64>) {
        let (t, p) = net.infer(x).unwrap();
        (t.unwrap(), p)
    }

    fn perturbed(net: &RNet<f64>, name: &str) -> RNet<f64> {
        let mut n = net.clone();
        let i = n.params().names.iter().position(|s| s == name).unwrap();
        let t = &mut n.params_mut().tensors[i];
        for v in t.data_mut() {
            *v += 0.05;
        }
        n
    }

    #[test]
    fn trunk_is_shared_and_heads_are_separate() {
        let net = RNet::<f64>::new(cfg(2, 16), 8).unwrap();
        let x = random_input(2, 16, 2);
        let (t0, p0) = outputs(&net, &x);

        let (t, p) = outputs(&perturbed(&net, "enc1.conv.weight"), &x);
        assert!(t.max_abs_diff(&t0) > 0.0 && p.max_abs_diff(&p0) > 0.0);

        let (t, p) = outputs(&perturbed(&net, "trans.conv.weight"), &x);
        assert!(t.max_abs_diff(&t0) > 0.0);
        assert_eq!(p, p0);

        let (t, p) = outputs(&perturbed(&net, "seg.conv.weight"), &x);
        assert_eq!(t, t0);
        assert!(p.max_abs_diff(&p0) > 0.0);
    }

    #[test]
    fn skip_connection_carries_information() {
        // With the translation head blind to the decoder channels, anything
        // reaching it must come through the full-resolution skip.
        let net = RNet::<f64>::new(cfg(2, 16), 8).unwrap();
        let mut z = net.clone();
        let tw = z.params().names.iter().position(|s| s == "trans.conv.weight").unwrap();
        let c0 = z.config().channels(0);
        let w = &mut z.params_mut().tensors[tw];
        let [o, _, kh, kw] = w.shape().0;
        for oc in 0..o {
            for ic in 0..c0 {
                for a in 0..kh {
                    for b in 0..kw {
                        w.set(oc, ic, a, b, 0.0);
                    }
                }
            }
        }
        let (ta, _) = outputs(&z, &random_input(1, 16, 3));
        let (tb, _) = outputs(&z, &random_input(1, 16, 4));
        assert!(ta.max_abs_diff(&tb) > 1e-3);
    }
}
