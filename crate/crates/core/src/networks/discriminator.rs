use super::{Builder, Network, ParamSet, Walker};
use crate::error::{invalid, Error, Result};
use crate::tensor::{BatchStats, Bound, Graph, Mode, NodeId, Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of stride-2 blocks; the logit grid is `input_size / 2^depth`.
    pub depth: usize,
    pub leaky_alpha: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            in_channels: 1,
            base_channels: 16,
            depth: 3,
            leaky_alpha: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(invalid("discriminator needs at least 2 stride-2 blocks"));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(invalid("discriminator channel counts must be positive"));
        }
        if !(self.leaky_alpha > 0.0 && self.leaky_alpha < 1.0) {
            return Err(invalid("leaky-relu slope must lie in (0, 1)"));
        }
        let stride = 1usize << self.depth;
        if self.input_size % stride != 0 || self.input_size < stride {
            return Err(invalid(format!(
                "discriminator input {} is not divisible by {stride}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.input_size >> self.depth
    }
}

/// Markovian patch classifier: `block1` is a 4x4 stride-2 conv with leaky
/// ReLU, later blocks add batch norm before the activation, and `head` is a
/// 3x3 conv to one logit channel. Probabilities are `sigmoid(logits)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDiscriminator<T> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> Network<T> for PatchDiscriminator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

impl<T: Scalar> PatchDiscriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(seed);
        let mut cin = config.in_channels;
        for l in 1..=config.depth {
            let cout = config.base_channels << (l - 1).min(3);
            b.conv(&format!("block{l}.conv"), cin, cout, 4)?;
            if l > 1 {
                b.batch_norm(&format!("block{l}.bn"), cout);
            }
            cin = cout;
        }
        b.conv("head.conv", cin, 1, 3)?;
        Ok(Self {
            config,
            params: b.params,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Records the logit grid for `x` into `g`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: NodeId,
        mode: Mode,
    ) -> Result<(NodeId, Vec<(usize, BatchStats<T>)>)> {
        let c = &self.config;
        let s = g.shape(x);
        if s.h() != c.input_size || s.w() != c.input_size || s.c() != c.in_channels {
            return Err(Error::ShapeMismatch {
                layer: "discriminator input".into(),
                expected: format!("Nx{}x{}x{}", c.in_channels, c.input_size, c.input_size),
                actual: s.to_string(),
            });
        }
        let alpha = T::of(c.leaky_alpha);
        let mut w = Walker::new(&self.params, bound)?;
        let mut h = x;
        for l in 1..=c.depth {
            h = w.conv(g, h, 2, 1)?;
            if l > 1 {
                h = w.batch_norm(g, h, mode)?;
            }
            h = g.leaky_relu(h, alpha)?;
        }
        let logits = w.conv(g, h, 1, 1)?;
        Ok((logits, w.finish()))
    }

    /// Eval-mode patch probabilities.
    pub fn probabilities(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xi = g.input(x.clone());
        let (logits, _) = self.forward(&mut g, &bound, xi, Mode::Eval)?;
        let p = g.sigmoid(logits);
        Ok(g.value(p).clone())
    }
}
