//! Loss terms of the joint translation/segmentation objective.
//!
//! Graph builders (`*_term`) record differentiable scalars into a [`Graph`];
//! the value-level functions evaluate the same quantities on networks or raw
//! probability grids without building a tape for parameters.

use crate::error::{invalid, Error, Result};
use crate::networks::{Network, PatchDiscriminator, RNet};
use crate::tensor::{Graph, Labels, Mode, NodeId, Scalar, Tensor4};

/// Clamp applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cyc: f64,
    pub gan: f64,
    pub seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cyc: 10.0,
            gan: 1.0,
            seg: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cyc", self.cyc), ("gan", self.gan), ("seg", self.seg)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Generator-side adversarial surrogate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GanForm {
    /// `-mean log D(fake)`.
    #[default]
    NonSaturating,
    /// `mean log(1 - D(fake))`, the literal minimax form.
    Saturating,
    /// Least squares on the logit grid: generator `mean (z - 1)^2`,
    /// discriminator `-(mean (z_real - 1)^2 + mean z_fake^2)`.
    LeastSquares,
}

impl std::str::FromStr for GanForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non-saturating" => Ok(GanForm::NonSaturating),
            "saturating" => Ok(GanForm::Saturating),
            "least-squares" => Ok(GanForm::LeastSquares),
            other => Err(invalid(format!("unknown gan form {other:?}"))),
        }
    }
}

/// Per-batch loss components and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub cycle: f64,
    pub gan_forward: f64,
    pub gan_backward: f64,
    pub seg: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.cycle, self.gan_forward, self.gan_backward, self.seg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "cycle={:.6} seg={:.6} gan_f={:.6} gan_b={:.6} total={:.6}",
            self.cycle, self.seg, self.gan_forward, self.gan_backward, self.total
        )
    }
}

/// Combines components into a report with
/// `total = cyc * cycle + seg * seg + gan * (gan_forward + gan_backward)`.
pub fn total_objective(
    cycle: f64,
    seg: f64,
    gan_forward: f64,
    gan_backward: f64,
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    let r = LossReport {
        cycle,
        gan_forward,
        gan_backward,
        seg,
        total: w.cyc * cycle + w.seg * seg + w.gan * (gan_forward + gan_backward),
    };
    if !r.is_finite() {
        return Err(Error::NonFinite(format!("loss components: {r}")));
    }
    Ok(r)
}

pub fn cycle_term<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    x_back: NodeId,
    y: NodeId,
    y_back: NodeId,
) -> Result<NodeId> {
    let a = g.l1_mean(x_back, x)?;
    let b = g.l1_mean(y_back, y)?;
    g.weighted_sum(&[(a, T::one()), (b, T::one())])
}

/// The discriminator's objective (to be maximized) on logit grids.
pub fn disc_objective_term<T: Scalar>(
    g: &mut Graph<T>,
    real_logits: NodeId,
    fake_logits: NodeId,
    form: GanForm,
) -> Result<NodeId> {
    let eps = T::of(LOG_EPS);
    match form {
        GanForm::LeastSquares => {
            let r = g.mean_sq_target(real_logits, T::one());
            let f = g.mean_sq_target(fake_logits, T::zero());
            g.weighted_sum(&[(r, -T::one()), (f, -T::one())])
        }
        _ => {
            let r = g.mean_log_sigmoid(real_logits, T::one(), eps);
            let f = g.mean_log_sigmoid(fake_logits, -T::one(), eps);
            g.weighted_sum(&[(r, T::one()), (f, T::one())])
        }
    }
}

/// The generator's adversarial term (to be minimized) on a fake logit grid.
pub fn gen_objective_term<T: Scalar>(g: &mut Graph<T>, fake_logits: NodeId, form: GanForm) -> Result<NodeId> {
    let eps = T::of(LOG_EPS);
    Ok(match form {
        GanForm::NonSaturating => {
            let l = g.mean_log_sigmoid(fake_logits, T::one(), eps);
            g.weighted_sum(&[(l, -T::one())])?
        }
        GanForm::Saturating => g.mean_log_sigmoid(fake_logits, -T::one(), eps),
        GanForm::LeastSquares => g.mean_sq_target(fake_logits, T::one()),
    })
}

/// Cross entropy of F's head on `x` plus B's head on `F(x)`, both against the
/// reference masks.
pub fn seg_term<T: Scalar>(
    g: &mut Graph<T>,
    logits_x: NodeId,
    logits_fx: NodeId,
    masks: &Labels,
) -> Result<NodeId> {
    let a = g.softmax_cross_entropy(logits_x, masks)?;
    let b = g.softmax_cross_entropy(logits_fx, masks)?;
    g.weighted_sum(&[(a, T::one()), (b, T::one())])
}

fn eval_rnet<T: Scalar>(net: &RNet<T>, x: &Tensor4<T>) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let (t, p) = net.infer(x)?;
    let t = t.ok_or_else(|| invalid("network has no translation head"))?;
    Ok((t, p))
}

/// `mean |B(F(x)) - x| + mean |F(B(y)) - y|` with both networks in eval mode.
pub fn cycle_loss<T: Scalar>(x: &Tensor4<T>, y: &Tensor4<T>, f: &RNet<T>, b: &RNet<T>) -> Result<f64> {
    let (fx, _) = eval_rnet(f, x)?;
    let (bfx, _) = eval_rnet(b, &fx)?;
    let (by, _) = eval_rnet(b, y)?;
    let (fby, _) = eval_rnet(f, &by)?;
    Ok(l1(&bfx, x)? + l1(&fby, y)?)
}

/// Elementwise mean absolute difference.
pub fn l1<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            layer: "l1".into(),
            expected: a.shape().to_string(),
            actual: b.shape().to_string(),
        });
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p.as_f64() - q.as_f64()).abs())
        .sum();
    Ok(s / a.len() as f64)
}

fn clamped_ln(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS).ln()
}

/// `(mean log D(real) + mean log(1 - D(fake)), -mean log D(fake))` on
/// probability grids.
pub fn adversarial_from_probs<T: Scalar>(real: &Tensor4<T>, fake: &Tensor4<T>) -> Result<(f64, f64)> {
    let mean = |t: &Tensor4<T>, f: &dyn Fn(f64) -> f64| -> Result<f64> {
        if t.is_empty() {
            return Err(invalid("empty probability grid"));
        }
        let s: f64 = t.data().iter().map(|v| f(v.as_f64())).sum();
        if !s.is_finite() {
            return Err(Error::NonFinite("discriminator probabilities".into()));
        }
        Ok(s / t.len() as f64)
    };
    let real_term = mean(real, &clamped_ln)?;
    let fake_term = mean(fake, &|p| clamped_ln(1.0 - p))?;
    let gen = -mean(fake, &clamped_ln)?;
    Ok((real_term + fake_term, gen))
}

/// Objectives of `d_y` on real `y` against translated `fx`.
pub fn adversarial_loss_forward<T: Scalar>(
    d_y: &PatchDiscriminator<T>,
    y: &Tensor4<T>,
    fx: &Tensor4<T>,
) -> Result<(f64, f64)> {
    adversarial_from_probs(&d_y.probabilities(y)?, &d_y.probabilities(fx)?)
}

/// Objectives of `d_x` on real `x` against back-translated `by`.
pub fn adversarial_loss_backward<T: Scalar>(
    d_x: &PatchDiscriminator<T>,
    x: &Tensor4<T>,
    by: &Tensor4<T>,
) -> Result<(f64, f64)> {
    adversarial_loss_forward(d_x, x, by)
}

/// Mean per-pixel `-log p[label]` summed over the two probability fields.
pub fn segmentation_from_probs<T: Scalar>(
    probs_x: &Tensor4<T>,
    probs_fx: &Tensor4<T>,
    masks: &Labels,
) -> Result<f64> {
    let mut total = 0.0;
    for p in [probs_x, probs_fx] {
        let mut g = Graph::new();
        let id = g.input(p.clone());
        let l = g.nll(id, masks, T::of(LOG_EPS))?;
        total += g.value(l).value().as_f64();
    }
    Ok(total)
}

/// Segmentation loss of F on `x` and of B on `F(x)`, eval mode.
pub fn segmentation_loss<T: Scalar>(f: &RNet<T>, b: &RNet<T>, x: &Tensor4<T>, masks: &Labels) -> Result<f64> {
    if masks.from_target {
        return Err(Error::MaskLeakage(
            "segmentation loss called with target-domain masks".into(),
        ));
    }
    let (fx, px) = eval_rnet(f, x)?;
    let (_, pfx) = b.infer(&fx)?;
    segmentation_from_probs(&px, &pfx, masks)
}

/// Full generator-side report for fixed networks in eval mode.
pub fn evaluate_objective<T: Scalar>(
    nets: (&RNet<T>, &RNet<T>, &PatchDiscriminator<T>, &PatchDiscriminator<T>),
    x: &Tensor4<T>,
    masks: &Labels,
    y: &Tensor4<T>,
    w: &LossWeights,
    form: GanForm,
) -> Result<LossReport> {
    let (f, b, d_x, d_y) = nets;
    let mut g = Graph::new();
    let bf = f.bind(&mut g, false);
    let bb = b.bind(&mut g, false);
    let bdx = d_x.bind(&mut g, false);
    let bdy = d_y.bind(&mut g, false);
    let xi = g.input(x.clone());
    let yi = g.input(y.clone());
    let fo = f.forward(&mut g, &bf, xi, Mode::Eval)?;
    let fx = fo.translated.ok_or_else(|| invalid("F has no translation head"))?;
    let bo = b.forward(&mut g, &bb, yi, Mode::Eval)?;
    let by = bo.translated.ok_or_else(|| invalid("B has no translation head"))?;
    let bfx = b.forward(&mut g, &bb, fx, Mode::Eval)?;
    let fby = f.forward(&mut g, &bf, by, Mode::Eval)?;
    let cyc = cycle_term(&mut g, xi, bfx.translated.expect("head"), yi, fby.translated.expect("head"))?;
    let seg = seg_term(&mut g, fo.logits, bfx.logits, masks)?;
    let (dy_fake, _) = d_y.forward(&mut g, &bdy, fx, Mode::Eval)?;
    let (dx_fake, _) = d_x.forward(&mut g, &bdx, by, Mode::Eval)?;
    let gf = gen_objective_term(&mut g, dy_fake, form)?;
    let gb = gen_objective_term(&mut g, dx_fake, form)?;
    let v = |id: NodeId| g.value(id).value().as_f64();
    total_objective(v(cyc), v(seg), v(gf), v(gb), w)
}
