//! Finite-difference gradient checks over every layer kind, loss term and
//! network head.
//!
//! Each case is built generically so the same function can be evaluated at
//! either precision. Analytic gradients are taken at the requested precision
//! and compared with central differences computed at 64-bit on the same
//! (rounded) inputs, so a 32-bit check measures the 32-bit kernels rather
//! than finite-difference cancellation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::networks::{DiscriminatorConfig, Network, PatchDiscriminator, RNet, RNetConfig};
use crate::objectives::{cycle_term, disc_objective_term, gen_objective_term, seg_term, GanForm, LOG_EPS};
use crate::tensor::{max_relative_error, rng_from_seed, Graph, Labels, Mode, NodeId, Scalar, Shape, Tensor4, BN_EPS};

/// Initial finite-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Smallest step tried when a stencil straddles a kink.
pub const FD_STEP_MIN: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCase {
    ConvInput,
    ConvStridedInput,
    ConvWeight,
    ConvBias,
    DeconvInput,
    DeconvWeight,
    DeconvBias,
    BatchNormTrainInput,
    BatchNormTrainScale,
    BatchNormTrainShift,
    BatchNormEvalInput,
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
    Softmax,
    Concat,
    ConvLeakyNet,
    CycleL1,
    DiscReal,
    DiscFake,
    DiscLeastSquares,
    GenNonSaturating,
    GenSaturating,
    GenLeastSquares,
    SegCrossEntropy,
    SoftmaxNll,
    RNetTranslationHead,
    RNetSegmentationHead,
    Discriminator,
}

impl GradCase {
    pub const ALL: [GradCase; 30] = [
        GradCase::ConvInput,
        GradCase::ConvStridedInput,
        GradCase::ConvWeight,
        GradCase::ConvBias,
        GradCase::DeconvInput,
        GradCase::DeconvWeight,
        GradCase::DeconvBias,
        GradCase::BatchNormTrainInput,
        GradCase::BatchNormTrainScale,
        GradCase::BatchNormTrainShift,
        GradCase::BatchNormEvalInput,
        GradCase::Relu,
        GradCase::LeakyRelu,
        GradCase::Sigmoid,
        GradCase::Tanh,
        GradCase::Softmax,
        GradCase::Concat,
        GradCase::ConvLeakyNet,
        GradCase::CycleL1,
        GradCase::DiscReal,
        GradCase::DiscFake,
        GradCase::DiscLeastSquares,
        GradCase::GenNonSaturating,
        GradCase::GenSaturating,
        GradCase::GenLeastSquares,
        GradCase::SegCrossEntropy,
        GradCase::SoftmaxNll,
        GradCase::RNetTranslationHead,
        GradCase::RNetSegmentationHead,
        GradCase::Discriminator,
    ];

    pub fn name(self) -> String {
        format!("{self:?}")
    }

}

/// Inputs of one case: the differentiated tensor and fixed companions.
struct Setup {
    x: Tensor4<f64>,
    aux: Vec<Tensor4<f64>>,
    labels: Labels,
}

fn uniform(rng: &mut impl Rng, shape: Shape, lo: f64, hi: f64) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform values with magnitude at least 0.05, away from activation kinks.
fn away_from_zero(rng: &mut impl Rng, shape: Shape) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

const RNET: RNetConfig = RNetConfig {
    input_size: 8,
    depth: 2,
    base_channels: 2,
    classes: 3,
    in_channels: 1,
    leaky_alpha: 0.2,
    translation_head: true,
};

const DISC: DiscriminatorConfig = DiscriminatorConfig {
    input_size: 8,
    in_channels: 1,
    base_channels: 2,
    depth: 2,
    leaky_alpha: 0.2,
};

fn setup(case: GradCase, seed: u64) -> Result<Setup> {
    use GradCase::*;
    let mut rng = rng_from_seed(seed);
    let r = &mut rng;
    let s = Shape::new;
    let (x, aux) = match case {
        ConvInput => (uniform(r, s(2, 3, 8, 8), -1.0, 1.0), vec![uniform(r, s(4, 3, 3, 3), -0.5, 0.5), uniform(r, s(1, 4, 1, 1), -0.5, 0.5)]),
        ConvStridedInput => (uniform(r, s(2, 2, 8, 8), -1.0, 1.0), vec![uniform(r, s(3, 2, 4, 4), -0.5, 0.5), uniform(r, s(1, 3, 1, 1), -0.5, 0.5)]),
        ConvWeight => (uniform(r, s(4, 3, 3, 3), -0.5, 0.5), vec![uniform(r, s(2, 3, 8, 8), -1.0, 1.0), uniform(r, s(1, 4, 1, 1), -0.5, 0.5)]),
        ConvBias => (uniform(r, s(1, 4, 1, 1), -0.5, 0.5), vec![uniform(r, s(2, 3, 8, 8), -1.0, 1.0), uniform(r, s(4, 3, 3, 3), -0.5, 0.5)]),
        DeconvInput => (uniform(r, s(2, 3, 4, 4), -1.0, 1.0), vec![uniform(r, s(3, 2, 4, 4), -0.5, 0.5), uniform(r, s(1, 2, 1, 1), -0.5, 0.5)]),
        DeconvWeight => (uniform(r, s(3, 2, 4, 4), -0.5, 0.5), vec![uniform(r, s(2, 3, 4, 4), -1.0, 1.0), uniform(r, s(1, 2, 1, 1), -0.5, 0.5)]),
        DeconvBias => (uniform(r, s(1, 2, 1, 1), -0.5, 0.5), vec![uniform(r, s(2, 3, 4, 4), -1.0, 1.0), uniform(r, s(3, 2, 4, 4), -0.5, 0.5)]),
        BatchNormTrainInput | BatchNormEvalInput => (
            uniform(r, s(4, 3, 4, 4), -1.0, 1.0),
            vec![uniform(r, s(1, 3, 1, 1), 0.5, 1.5), uniform(r, s(1, 3, 1, 1), -0.5, 0.5), uniform(r, s(1, 3, 1, 1), -0.2, 0.2), uniform(r, s(1, 3, 1, 1), 0.5, 1.5)],
        ),
        BatchNormTrainScale => (uniform(r, s(1, 3, 1, 1), 0.5, 1.5), vec![uniform(r, s(4, 3, 4, 4), -1.0, 1.0), uniform(r, s(1, 3, 1, 1), -0.5, 0.5)]),
        BatchNormTrainShift => (uniform(r, s(1, 3, 1, 1), -0.5, 0.5), vec![uniform(r, s(4, 3, 4, 4), -1.0, 1.0), uniform(r, s(1, 3, 1, 1), 0.5, 1.5)]),
        Relu | LeakyRelu => (away_from_zero(r, s(2, 4, 8, 8)), vec![]),
        Sigmoid | Tanh | Softmax => (uniform(r, s(2, 4, 8, 8), -2.0, 2.0), vec![]),
        Concat => (uniform(r, s(2, 2, 8, 8), -1.0, 1.0), vec![uniform(r, s(2, 3, 8, 8), -1.0, 1.0)]),
        ConvLeakyNet => (
            uniform(r, s(2, 2, 8, 8), -1.0, 1.0),
            vec![uniform(r, s(4, 2, 3, 3), -0.5, 0.5), uniform(r, s(1, 4, 1, 1), -0.2, 0.2), uniform(r, s(2, 4, 3, 3), -0.5, 0.5), uniform(r, s(1, 2, 1, 1), -0.2, 0.2)],
        ),
        // The reconstruction differs from its target everywhere by at least 0.05.
        CycleL1 => {
            let x = uniform(r, s(2, 1, 8, 8), -0.5, 0.5);
            let back = away_from_zero(r, s(2, 1, 8, 8));
            let back = Tensor4::from_vec(back.shape(), back.data().iter().zip(x.data()).map(|(d, v)| v + d).collect())?;
            let y = uniform(r, s(2, 1, 8, 8), -0.5, 0.5);
            let y_back = uniform(r, s(2, 1, 8, 8), -0.5, 0.5);
            (back, vec![x, y, y_back])
        }
        DiscReal | DiscFake | DiscLeastSquares | GenNonSaturating | GenSaturating | GenLeastSquares => {
            (uniform(r, s(3, 1, 4, 4), -3.0, 3.0), vec![uniform(r, s(3, 1, 4, 4), -3.0, 3.0)])
        }
        SegCrossEntropy => (uniform(r, s(2, 5, 8, 8), -2.0, 2.0), vec![uniform(r, s(2, 5, 8, 8), -2.0, 2.0)]),
        SoftmaxNll => (uniform(r, s(2, 5, 8, 8), -2.0, 2.0), vec![]),
        RNetTranslationHead | RNetSegmentationHead | Discriminator => (uniform(r, s(2, 1, 8, 8), -1.0, 1.0), vec![]),
    };
    let classes = match case {
        RNetSegmentationHead => RNET.classes,
        _ => 5,
    };
    let n = match case {
        SegCrossEntropy | SoftmaxNll | RNetSegmentationHead => 2,
        _ => 1,
    };
    let values = (0..n * 64).map(|_| rng.random_range(0..classes) as u8).collect();
    let labels = Labels::new(n, 8, 8, values, false)?;
    Ok(Setup { x, aux, labels })
}

/// `mean((y - r)^2)` for a fixed random `r`, so every output element carries
/// a distinct weight.
fn project<U: Scalar>(g: &mut Graph<U>, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let r = uniform(&mut rng, g.shape(y), -1.0, 1.0).cast::<U>();
    let r = g.input(r);
    let d = g.sub(y, r)?;
    Ok(g.mean_sq_target(d, U::zero()))
}

fn build<U: Scalar>(case: GradCase, g: &mut Graph<U>, v: NodeId, st: &Setup, seed: u64) -> Result<NodeId> {
    use GradCase::*;
    let mut aux: Vec<NodeId> = st.aux.iter().map(|t| g.input(t.cast::<U>())).collect();
    let eps = U::of(BN_EPS);
    let alpha = U::of(0.2);
    let out = match case {
        ConvInput => g.conv2d(v, aux[0], Some(aux[1]), 1, 1)?,
        ConvStridedInput => g.conv2d(v, aux[0], Some(aux[1]), 2, 1)?,
        ConvWeight => g.conv2d(aux[0], v, Some(aux[1]), 1, 1)?,
        ConvBias => g.conv2d(aux[0], aux[1], Some(v), 1, 1)?,
        DeconvInput => g.deconv2d(v, aux[0], Some(aux[1]), 2, 1)?,
        DeconvWeight => g.deconv2d(aux[0], v, Some(aux[1]), 2, 1)?,
        DeconvBias => g.deconv2d(aux[0], aux[1], Some(v), 2, 1)?,
        BatchNormTrainInput => g.batch_norm_train(v, aux[0], aux[1], eps)?.0,
        BatchNormTrainScale => g.batch_norm_train(aux[0], v, aux[1], eps)?.0,
        BatchNormTrainShift => g.batch_norm_train(aux[0], aux[1], v, eps)?.0,
        BatchNormEvalInput => {
            let mean: Vec<U> = st.aux[2].data().iter().map(|&m| U::of(m)).collect();
            let var: Vec<U> = st.aux[3].data().iter().map(|&m| U::of(m)).collect();
            g.batch_norm_eval(v, aux[0], aux[1], &mean, &var, eps)?
        }
        Relu => g.relu(v),
        LeakyRelu => g.leaky_relu(v, alpha)?,
        Sigmoid => g.sigmoid(v),
        Tanh => g.tanh(v),
        Softmax => g.softmax(v),
        Concat => g.concat(v, aux[0])?,
        ConvLeakyNet => {
            let h = g.conv2d(v, aux[0], Some(aux[1]), 1, 1)?;
            let h = g.leaky_relu(h, alpha)?;
            let h = g.conv2d(h, aux[2], Some(aux[3]), 1, 1)?;
            g.leaky_relu(h, alpha)?
        }
        CycleL1 => return cycle_term(g, aux[0], v, aux[1], aux[2]),
        DiscReal => return disc_objective_term(g, v, aux[0], GanForm::NonSaturating),
        DiscFake => return disc_objective_term(g, aux[0], v, GanForm::NonSaturating),
        DiscLeastSquares => return disc_objective_term(g, v, aux[0], GanForm::LeastSquares),
        GenNonSaturating => return gen_objective_term(g, v, GanForm::NonSaturating),
        GenSaturating => return gen_objective_term(g, v, GanForm::Saturating),
        GenLeastSquares => return gen_objective_term(g, v, GanForm::LeastSquares),
        SegCrossEntropy => return seg_term(g, v, aux.remove(0), &st.labels),
        SoftmaxNll => {
            let p = g.softmax(v);
            return g.nll(p, &st.labels, U::of(LOG_EPS));
        }
        RNetTranslationHead | RNetSegmentationHead => {
            let net = RNet::<U>::new(RNET, seed)?;
            let bound = net.bind(g, false);
            let out = net.forward(g, &bound, v, Mode::Train)?;
            if case == RNetSegmentationHead {
                return g.softmax_cross_entropy(out.logits, &st.labels);
            }
            out.translated.expect("translation head is enabled")
        }
        Discriminator => {
            let d = PatchDiscriminator::<U>::new(DISC, seed)?;
            let bound = d.bind(g, false);
            let (logits, _) = d.forward(g, &bound, v, Mode::Train)?;
            return gen_objective_term(g, logits, GanForm::NonSaturating);
        }
    };
    project(g, out, seed)
}

fn eval64(f: &impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>, x: &Tensor4<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    let y = g.value(out).value();
    if !y.is_finite() {
        return Err(Error::NonFinite("function value during gradient check".into()));
    }
    Ok(y)
}

/// Fourth-order central difference
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, per element.
///
/// Each element is estimated at `h` and `h/2` and the two are combined by
/// Richardson extrapolation. Disagreement means a stencil
/// crossed a kink of a piecewise-linear unit, and the step is divided by
/// ten. Elements still inconsistent at [`FD_STEP_MIN`] lie within a few
/// steps of a kink, where no finite difference is meaningful; they are
/// returned as `None`.
pub fn five_point_gradient(
    f: impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
    x: &Tensor4<f64>,
    h: f64,
) -> Result<Vec<Option<f64>>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut at = |d: f64| {
            probe.data_mut()[i] = orig + d;
            eval64(&f, &probe)
        };
        let mut stencil = |h: f64| -> Result<f64> {
            let near = at(h)? - at(-h)?;
            let far = at(2.0 * h)? - at(-2.0 * h)?;
            Ok((8.0 * near - far) / (12.0 * h))
        };
        let mut h = h;
        let v = loop {
            let (coarse, fine) = (stencil(h)?, stencil(h / 2.0)?);
            if (coarse - fine).abs() <= 1e-7 * coarse.abs().max(fine.abs()) + 1e-11 {
                break Some(fine + (fine - coarse) / 15.0);
            }
            if h / 10.0 < FD_STEP_MIN {
                break None;
            }
            h /= 10.0;
        };
        probe.data_mut()[i] = orig;
        out.push(v);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub case: GradCase,
    /// Max over compared elements of `|a - n| / max(|a|, |n|, 1e-12)`.
    pub error: f64,
    /// `max |a - n|` relative to the largest gradient entry.
    pub scaled_error: f64,
    /// Elements skipped as kink-adjacent.
    pub skipped: usize,
    pub elements: usize,
}

impl CaseResult {
    /// At most 5% of elements may be skipped.
    pub fn passes(&self, tolerance: f64) -> bool {
        self.error < tolerance && self.skipped * 20 <= self.elements
    }
}

/// Compares the analytic gradient of `case` at precision `T` with the
/// 64-bit numeric one.
pub fn check_case<T: Scalar>(case: GradCase, seed: u64) -> Result<CaseResult> {
    let st = setup(case, seed)?;
    let x = st.x.cast::<T>();
    let mut g = Graph::<T>::new();
    let v = g.variable(x.clone());
    let out = build(case, &mut g, v, &st, seed)?;
    let analytic = g.backward(out)?.get_or_zeros(v, x.shape()).cast::<f64>();
    let numeric = five_point_gradient(|g, v| build(case, g, v, &st, seed), &x.cast::<f64>(), FD_STEP)?;
    let (a, n): (Vec<f64>, Vec<f64>) = analytic
        .data()
        .iter()
        .zip(&numeric)
        .filter_map(|(&a, n)| n.map(|n| (a, n)))
        .unzip();
    let compared = Shape::new(1, 1, 1, a.len());
    let scale = a.iter().chain(&n).fold(1e-300f64, |m, v| m.max(v.abs()));
    let scaled_error = a.iter().zip(&n).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max) / scale;
    Ok(CaseResult {
        case,
        scaled_error,
        error: max_relative_error(&Tensor4::from_vec(compared, a)?, &Tensor4::from_vec(compared, n)?),
        skipped: numeric.iter().filter(|n| n.is_none()).count(),
        elements: numeric.len(),
    })
}

/// Every case at precision `T`.
pub fn gradient_suite<T: Scalar>(seed: u64) -> Result<Vec<CaseResult>> {
    GradCase::ALL.iter().map(|&case| check_case::<T>(case, seed)).collect()
}

/// Acceptance threshold for precision `T`.
pub fn tolerance<T: Scalar>() -> f64 {
    if T::NAME == "f64" {
        1e-6
    } else {
        1e-3
    }
}
