use std::sync::atomic::Ordering;

use super::audit;
use crate::error::{invalid, Error, Result};
use crate::networks::{Network, PatchDiscriminator, RNet};
use crate::objectives::{
    cycle_term, disc_objective_term, gen_objective_term, seg_term, total_objective, GanForm,
    LossReport, LossWeights,
};
use crate::tensor::{AdamState, Graph, Labels, Mode, NodeId, Scalar, Tensor4};

/// The two generators and two discriminators of joint training.
#[derive(Clone, Debug, PartialEq)]
pub struct SusanModels<T> {
    pub f: RNet<T>,
    pub b: RNet<T>,
    pub d_x: PatchDiscriminator<T>,
    pub d_y: PatchDiscriminator<T>,
}

/// One Adam state per network, same order as [`SusanModels`].
#[derive(Clone, Debug, PartialEq)]
pub struct SusanOptimizers<T> {
    pub f: AdamState<T>,
    pub b: AdamState<T>,
    pub d_x: AdamState<T>,
    pub d_y: AdamState<T>,
}

/// Values the discriminator step needs from the preceding generator step.
pub struct Fakes<T> {
    pub fx: Tensor4<T>,
    pub by: Tensor4<T>,
}

fn scalar<T: Scalar>(g: &Graph<T>, id: NodeId) -> f64 {
    g.value(id).value().as_f64()
}

fn translated(o: Option<NodeId>) -> Result<NodeId> {
    o.ok_or_else(|| invalid("generator has no translation head"))
}

/// One Adam step on F and B against frozen discriminators.
///
/// Fails with [`Error::MaskLeakage`] if any label plane flagged as
/// target-domain entered the graph, and with [`Error::NonFinite`] (listing
/// every component) if the objective is not finite.
#[allow(clippy::too_many_arguments)]
pub fn generator_step<T: Scalar>(
    models: &mut SusanModels<T>,
    opts: &mut SusanOptimizers<T>,
    x: &Tensor4<T>,
    masks: &Labels,
    y: &Tensor4<T>,
    w: &LossWeights,
    form: GanForm,
) -> Result<(LossReport, Fakes<T>)> {
    w.validate()?;
    let mut g = Graph::new();
    let bf = models.f.bind(&mut g, true);
    let bb = models.b.bind(&mut g, true);
    let bdx = models.d_x.bind(&mut g, false);
    let bdy = models.d_y.bind(&mut g, false);
    let xi = g.input(x.clone());
    let yi = g.input(y.clone());

    let fo = models.f.forward(&mut g, &bf, xi, Mode::Train)?;
    let fx = translated(fo.translated)?;
    let bfx = models.b.forward(&mut g, &bb, fx, Mode::Train)?;
    let bo = models.b.forward(&mut g, &bb, yi, Mode::Train)?;
    let by = translated(bo.translated)?;
    let fby = models.f.forward(&mut g, &bf, by, Mode::Train)?;

    let cyc = cycle_term(&mut g, xi, translated(bfx.translated)?, yi, translated(fby.translated)?)?;
    let seg = seg_term(&mut g, fo.logits, bfx.logits, masks)?;
    let (dy_fake, _) = models.d_y.forward(&mut g, &bdy, fx, Mode::Train)?;
    let (dx_fake, _) = models.d_x.forward(&mut g, &bdx, by, Mode::Train)?;
    let gen_f = gen_objective_term(&mut g, dy_fake, form)?;
    let gen_b = gen_objective_term(&mut g, dx_fake, form)?;

    audit::SUSAN_GRAPHS.fetch_add(1, Ordering::Relaxed);
    let (_, target_uses) = g.label_provenance();
    if target_uses > 0 {
        audit::TARGET_LABEL_USES.fetch_add(target_uses as u64, Ordering::Relaxed);
        return Err(Error::MaskLeakage(format!(
            "{target_uses} target-domain label plane(s) reached the generator objective"
        )));
    }

    let report = total_objective(scalar(&g, cyc), scalar(&g, seg), scalar(&g, gen_f), scalar(&g, gen_b), w)
        .map_err(|e| Error::Training(format!("generator step: {e}")))?;
    let lg = T::of(w.gan);
    let total = g.weighted_sum(&[
        (cyc, T::of(w.cyc)),
        (seg, T::of(w.seg)),
        (gen_f, lg),
        (gen_b, lg),
    ])?;
    let grads = g.backward(total)?;
    let gf = grads.collect(&g, &bf);
    let gb = grads.collect(&g, &bb);
    opts.f.step(&mut models.f.params_mut().tensors, &gf)?;
    opts.b.step(&mut models.b.params_mut().tensors, &gb)?;
    // F ran on x then B(y); B ran on F(x) then y.
    models.f.params_mut().absorb(&fo.stats);
    models.f.params_mut().absorb(&fby.stats);
    models.b.params_mut().absorb(&bfx.stats);
    models.b.params_mut().absorb(&bo.stats);

    let fakes = Fakes {
        fx: g.value(fx).clone(),
        by: g.value(by).clone(),
    };
    Ok((report, fakes))
}

/// One Adam step on both discriminators, ascending their objectives.
/// Returns `(objective of D_X, objective of D_Y)` before the update.
pub fn discriminator_step<T: Scalar>(
    models: &mut SusanModels<T>,
    opts: &mut SusanOptimizers<T>,
    x: &Tensor4<T>,
    y: &Tensor4<T>,
    fakes: &Fakes<T>,
    form: GanForm,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let bdx = models.d_x.bind(&mut g, true);
    let bdy = models.d_y.bind(&mut g, true);
    let xi = g.input(x.clone());
    let yi = g.input(y.clone());
    let fx = g.input(fakes.fx.clone());
    let by = g.input(fakes.by.clone());

    let (ry, sry) = models.d_y.forward(&mut g, &bdy, yi, Mode::Train)?;
    let (fy, sfy) = models.d_y.forward(&mut g, &bdy, fx, Mode::Train)?;
    let (rx, srx) = models.d_x.forward(&mut g, &bdx, xi, Mode::Train)?;
    let (fxl, sfx) = models.d_x.forward(&mut g, &bdx, by, Mode::Train)?;
    let obj_y = disc_objective_term(&mut g, ry, fy, form)?;
    let obj_x = disc_objective_term(&mut g, rx, fxl, form)?;
    let (vx, vy) = (scalar(&g, obj_x), scalar(&g, obj_y));
    if !(vx.is_finite() && vy.is_finite()) {
        return Err(Error::Training(format!(
            "discriminator step: non-finite objectives D_X={vx} D_Y={vy}"
        )));
    }
    let loss = g.weighted_sum(&[(obj_x, -T::one()), (obj_y, -T::one())])?;
    let grads = g.backward(loss)?;
    let gx = grads.collect(&g, &bdx);
    let gy = grads.collect(&g, &bdy);
    opts.d_x.step(&mut models.d_x.params_mut().tensors, &gx)?;
    opts.d_y.step(&mut models.d_y.params_mut().tensors, &gy)?;
    models.d_y.params_mut().absorb(&sry);
    models.d_y.params_mut().absorb(&sfy);
    models.d_x.params_mut().absorb(&srx);
    models.d_x.params_mut().absorb(&sfx);
    Ok((vx, vy))
}

/// One Adam step of plain cross-entropy training on the segmentation head.
pub fn supervised_step<T: Scalar>(
    net: &mut RNet<T>,
    opt: &mut AdamState<T>,
    x: &Tensor4<T>,
    masks: &Labels,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, true);
    let xi = g.input(x.clone());
    let out = net.forward(&mut g, &bound, xi, Mode::Train)?;
    let loss = g.softmax_cross_entropy(out.logits, masks)?;
    let v = scalar(&g, loss);
    if !v.is_finite() {
        return Err(Error::Training(format!("supervised step: non-finite loss {v}")));
    }
    let grads = g.backward(loss)?;
    let gn = grads.collect(&g, &bound);
    opt.step(&mut net.params_mut().tensors, &gn)?;
    net.params_mut().absorb(&out.stats);
    Ok(LossReport {
        seg: v,
        total: v,
        ..LossReport::default()
    })
}

/// Mean cross entropy of the segmentation head in eval mode.
pub fn supervised_loss<T: Scalar>(net: &RNet<T>, x: &Tensor4<T>, masks: &Labels) -> Result<f64> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let xi = g.input(x.clone());
    let out = net.forward(&mut g, &bound, xi, Mode::Eval)?;
    let loss = g.softmax_cross_entropy(out.logits, masks)?;
    Ok(scalar(&g, loss))
}
