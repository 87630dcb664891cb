use super::data::Frame;
use super::model::Model;
use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::tensor::{Adam, AdamConfig, Real, Tape, Tensor, Var};
use crate::unet::generate_anchors;

#[derive(Clone, Debug)]
pub struct WarmupReport {
    /// Summed attribute MSE after every iteration.
    pub losses: Vec<Real>,
    /// Mean anchor-to-target center distance at the end.
    pub center_error: Real,
}

fn mse(tape: &mut Tape, a: Var, target: &Tensor) -> Var {
    let t = tape.constant(target.clone());
    let d = tape.sub(a, t);
    let d = tape.square(d);
    tape.mean(d)
}

/// Regresses the U-net anchors of `frame` onto a fitted static cloud,
/// attribute by attribute in activated space.
pub fn warm_up(model: &mut Model, target: &GaussianCloud, frame: &Frame) -> Result<WarmupReport> {
    if target.len() != model.meta.vertices {
        return Err(Error::Shape(format!("{} pseudo-Gaussians for {} anchors", target.len(), model.meta.vertices)));
    }
    let ids = model.group_ids("unet");
    let mut opt = Adam::new(AdamConfig::with_lr(model.config.lr.warmup), &model.store, ids);
    let e = Tensor::new(vec![1, frame.e.len()], frame.e.clone())?;
    let mut losses = Vec::with_capacity(model.config.warmup_iters);
    let mut tape = Tape::new();
    for it in 0..model.config.warmup_iters {
        tape.reset();
        let ev = tape.constant(e.clone());
        let a = generate_anchors(
            &mut tape, &model.store, &frame.mesh, ev, &model.geo, &model.app, &model.hierarchy, &model.act,
        )?;
        let c = &a.cloud;
        let parts = [
            mse(&mut tape, c.centers, &target.centers),
            mse(&mut tape, c.rotations, &target.rotations),
            mse(&mut tape, c.scales, &target.scales),
            mse(&mut tape, c.colors, &target.colors),
            mse(&mut tape, c.opacities, &target.opacities),
        ];
        let mut loss = parts[0];
        for &p in &parts[1..] {
            loss = tape.add(loss, p);
        }
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("warm-up diverged at iteration {it} (seed {})", model.config.seed)));
        }
        losses.push(v);
        let g = tape.backward(loss)?;
        opt.step(&mut model.store, &g)?;
    }
    let center_error = anchor_center_error(model, target, frame)?;
    Ok(WarmupReport { losses, center_error })
}

/// Mean distance between the anchors generated for `frame` and `target`'s centers.
pub fn anchor_center_error(model: &Model, target: &GaussianCloud, frame: &Frame) -> Result<Real> {
    let mut tape = Tape::new();
    let ev = tape.constant(Tensor::new(vec![1, frame.e.len()], frame.e.clone())?);
    let a = generate_anchors(&mut tape, &model.store, &frame.mesh, ev, &model.geo, &model.app, &model.hierarchy, &model.act)?;
    let got = tape.value(a.cloud.centers).data();
    let want = target.centers.data();
    let n = target.len();
    let total: Real = (0..n)
        .map(|i| (0..3).map(|k| (got[3 * i + k] - want[3 * i + k]).powi(2)).sum::<Real>().sqrt())
        .sum();
    Ok(total / n as Real)
}
