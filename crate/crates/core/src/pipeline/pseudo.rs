use super::config::TrainConfig;
use super::data::Frame;
use super::model::BACKGROUND;
use crate::error::{Error, Result};
use crate::gaussians::{CloudVars, GaussianCloud};
use crate::losses::{d_ssim, l1, metrics};
use crate::mesh::TriMesh;
use crate::render::{render_on_tape, PoseVars};
use crate::tensor::{Adam, AdamConfig, ParamId, ParamStore, Real, Tape, Tensor};
use crate::unet::MIN_SCALE;

/// Result of the static per-vertex fit on one frame.
#[derive(Clone, Debug)]
pub struct PseudoFit {
    /// Activated attributes, quaternions unit-norm with `w >= 0`.
    pub cloud: GaussianCloud,
    pub initial_psnr: Real,
    pub final_psnr: Real,
    /// Loss after every iteration.
    pub losses: Vec<Real>,
}

struct Raw {
    centers: ParamId,
    rotations: ParamId,
    log_scales: ParamId,
    color_logits: ParamId,
    opacity_logits: ParamId,
}

fn activate(tape: &mut Tape, store: &ParamStore, raw: &Raw, scale_max: Real) -> CloudVars {
    let centers = tape.param(store, raw.centers);
    let rotations = tape.param(store, raw.rotations);
    let s = tape.param(store, raw.log_scales);
    let s = tape.exp(s);
    let scales = tape.clamp(s, MIN_SCALE, scale_max);
    let c = tape.param(store, raw.color_logits);
    let colors = tape.sigmoid(c);
    let o = tape.param(store, raw.opacity_logits);
    let opacities = tape.sigmoid(o);
    CloudVars { centers, rotations, scales, colors, opacities }
}

/// Fits one free Gaussian per vertex of `frame.mesh` to the frame's image
/// with `(1 - λ) L1 + λ D-SSIM`.
pub fn fit_pseudo_gaussians(frame: &Frame, config: &TrainConfig, scale_max: Real) -> Result<PseudoFit> {
    let mesh: &TriMesh = &frame.mesh;
    let n = mesh.num_vertices();
    let edge = mesh.mean_edge_length();
    let mut store = ParamStore::new();
    let raw = Raw {
        centers: store.add("centers", Tensor::new(vec![n, 3], mesh.flat_vertices())?),
        rotations: store.add("rotations", Tensor::from_fn(vec![n, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 })),
        log_scales: store.add("log_scales", Tensor::full(vec![n, 3], (0.5 * edge).ln())),
        color_logits: store.add("color_logits", Tensor::zeros(vec![n, 3])),
        opacity_logits: store.add("opacity_logits", Tensor::full(vec![n, 1], 1.0)),
    };
    let lr = config.lr.pseudo;
    let mut opt_pos = Adam::new(AdamConfig::with_lr(config.lr.pseudo_position * edge), &store, vec![raw.centers]);
    let mut opt_rest = Adam::new(
        AdamConfig::with_lr(lr),
        &store,
        vec![raw.rotations, raw.log_scales, raw.color_logits, raw.opacity_logits],
    );
    let lambda = config.loss.lambda;
    let intr = frame.camera.intrinsics;
    let mut tape = Tape::new();
    let render = |tape: &mut Tape, store: &ParamStore| -> Result<(CloudVars, crate::tensor::Var)> {
        let cloud = activate(tape, store, &raw, scale_max);
        let pose = PoseVars::constant(tape, &frame.camera);
        let bg = tape.constant(Tensor::from_vec(BACKGROUND.to_vec()));
        let r = render_on_tape(tape, &cloud, &pose, &intr, bg)?;
        Ok((cloud, r.color))
    };
    let psnr_now = |store: &ParamStore| -> Result<Real> {
        let mut tape = Tape::new();
        let (_, img) = render(&mut tape, store)?;
        Ok(metrics(tape.value(img), &frame.image)?.psnr)
    };
    let initial_psnr = psnr_now(&store)?;
    let mut losses = Vec::with_capacity(config.pseudo_iters);
    for it in 0..config.pseudo_iters {
        tape.reset();
        let (_, img) = render(&mut tape, &store)?;
        let gt = tape.constant(frame.image.clone());
        let a = l1(&mut tape, img, gt)?;
        let b = d_ssim(&mut tape, img, gt)?;
        let a = tape.scale(a, 1.0 - lambda);
        let b = tape.scale(b, lambda);
        let loss = tape.add(a, b);
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("pseudo-Gaussian fit diverged at iteration {it} (seed {})", config.seed)));
        }
        losses.push(v);
        let g = tape.backward(loss)?;
        opt_pos.step(&mut store, &g)?;
        opt_rest.step(&mut store, &g)?;
    }
    let final_psnr = psnr_now(&store)?;
    tape.reset();
    let cv = activate(&mut tape, &store, &raw, scale_max);
    let mut cloud = GaussianCloud::from_tape(&tape, &cv);
    canonicalize_quaternions(&mut cloud.rotations);
    Ok(PseudoFit { cloud, initial_psnr, final_psnr, losses })
}

/// Unit-normalizes each `(w, x, y, z)` row and flips it so `w >= 0`.
pub fn canonicalize_quaternions(q: &mut Tensor) {
    for row in q.data_mut().chunks_mut(4) {
        let n = row.iter().map(|v| v * v).sum::<Real>().sqrt();
        let s = if n > 0.0 { if row[0] < 0.0 { -1.0 / n } else { 1.0 / n } } else { 0.0 };
        if n == 0.0 {
            row.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        } else {
            row.iter_mut().for_each(|v| *v *= s);
        }
    }
}
