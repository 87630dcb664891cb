//! Browser demo: scrub through a synthetic avatar sequence, fit Gaussians to
//! a frame with the differentiable rasterizer, and orbit the fitted cloud.

use splatgraph::pipeline::{fit_pseudo_gaussians, Frame, TrainConfig, BACKGROUND};
use splatgraph::render::{render, Camera};
use splatgraph::unet::GeometryActivation;
use splatgraph::synth::{build_sequence, orbit_camera, SynthConfig, SyntheticSequence};
use splatgraph::{Real, Tensor};
use wasm_bindgen::prelude::*;

fn js_err(e: splatgraph::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[3, H, W]` in `[0, 1]` to interleaved RGBA bytes.
fn rgba(img: &Tensor) -> Vec<u8> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let mut out = Vec::with_capacity(plane * 4);
    for p in 0..plane {
        for c in 0..3 {
            out.push((img.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

#[wasm_bindgen]
pub struct Demo {
    seq: SyntheticSequence,
    fitted: Option<(usize, splatgraph::gaussians::GaussianCloud)>,
}

#[wasm_bindgen]
impl Demo {
    /// A small sequence (162-vertex template) so fitting stays interactive.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, frames: usize, resolution: usize) -> Result<Demo, JsError> {
        let cfg = SynthConfig { seed, frames, resolution, subdivisions: 2, ..SynthConfig::default() };
        let seq = build_sequence(&cfg).map_err(js_err)?;
        Ok(Demo { seq, fitted: None })
    }

    pub fn frames(&self) -> usize {
        self.seq.frames.len()
    }

    pub fn resolution(&self) -> usize {
        self.seq.config.resolution
    }

    /// Ground-truth image of `frame` from the mesh renderer.
    pub fn ground_truth(&self, frame: usize) -> Result<Vec<u8>, JsError> {
        let f = self.seq.frames.get(frame).ok_or_else(|| JsError::new("frame out of range"))?;
        Ok(rgba(&f.gt.image))
    }

    /// Fits one Gaussian per vertex to `frame` for `iters` Adam steps and
    /// returns `[initial PSNR, final PSNR]`.
    pub fn fit(&mut self, frame: usize, iters: usize) -> Result<Vec<f64>, JsError> {
        let f = self.seq.frames.get(frame).ok_or_else(|| JsError::new("frame out of range"))?;
        let data = Frame {
            index: frame,
            t: f.tracked.t,
            e: f.tracked.e.clone(),
            camera: f.tracked.camera.clone(),
            mesh: f.mesh.clone(),
            image: f.gt.image.clone(),
            mask: f.gt.mask.clone(),
        };
        let cfg = TrainConfig { pseudo_iters: iters, ..TrainConfig::default() };
        let scale_max = GeometryActivation::for_mesh(&self.seq.template).scale_max;
        let fit = fit_pseudo_gaussians(&data, &cfg, scale_max).map_err(js_err)?;
        self.fitted = Some((frame, fit.cloud));
        Ok(vec![fit.initial_psnr as f64, fit.final_psnr as f64])
    }

    /// Renders the fitted cloud from the orbit position at normalized time
    /// `t`, or from the fitted frame's own camera when `t` is negative.
    pub fn render_fitted(&self, t: f64) -> Result<Vec<u8>, JsError> {
        let (frame, cloud) = self.fitted.as_ref().ok_or_else(|| JsError::new("fit a frame first"))?;
        let own = &self.seq.frames[*frame].tracked.camera;
        let cam: Camera = if t < 0.0 {
            own.clone()
        } else {
            orbit_camera((t as Real).clamp(0.0, 1.0), self.seq.config.camera_distance, own.intrinsics).map_err(js_err)?
        };
        let out = render(cloud, &cam, BACKGROUND).map_err(js_err)?;
        Ok(rgba(&out.color))
    }

    pub fn gaussians(&self) -> usize {
        self.fitted.as_ref().map_or(0, |f| f.1.len())
    }
}
