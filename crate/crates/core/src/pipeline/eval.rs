use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::{FrameInput, Model};
use crate::error::Result;
use crate::gaussians::{raw_cloud_bytes, GaussianCloud};
use crate::ggo::TrackingOffsets;
use crate::losses::{metrics, summarize, FrameMetrics, Metrics, MetricsSummary};
use crate::render::{save_png, save_png_gray};
use crate::tensor::{Real, Tape, Tensor};

/// Concrete outputs of one rendered frame.
#[derive(Clone, Debug)]
pub struct FrameRender {
    pub coarse: Tensor,
    pub fine: Tensor,
    pub depth: Tensor,
    pub weight: Tensor,
    pub cloud: GaussianCloud,
    /// `(δe, ω, τ)` when tracking offsets were predicted.
    pub offsets: Option<(Vec<Real>, [Real; 3], [Real; 3])>,
}

fn offset_values(tape: &Tape, o: &TrackingOffsets) -> (Vec<Real>, [Real; 3], [Real; 3]) {
    let w = tape.value(o.omega).data();
    let t = tape.value(o.tau).data();
    (tape.value(o.delta_e).data().to_vec(), [w[0], w[1], w[2]], [t[0], t[1], t[2]])
}

pub fn render_frame(model: &Model, frame: FrameInput<'_>, use_ggo: bool) -> Result<FrameRender> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, frame, use_ggo)?;
    Ok(FrameRender {
        coarse: tape.value(out.coarse).clone(),
        fine: tape.value(out.fine).clone(),
        depth: tape.value(out.depth).clone(),
        weight: tape.value(out.weight).clone(),
        cloud: GaussianCloud::from_tape(&tape, &out.cloud),
        offsets: out.offsets.as_ref().map(|o| offset_values(&tape, o)),
    })
}

impl FrameRender {
    /// Writes `coarse.png`, `final.png`, `depth.png` and `weight.png` into `dir`.
    pub fn save(&self, dir: &Path, near: Real, far: Real) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_png(&self.coarse, &dir.join("coarse.png"))?;
        save_png(&self.fine, &dir.join("final.png"))?;
        save_png_gray(&self.depth, near, far, &dir.join("depth.png"))?;
        save_png_gray(&self.weight, 0.0, 1.0, &dir.join("weight.png"))?;
        Ok(())
    }
}

/// Evaluation summary. The top-level metrics are means over the held-out frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub l2: Real,
    pub psnr: Real,
    pub ssim: Real,
    pub proxy: Real,
    /// Wall-clock seconds per rendered frame (the only non-deterministic field).
    pub sec_per_frame: f64,
    pub ckpt_bytes: u64,
    /// Bytes to store every frame's Gaussians uncompressed.
    pub raw_cloud_bytes: u64,
    pub gaussians_per_frame: usize,
    pub test: MetricsSummary,
    pub train: MetricsSummary,
    #[serde(skip)]
    pub test_frames: Vec<FrameMetrics>,
    #[serde(skip)]
    pub train_frames: Vec<FrameMetrics>,
}

/// Metrics of the enhanced image on every frame of `data`, split by the
/// model's hold-out setting.
pub fn evaluate(model: &Model, data: &Dataset, ckpt_bytes: u64) -> Result<EvalReport> {
    let (train, test) = data.split(model.config.test_frames)?;
    let mut time = 0.0;
    let mut raw_per_frame = 0;
    let mut run = |idx: &[usize], use_ggo: bool| -> Result<Vec<FrameMetrics>> {
        idx.iter()
            .map(|&i| {
                let f = &data.frames[i];
                let start = Instant::now();
                let r = render_frame(model, f.into(), use_ggo)?;
                time += start.elapsed().as_secs_f64();
                raw_per_frame = raw_cloud_bytes(&r.cloud);
                Ok(FrameMetrics { frame: i, metrics: metrics(&r.fine, &f.image)? })
            })
            .collect()
    };
    let train_rows = run(&train, true)?;
    let test_rows = if test.is_empty() { Vec::new() } else { run(&test, model.config.ggo_at_test)? };
    let train_sum = summarize(&train_rows)?;
    let test_sum = if test_rows.is_empty() { train_sum.clone() } else { summarize(&test_rows)? };
    let Metrics { l2, psnr, ssim, proxy } = test_sum.mean;
    Ok(EvalReport {
        l2,
        psnr,
        ssim,
        proxy,
        sec_per_frame: time / data.len() as f64,
        ckpt_bytes,
        raw_cloud_bytes: raw_per_frame * data.len() as u64,
        gaussians_per_frame: model.gaussians_per_frame(),
        test: test_sum,
        train: train_sum,
        test_frames: test_rows,
        train_frames: train_rows,
    })
}

/// Mean total training loss over `frames`, without any parameter update.
pub fn mean_loss(model: &Model, data: &Dataset, frames: &[usize]) -> Result<Real> {
    let mut sum = 0.0;
    for &i in frames {
        let f = &data.frames[i];
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, f.into(), true)?;
        let (_, total) = super::train::frame_loss(&mut tape, model, &out, f)?;
        sum += tape.value(total).item();
    }
    Ok(sum / frames.len().max(1) as Real)
}
