//! Training losses and evaluation metrics on `[c, h, w]` images in `[0, 1]`.
//!
//! The perceptual term is a fixed, network-free proxy: L1 between Sobel
//! gradients plus L1 between 2× and 4× box-downsampled images.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::ResampleMode;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: Real = 1.5;
pub const SSIM_C1: Real = 0.01 * 0.01;
pub const SSIM_C2: Real = 0.03 * 0.03;
pub const BCE_EPS: Real = 1e-6;
pub const PSNR_CAP: Real = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// D-SSIM share of the final-image loss.
    pub lambda: Real,
    pub perceptual: Real,
    pub fine: Real,
    pub coarse: Real,
    pub weight: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.2, perceptual: 0.1, fine: 1.0, coarse: 0.1, weight: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.perceptual, self.fine, self.coarse, self.weight];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(n: usize, sigma: Real) -> Vec<Real> {
    let c = (n as Real - 1.0) / 2.0;
    let g: Vec<Real> = (0..n).map(|i| (-((i as Real - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: Real = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn ssim_kernel() -> Rc<Vec<Real>> {
    let g = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    Rc::new(g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect())
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
    let s = tape.shape(a).to_vec();
    if s != tape.shape(b) || s.len() != 3 {
        return Err(Error::Shape(format!("{what}: {s:?} vs {:?} (need equal [c, h, w])", tape.shape(b))));
    }
    Ok(s)
}

/// Mean SSIM over all valid window positions and channels.
pub fn ssim(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let s = same_shape(tape, a, b, "ssim")?;
    if s[1] < SSIM_WINDOW || s[2] < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {s:?}")));
    }
    let k = ssim_kernel();
    let (n, m) = (SSIM_WINDOW, SSIM_WINDOW);
    let mu_a = tape.filter(a, &k, n, m);
    let mu_b = tape.filter(b, &k, n, m);
    let aa = tape.mul(a, a);
    let bb = tape.mul(b, b);
    let ab = tape.mul(a, b);
    let e_aa = tape.filter(aa, &k, n, m);
    let e_bb = tape.filter(bb, &k, n, m);
    let e_ab = tape.filter(ab, &k, n, m);
    let mu_aa = tape.mul(mu_a, mu_a);
    let mu_bb = tape.mul(mu_b, mu_b);
    let mu_ab = tape.mul(mu_a, mu_b);
    let var_a = tape.sub(e_aa, mu_aa);
    let var_b = tape.sub(e_bb, mu_bb);
    let cov = tape.sub(e_ab, mu_ab);

    let n1 = tape.scale(mu_ab, 2.0);
    let n1 = tape.add_scalar(n1, SSIM_C1);
    let n2 = tape.scale(cov, 2.0);
    let n2 = tape.add_scalar(n2, SSIM_C2);
    let d1 = tape.add(mu_aa, mu_bb);
    let d1 = tape.add_scalar(d1, SSIM_C1);
    let d2 = tape.add(var_a, var_b);
    let d2 = tape.add_scalar(d2, SSIM_C2);
    let num = tape.mul(n1, n2);
    let den = tape.mul(d1, d2);
    let map = tape.div(num, den);
    Ok(tape.mean(map))
}

/// `(1 - ssim) / 2`
pub fn d_ssim(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let s = ssim(tape, a, b)?;
    let s = tape.scale(s, -0.5);
    Ok(tape.add_scalar(s, 0.5))
}

pub fn l1(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!("l1: {:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    let d = tape.sub(a, b);
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

fn sobel_kernels() -> (Rc<Vec<Real>>, Rc<Vec<Real>>) {
    let gx = vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy = vec![-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    (Rc::new(gx), Rc::new(gy))
}

/// Gradient-and-multiscale L1 proxy for a perceptual distance.
pub fn perceptual_proxy(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let s = same_shape(tape, a, b, "perceptual proxy")?;
    if s[1] < 4 || s[2] < 4 {
        return Err(Error::Shape(format!("perceptual proxy needs at least 4x4 images, got {s:?}")));
    }
    let d = tape.sub(a, b);
    let (kx, ky) = sobel_kernels();
    let mut terms = Vec::with_capacity(4);
    for k in [&kx, &ky] {
        let g = tape.filter(d, k, 3, 3);
        let g = tape.abs(g);
        terms.push(tape.mean(g));
    }
    for f in [2, 4] {
        let r = tape.resample(d, s[1] / f, s[2] / f, ResampleMode::Bilinear);
        let r = tape.abs(r);
        terms.push(tape.mean(r));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    Ok(acc)
}

/// `(1-λ)·L1 + λ·D-SSIM + λ_perc·proxy`
pub fn loss_final(tape: &mut Tape, pred: Var, gt: Var, w: &LossWeights) -> Result<Var> {
    let a = l1(tape, pred, gt)?;
    let b = d_ssim(tape, pred, gt)?;
    let c = perceptual_proxy(tape, pred, gt)?;
    let a = tape.scale(a, 1.0 - w.lambda);
    let b = tape.scale(b, w.lambda);
    let c = tape.scale(c, w.perceptual);
    let ab = tape.add(a, b);
    Ok(tape.add(ab, c))
}

/// `L1 + D-SSIM`
pub fn loss_coarse(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let a = l1(tape, pred, gt)?;
    let b = d_ssim(tape, pred, gt)?;
    Ok(tape.add(a, b))
}

/// Binary cross-entropy between a weight map and a `{0, 1}` mask.
pub fn loss_weight(tape: &mut Tape, weight: Var, mask: Var) -> Result<Var> {
    if tape.shape(weight) != tape.shape(mask) {
        return Err(Error::Shape(format!("weight {:?} vs mask {:?}", tape.shape(weight), tape.shape(mask))));
    }
    let w = tape.clamp(weight, BCE_EPS, 1.0 - BCE_EPS);
    let lw = tape.ln(w);
    let one_minus = tape.scale(w, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let lnw = tape.ln(one_minus);
    let m_inv = tape.scale(mask, -1.0);
    let m_inv = tape.add_scalar(m_inv, 1.0);
    let p = tape.mul(mask, lw);
    let q = tape.mul(m_inv, lnw);
    let s = tape.add(p, q);
    let s = tape.mean(s);
    Ok(tape.neg(s))
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub fine: Var,
    pub coarse: Var,
    pub weight: Var,
}

/// `λ_f·L_f + λ_c·L_c + λ_w·L_w`
pub fn total_loss(tape: &mut Tape, parts: &LossParts, w: &LossWeights) -> Var {
    let f = tape.scale(parts.fine, w.fine);
    let c = tape.scale(parts.coarse, w.coarse);
    let m = tape.scale(parts.weight, w.weight);
    let fc = tape.add(f, c);
    tape.add(fc, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub l2: Real,
    pub psnr: Real,
    pub ssim: Real,
    pub proxy: Real,
}

pub fn psnr_from_mse(mse: Real) -> Real {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Evaluation metrics of `pred` against `gt`, both `[c, h, w]`.
pub fn metrics(pred: &Tensor, gt: &Tensor) -> Result<Metrics> {
    if pred.shape() != gt.shape() || pred.rank() != 3 {
        return Err(Error::Shape(format!("metrics: {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let l2 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<Real>() / pred.len() as Real;
    let mut tape = Tape::new();
    let a = tape.constant(pred.clone());
    let b = tape.constant(gt.clone());
    let s = ssim(&mut tape, a, b)?;
    let p = perceptual_proxy(&mut tape, a, b)?;
    Ok(Metrics { l2, psnr: psnr_from_mse(l2), ssim: tape.value(s).item(), proxy: tape.value(p).item() })
}

/// Per-frame metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub frames: usize,
    pub mean: Metrics,
    /// PSNR of the mean squared error over all frames.
    pub psnr_of_mean_l2: Real,
}

pub fn summarize(rows: &[FrameMetrics]) -> Result<MetricsSummary> {
    if rows.is_empty() {
        return Err(Error::Data("no frames to summarize".into()));
    }
    let n = rows.len() as Real;
    let avg = |f: fn(&Metrics) -> Real| rows.iter().map(|r| f(&r.metrics)).sum::<Real>() / n;
    let mean = Metrics { l2: avg(|m| m.l2), psnr: avg(|m| m.psnr), ssim: avg(|m| m.ssim), proxy: avg(|m| m.proxy) };
    Ok(MetricsSummary { frames: rows.len(), psnr_of_mean_l2: psnr_from_mse(mean.l2), mean })
}

pub const METRICS_CSV_HEADER: &str = "frame_id,l2,psnr,ssim,proxy";

pub fn write_metrics_csv(path: &Path, rows: &[FrameMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{METRICS_CSV_HEADER}")?;
    for r in rows {
        let m = &r.metrics;
        writeln!(f, "{},{:.10e},{:.6},{:.8},{:.8}", r.frame, m.l2, m.psnr, m.ssim, m.proxy)?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_summary_json(path: &Path, summary: &MetricsSummary) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(summary)?)?;
    Ok(())
}
