//! Synthetic stand-in for a tracked talking-head video: an icosphere template
//! driven by smooth blendshapes, an orbiting camera, ground-truth images and
//! masks from an independent mesh renderer, and optional seeded corruption of
//! the "tracked" expression codes and camera poses.
//!
//! On-disk layout:
//!
//! ```text
//! manifest.json
//! template.obj
//! meshes/frame_%04d.obj     tracked meshes
//! images/frame_%04d.png     ground truth, white background
//! masks/frame_%04d.png      foreground coverage
//! tracking.csv              frame, t, e0.., qw, qx, qy, qz, tx, ty, tz
//! tracking_clean.csv        uncorrupted tracking (only with noise)
//! noise.csv                 injected noise per frame (only with noise)
//! ```

mod gt;

pub use gt::{default_light, render_ground_truth, render_mesh, GtRender, AMBIENT, DIFFUSE, SUPERSAMPLE};

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{matrix_to_quat, quat_to_matrix};
use crate::ggo::so3_exp_matrix;
use crate::mesh::{icosphere, write_obj_string, TriMesh, Vec3};
use crate::render::{save_png, save_png_gray, Camera, Intrinsics};
use crate::tensor::Real;
use crate::util::Rng;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Standard deviation of additive expression noise.
    pub expr_sigma: Real,
    /// RMS rotation jitter angle in degrees (isotropic axis-angle noise).
    pub rotation_deg: Real,
    /// Per-axis standard deviation of translation jitter.
    pub translation_sigma: Real,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { expr_sigma: 0.0, rotation_deg: 0.0, translation_sigma: 0.0 }
    }
}

impl NoiseConfig {
    pub fn is_zero(&self) -> bool {
        self.expr_sigma == 0.0 && self.rotation_deg == 0.0 && self.translation_sigma == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub frames: usize,
    /// Square image side in pixels.
    pub resolution: usize,
    pub subdivisions: usize,
    pub radius: Real,
    pub blendshapes: usize,
    /// Cap on the summed blendshape displacement, as a fraction of the radius.
    pub amplitude: Real,
    pub camera_distance: Real,
    pub fov_y: Real,
    pub noise: NoiseConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 32,
            resolution: 128,
            subdivisions: 3,
            radius: 1.0,
            blendshapes: 8,
            amplitude: 0.1,
            camera_distance: 3.2,
            fov_y: 0.75,
            noise: NoiseConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("need at least one frame".into()));
        }
        if self.resolution == 0 || self.resolution % 4 != 0 {
            return Err(Error::Config(format!("resolution {} must be a positive multiple of 4", self.resolution)));
        }
        if !(self.amplitude >= 0.0 && self.amplitude <= 0.1) {
            return Err(Error::Config(format!("blendshape amplitude {} outside [0, 0.1]", self.amplitude)));
        }
        if !(self.radius > 0.0 && self.camera_distance > 1.5 * self.radius) {
            return Err(Error::Config("camera must orbit well outside the template".into()));
        }
        let n = &self.noise;
        if !(n.expr_sigma >= 0.0 && n.rotation_deg >= 0.0 && n.translation_sigma >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let d = self.camera_distance;
        Intrinsics::from_fov(self.fov_y, self.resolution, self.resolution, 0.1 * d, 4.0 * d)
    }
}

/// Per-vertex displacement fields; `bases[i][v]` is the offset of vertex `v`
/// at unit weight `e_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Blendshapes {
    pub bases: Vec<Vec<Vec3>>,
}

impl Blendshapes {
    /// Radial Gaussian bumps at random sphere points, scaled so that
    /// `Σ_i |B_i(v)| ≤ amplitude · radius` at every vertex; with `|e_i| ≤ 1`
    /// no vertex moves further than that.
    pub fn random(template: &TriMesh, count: usize, amplitude: Real, radius: Real, rng: &mut Rng) -> Self {
        let n = template.num_vertices();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut raw: Vec<Vec<Real>> = Vec::with_capacity(count);
        for _ in 0..count {
            let c: [f64; 3] = std::array::from_fn(|_| normal.sample(rng));
            let cn = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt().max(1e-12);
            let c = [c[0] / cn, c[1] / cn, c[2] / cn];
            let width = rng.random_range(0.35..0.6) * radius as f64;
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            raw.push(
                template
                    .vertices
                    .iter()
                    .map(|p| {
                        let d2: f64 = (0..3).map(|k| (p[k] as f64 - c[k] * radius as f64).powi(2)).sum();
                        (sign * (-d2 / (2.0 * width * width)).exp()) as Real
                    })
                    .collect(),
            );
        }
        let peak = (0..n).map(|v| raw.iter().map(|b| b[v].abs()).sum::<Real>()).fold(0.0, Real::max);
        let s = if peak > 0.0 { amplitude * radius / peak } else { 0.0 };
        let bases = raw
            .into_iter()
            .map(|b| {
                template
                    .vertices
                    .iter()
                    .zip(b)
                    .map(|(p, g)| {
                        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(1e-12);
                        [p[0] / r * g * s, p[1] / r * g * s, p[2] / r * g * s]
                    })
                    .collect()
            })
            .collect();
        Self { bases }
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    /// `V + Σ_i e_i B_i`
    pub fn deform(&self, template: &TriMesh, e: &[Real]) -> Result<TriMesh> {
        if e.len() != self.len() {
            return Err(Error::Shape(format!("{} coefficients for {} blendshapes", e.len(), self.len())));
        }
        let verts = template
            .vertices
            .iter()
            .enumerate()
            .map(|(v, p)| {
                let mut q = *p;
                for (b, &w) in self.bases.iter().zip(e) {
                    for k in 0..3 {
                        q[k] += w * b[v][k];
                    }
                }
                q
            })
            .collect();
        template.with_vertices(verts)
    }
}

/// Smooth low-frequency albedo in `[0.15, 0.9]` from template positions.
pub fn procedural_colors(template: &TriMesh) -> Vec<[Real; 3]> {
    template
        .vertices
        .iter()
        .map(|p| {
            let r = 0.55 + 0.3 * (2.1 * p[0] + 0.9 * p[1] + 0.3).sin();
            let g = 0.5 + 0.3 * (1.7 * p[1] - 1.9 * p[2] + 1.1).sin();
            let b = 0.5 + 0.3 * (1.3 * p[2] + 2.3 * p[0] - 0.7).sin();
            [r, g, b]
        })
        .collect()
}

/// Smooth expression trajectories: `e_i(t) = sin(2π f_i t + φ_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionTrack {
    pub freq: Vec<Real>,
    pub phase: Vec<Real>,
}

impl ExpressionTrack {
    pub fn random(dim: usize, rng: &mut Rng) -> Self {
        let freq = (0..dim).map(|_| rng.random_range(0.5..1.5)).collect();
        let phase = (0..dim).map(|_| rng.random_range(0.0..std::f64::consts::TAU) as Real).collect();
        Self { freq, phase }
    }

    pub fn at(&self, t: Real) -> Vec<Real> {
        let tau = std::f64::consts::TAU as Real;
        self.freq.iter().zip(&self.phase).map(|(f, p)| (tau * f * t + p).sin()).collect()
    }
}

/// Camera on a swaying orbit around the origin at normalized time `t`.
pub fn orbit_camera(t: Real, distance: Real, intr: Intrinsics) -> Result<Camera> {
    let pi = std::f64::consts::PI as Real;
    let azimuth = 0.45 * (3.0 * pi * t).sin();
    let elevation = 0.12 * (4.0 * pi * t + 0.5).sin();
    let eye = [
        distance * elevation.cos() * azimuth.sin(),
        distance * elevation.sin(),
        distance * elevation.cos() * azimuth.cos(),
    ];
    Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], intr)
}

/// Tracked parameters of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Tracking {
    pub t: Real,
    pub e: Vec<Real>,
    pub camera: Camera,
}

/// Noise injected into one frame's tracking.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameNoise {
    pub delta_e: Vec<Real>,
    /// Axis-angle rotation pre-multiplied onto the world-to-view rotation.
    pub omega: [Real; 3],
    pub tau: [Real; 3],
}

impl FrameNoise {
    pub fn angle(&self) -> Real {
        self.omega.iter().map(|v| v * v).sum::<Real>().sqrt()
    }
}

/// Applies `R' = exp(ω) R`, `t' = t + τ` to a camera.
pub fn perturb_camera(camera: &Camera, omega: &[Real; 3], tau: &[Real; 3]) -> Result<Camera> {
    let r = quat_to_matrix(&camera.rotation);
    let d = so3_exp_matrix(omega);
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| d[i][k] * r[k][j]).sum();
        }
    }
    let t = std::array::from_fn(|i| camera.translation[i] + tau[i]);
    Camera::new(matrix_to_quat(&m), t, camera.intrinsics)
}

/// Adds seeded Gaussian noise to expressions and SE(3) jitter to cameras.
/// Zero noise returns the input unchanged.
pub fn corrupt_tracking(tracks: &[Tracking], noise: &NoiseConfig, seed: u64) -> Result<(Vec<Tracking>, Vec<FrameNoise>)> {
    let mut rng = Rng::seed_from_u64(seed ^ 0x6e6f_6973_65);
    let n01 = Normal::new(0.0, 1.0).expect("unit normal");
    let rot_sigma = noise.rotation_deg.to_radians() / (3.0 as Real).sqrt();
    let mut out = Vec::with_capacity(tracks.len());
    let mut record = Vec::with_capacity(tracks.len());
    for tr in tracks {
        let mut draw = |s: Real| (n01.sample(&mut rng) as Real) * s;
        let delta_e: Vec<Real> = tr.e.iter().map(|_| draw(noise.expr_sigma)).collect();
        let omega = [draw(rot_sigma), draw(rot_sigma), draw(rot_sigma)];
        let tau = [draw(noise.translation_sigma), draw(noise.translation_sigma), draw(noise.translation_sigma)];
        let camera = if noise.rotation_deg == 0.0 && noise.translation_sigma == 0.0 {
            tr.camera.clone()
        } else {
            perturb_camera(&tr.camera, &omega, &tau)?
        };
        let e = tr.e.iter().zip(&delta_e).map(|(a, b)| a + b).collect();
        out.push(Tracking { t: tr.t, e, camera });
        record.push(FrameNoise { delta_e, omega, tau });
    }
    Ok((out, record))
}

pub struct SynthFrame {
    /// Ground-truth tracking.
    pub truth: Tracking,
    /// What a tracker would report (equals `truth` without noise).
    pub tracked: Tracking,
    /// Mesh deformed with the tracked expression.
    pub mesh: TriMesh,
    pub gt: GtRender,
}

pub struct SyntheticSequence {
    pub config: SynthConfig,
    pub template: TriMesh,
    pub colors: Vec<[Real; 3]>,
    pub blendshapes: Blendshapes,
    pub frames: Vec<SynthFrame>,
    pub noise: Option<Vec<FrameNoise>>,
}

pub fn normalized_time(frame: usize, frames: usize) -> Real {
    if frames <= 1 {
        0.0
    } else {
        frame as Real / (frames - 1) as Real
    }
}

/// Builds the whole sequence in memory.
pub fn build_sequence(cfg: &SynthConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let template = icosphere(cfg.subdivisions, cfg.radius);
    let blend = Blendshapes::random(&template, cfg.blendshapes, cfg.amplitude, cfg.radius, &mut rng);
    let track = ExpressionTrack::random(cfg.blendshapes, &mut rng);
    let colors = procedural_colors(&template);
    let intr = cfg.intrinsics();
    let truth: Vec<Tracking> = (0..cfg.frames)
        .map(|f| {
            let t = normalized_time(f, cfg.frames);
            Ok(Tracking { t, e: track.at(t), camera: orbit_camera(t, cfg.camera_distance, intr)? })
        })
        .collect::<Result<_>>()?;
    let (tracked, noise) = if cfg.noise.is_zero() {
        (truth.clone(), None)
    } else {
        let (tr, n) = corrupt_tracking(&truth, &cfg.noise, cfg.seed)?;
        (tr, Some(n))
    };
    let frames = truth
        .into_iter()
        .zip(tracked)
        .map(|(truth, tracked)| {
            let clean = blend.deform(&template, &truth.e)?;
            let gt = render_ground_truth(&clean, &colors, &truth.camera);
            let mesh = blend.deform(&template, &tracked.e)?;
            Ok(SynthFrame { truth, tracked, mesh, gt })
        })
        .collect::<Result<_>>()?;
    Ok(SyntheticSequence { config: cfg.clone(), template, colors, blendshapes: blend, frames, noise })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub frames: usize,
    /// `[width, height]`
    pub resolution: [usize; 2],
    pub intrinsics: Intrinsics,
    pub expr_dim: usize,
    pub template: String,
    pub meshes: Vec<String>,
    pub images: Vec<String>,
    pub masks: Vec<String>,
    pub tracking: String,
    #[serde(default)]
    pub clean_tracking: Option<String>,
    #[serde(default)]
    pub noise: Option<String>,
    /// Generator settings, for reference.
    #[serde(default)]
    pub generator: Option<SynthConfig>,
}

/// Formats tracking rows as CSV (`frame, t, e.., q, t`).
pub fn tracking_csv(tracks: &[Tracking]) -> String {
    let dim = tracks.first().map_or(0, |t| t.e.len());
    let mut s = String::from("frame,t");
    for i in 0..dim {
        let _ = write!(s, ",e{i}");
    }
    s.push_str(",qw,qx,qy,qz,tx,ty,tz\n");
    for (f, tr) in tracks.iter().enumerate() {
        let _ = write!(s, "{f},{}", tr.t);
        for v in tr.e.iter().chain(&tr.camera.rotation).chain(&tr.camera.translation) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Parses [`tracking_csv`] output, attaching `intr` to every camera.
pub fn parse_tracking_csv(text: &str, intr: Intrinsics) -> Result<Vec<Tracking>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Data("empty tracking file".into()))?.split(',').collect();
    if header.len() < 9 || header[0] != "frame" || header[1] != "t" {
        return Err(Error::Data(format!("unexpected tracking header {header:?}")));
    }
    let dim = header.len() - 9;
    let mut out = Vec::new();
    for (row, line) in lines.enumerate() {
        let vals: Vec<Real> = line
            .split(',')
            .map(|v| v.trim().parse::<Real>().map_err(|_| Error::Data(format!("tracking row {row}: bad number {v:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != header.len() {
            return Err(Error::Data(format!("tracking row {row} has {} fields, expected {}", vals.len(), header.len())));
        }
        if vals[0] as usize != row {
            return Err(Error::Data(format!("tracking rows out of order at {row}")));
        }
        let e = vals[2..2 + dim].to_vec();
        let q = [vals[2 + dim], vals[3 + dim], vals[4 + dim], vals[5 + dim]];
        let t = [vals[6 + dim], vals[7 + dim], vals[8 + dim]];
        let camera = Camera::new(q, t, intr).map_err(|e| Error::Data(format!("tracking row {row}: {e}")))?;
        out.push(Tracking { t: vals[1], e, camera });
    }
    Ok(out)
}

fn noise_csv(noise: &[FrameNoise]) -> String {
    let dim = noise.first().map_or(0, |n| n.delta_e.len());
    let mut s = String::from("frame");
    for i in 0..dim {
        let _ = write!(s, ",de{i}");
    }
    s.push_str(",wx,wy,wz,angle,tx,ty,tz\n");
    for (f, n) in noise.iter().enumerate() {
        let _ = write!(s, "{f}");
        for v in n.delta_e.iter().chain(&n.omega) {
            let _ = write!(s, ",{v}");
        }
        let _ = write!(s, ",{}", n.angle());
        for v in &n.tau {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Reads `noise.csv` back as per-frame noise records.
pub fn parse_noise_csv(text: &str) -> Result<Vec<FrameNoise>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Data("empty noise file".into()))?;
    let dim = header.split(',').count().checked_sub(8).ok_or_else(|| Error::Data("bad noise header".into()))?;
    lines
        .map(|line| {
            let v: Vec<Real> = line
                .split(',')
                .map(|x| x.trim().parse::<Real>().map_err(|_| Error::Data(format!("bad noise value {x:?}"))))
                .collect::<Result<_>>()?;
            if v.len() != dim + 8 {
                return Err(Error::Data("noise row width mismatch".into()));
            }
            Ok(FrameNoise {
                delta_e: v[1..1 + dim].to_vec(),
                omega: [v[1 + dim], v[2 + dim], v[3 + dim]],
                tau: [v[5 + dim], v[6 + dim], v[7 + dim]],
            })
        })
        .collect()
}

fn frame_name(dir: &str, f: usize, ext: &str) -> String {
    format!("{dir}/frame_{f:04}.{ext}")
}

/// Writes a sequence in the on-disk layout and returns its manifest.
pub fn write_sequence(seq: &SyntheticSequence, out: &Path) -> Result<Manifest> {
    for d in ["meshes", "images", "masks"] {
        std::fs::create_dir_all(out.join(d))?;
    }
    let n = seq.frames.len();
    let meshes: Vec<String> = (0..n).map(|f| frame_name("meshes", f, "obj")).collect();
    let images: Vec<String> = (0..n).map(|f| frame_name("images", f, "png")).collect();
    let masks: Vec<String> = (0..n).map(|f| frame_name("masks", f, "png")).collect();
    std::fs::write(out.join("template.obj"), write_obj_string(&seq.template))?;
    for (f, fr) in seq.frames.iter().enumerate() {
        std::fs::write(out.join(&meshes[f]), write_obj_string(&fr.mesh))?;
        save_png(&fr.gt.image, &out.join(&images[f]))?;
        save_png_gray(&fr.gt.mask, 0.0, 1.0, &out.join(&masks[f]))?;
    }
    let tracked: Vec<Tracking> = seq.frames.iter().map(|f| f.tracked.clone()).collect();
    std::fs::write(out.join("tracking.csv"), tracking_csv(&tracked))?;
    let (clean_tracking, noise) = match &seq.noise {
        Some(nz) => {
            let truth: Vec<Tracking> = seq.frames.iter().map(|f| f.truth.clone()).collect();
            std::fs::write(out.join("tracking_clean.csv"), tracking_csv(&truth))?;
            std::fs::write(out.join("noise.csv"), noise_csv(nz))?;
            (Some("tracking_clean.csv".to_string()), Some("noise.csv".to_string()))
        }
        None => (None, None),
    };
    let intr = seq.config.intrinsics();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        frames: n,
        resolution: [intr.width, intr.height],
        intrinsics: intr,
        expr_dim: seq.blendshapes.len(),
        template: "template.obj".into(),
        meshes,
        images,
        masks,
        tracking: "tracking.csv".into(),
        clean_tracking,
        noise,
        generator: Some(seq.config.clone()),
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Builds and writes a sequence.
pub fn generate_sequence(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    let seq = build_sequence(cfg)?;
    write_sequence(&seq, out)
}
