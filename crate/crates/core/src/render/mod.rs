//! Differentiable tile-based Gaussian rasterizer.
//!
//! Gaussians are projected with the EWA Jacobian, sorted globally by view
//! depth and composited front to back per 16x16 tile. Besides color the
//! renderer emits the alpha-weighted expected depth and the accumulated
//! opacity ("weight"). The reverse pass is analytic and also yields the
//! gradient of the camera pose.

mod camera;
mod io;
mod project;
mod raster;
mod reference;

pub use camera::{Camera, Intrinsics};
pub use io::{load_mask, load_png, read_raw_planes, save_png, save_png_gray, write_raw_planes};
pub use project::{project_gaussian, Projected, CUTOFF, LOW_PASS};
pub use raster::{ALPHA_MAX, ALPHA_MIN, CHANNELS, DEPTH_EPS, T_MIN, TILE};
pub use reference::reference_render;

use raster::{Forward, Prepared, Scene};

use crate::error::{Error, Result};
use crate::gaussians::{CloudVars, GaussianCloud, Mat3};
use crate::tensor::{CustomOp, Real, Tape, Tensor, Var};

/// Rendered maps; `color` is planar `[3, H, W]`, `depth` and `weight` are `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Tensor,
    pub depth: Tensor,
    pub weight: Tensor,
    pub background: [Real; 3],
}

impl RenderOutput {
    fn from_planes(image: Vec<Real>, intr: &Intrinsics, background: [Real; 3]) -> Self {
        let (h, w) = (intr.height, intr.width);
        let npx = h * w;
        Self {
            color: Tensor::new(vec![3, h, w], image[..3 * npx].to_vec()).expect("3 planes"),
            depth: Tensor::new(vec![h, w], image[3 * npx..4 * npx].to_vec()).expect("1 plane"),
            weight: Tensor::new(vec![h, w], image[4 * npx..].to_vec()).expect("1 plane"),
            background,
        }
    }
}

pub const WHITE: [Real; 3] = [1.0, 1.0, 1.0];

fn scene_from<'a>(
    cloud: &'a GaussianCloud,
    w: Mat3,
    t: [Real; 3],
    intr: Intrinsics,
    background: [Real; 3],
) -> Scene<'a> {
    Scene {
        means: cloud.centers.data(),
        quats: cloud.rotations.data(),
        scales: cloud.scales.data(),
        colors: cloud.colors.data(),
        opacities: cloud.opacities.data(),
        w,
        t,
        background,
        intr,
    }
}

/// Forward-only render of a concrete cloud.
pub fn render(cloud: &GaussianCloud, camera: &Camera, background: [Real; 3]) -> Result<RenderOutput> {
    camera.validate()?;
    check_cloud_shapes(cloud)?;
    let scene = scene_from(cloud, camera.view_matrix(), camera.translation, camera.intrinsics, background);
    let prep = raster::prepare(&scene);
    let fwd = raster::forward(&scene, &prep);
    Ok(RenderOutput::from_planes(fwd.image, &camera.intrinsics, background))
}

fn check_cloud_shapes(cloud: &GaussianCloud) -> Result<()> {
    let n = cloud.len();
    for (name, t, w) in [
        ("centers", &cloud.centers, 3),
        ("rotations", &cloud.rotations, 4),
        ("scales", &cloud.scales, 3),
        ("colors", &cloud.colors, 3),
        ("opacities", &cloud.opacities, 1),
    ] {
        if t.shape() != [n, w] {
            return Err(Error::Shape(format!("{name} has shape {:?}, expected [{n}, {w}]", t.shape())));
        }
    }
    Ok(())
}

/// Camera pose on a tape: `rotation` is a `[3, 3]` world-to-view matrix and
/// `translation` a `[3]` vector.
#[derive(Clone, Copy, Debug)]
pub struct PoseVars {
    pub rotation: Var,
    pub translation: Var,
}

impl PoseVars {
    pub fn constant(tape: &mut Tape, camera: &Camera) -> Self {
        let m = camera.view_matrix();
        let rotation = tape.constant(Tensor::new(vec![3, 3], m.iter().flatten().copied().collect()).expect("3x3"));
        let translation = tape.constant(Tensor::from_vec(camera.translation.to_vec()));
        Self { rotation, translation }
    }
}

/// Slices of a `[5, H, W]` render on the tape.
#[derive(Clone, Copy, Debug)]
pub struct RenderVars {
    pub image: Var,
    pub color: Var,
    pub depth: Var,
    pub weight: Var,
}

struct RenderOp {
    intr: Intrinsics,
    prep: Prepared,
    fwd: Forward,
}

impl CustomOp for RenderOp {
    fn name(&self) -> &str {
        "gaussian_render"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let w = mat3_of(inputs[5]);
        let t = vec3_of(inputs[6]);
        let bg = vec3_of(inputs[7]);
        let scene = Scene {
            means: inputs[0].data(),
            quats: inputs[1].data(),
            scales: inputs[2].data(),
            colors: inputs[3].data(),
            opacities: inputs[4].data(),
            w,
            t,
            background: bg,
            intr: self.intr,
        };
        let g = raster::backward(&scene, &self.prep, &self.fwd, grad.data());
        let n = scene.len();
        vec![
            Some(Tensor::new(vec![n, 3], g.means).expect("n x 3")),
            Some(Tensor::new(vec![n, 4], g.quats).expect("n x 4")),
            Some(Tensor::new(vec![n, 3], g.scales).expect("n x 3")),
            Some(Tensor::new(vec![n, 3], g.colors).expect("n x 3")),
            Some(Tensor::new(vec![n, 1], g.opacities).expect("n x 1")),
            Some(Tensor::new(vec![3, 3], g.w.iter().flatten().copied().collect()).expect("3x3")),
            Some(Tensor::from_vec(g.t.to_vec())),
            Some(Tensor::from_vec(g.background.to_vec())),
        ]
    }
}

fn mat3_of(t: &Tensor) -> Mat3 {
    let d = t.data();
    std::array::from_fn(|i| std::array::from_fn(|j| d[3 * i + j]))
}

fn vec3_of(t: &Tensor) -> [Real; 3] {
    let d = t.data();
    [d[0], d[1], d[2]]
}

/// Differentiable render. Quaternions need not be normalized; the renderer
/// normalizes them internally.
pub fn render_on_tape(
    tape: &mut Tape,
    cloud: &CloudVars,
    pose: &PoseVars,
    intr: &Intrinsics,
    background: Var,
) -> Result<RenderVars> {
    intr.validate()?;
    let n = cloud.len(tape);
    let expect: [(Var, Vec<usize>); 8] = [
        (cloud.centers, vec![n, 3]),
        (cloud.rotations, vec![n, 4]),
        (cloud.scales, vec![n, 3]),
        (cloud.colors, vec![n, 3]),
        (cloud.opacities, vec![n, 1]),
        (pose.rotation, vec![3, 3]),
        (pose.translation, vec![3]),
        (background, vec![3]),
    ];
    for (v, shape) in &expect {
        if tape.shape(*v) != shape.as_slice() {
            return Err(Error::Shape(format!("render input has shape {:?}, expected {shape:?}", tape.shape(*v))));
        }
    }
    let w = mat3_of(tape.value(pose.rotation));
    let t = vec3_of(tape.value(pose.translation));
    let bg = vec3_of(tape.value(background));
    let scene = Scene {
        means: tape.value(cloud.centers).data(),
        quats: tape.value(cloud.rotations).data(),
        scales: tape.value(cloud.scales).data(),
        colors: tape.value(cloud.colors).data(),
        opacities: tape.value(cloud.opacities).data(),
        w,
        t,
        background: bg,
        intr: *intr,
    };
    let prep = raster::prepare(&scene);
    let mut fwd = raster::forward(&scene, &prep);
    let out = Tensor::new(vec![CHANNELS, intr.height, intr.width], std::mem::take(&mut fwd.image))?;
    let inputs: Vec<Var> = expect.iter().map(|(v, _)| *v).collect();
    let op = RenderOp { intr: *intr, prep, fwd };
    let image = tape.custom(Box::new(op), &inputs, out);
    let color = tape.slice(image, 0, 0, 3);
    let depth = tape.slice(image, 0, 3, 1);
    let weight = tape.slice(image, 0, 4, 1);
    Ok(RenderVars { image, color, depth, weight })
}
