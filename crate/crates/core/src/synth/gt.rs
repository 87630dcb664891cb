//! Ground-truth mesh renderer: perspective-correct barycentric
//! rasterization with a z-buffer, smooth Lambertian shading and
//! box-filtered supersampling. Shares no compositing code with the splat
//! rasterizer.

use crate::mesh::{vertex_normals, TriMesh, Vec3};
use crate::render::Camera;
use crate::tensor::{Real, Tensor};

pub const AMBIENT: Real = 0.3;
pub const DIFFUSE: Real = 0.7;
pub const SUPERSAMPLE: usize = 2;

/// Unit direction towards the light, world frame.
pub fn default_light() -> Vec3 {
    let l: Vec3 = [0.4, 0.6, 0.7];
    let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
    [l[0] / n, l[1] / n, l[2] / n]
}

#[derive(Clone, Debug)]
pub struct GtRender {
    /// `[3, H, W]`, white where nothing is covered.
    pub image: Tensor,
    /// `[1, H, W]` in `{0, 1}`: any subsample covered.
    pub mask: Tensor,
    /// `[1, H, W]` fraction of covered subsamples.
    pub coverage: Tensor,
}

/// Renders `mesh` with per-vertex albedo `colors` under directional light
/// `light` using `ss × ss` samples per pixel. Triangles with a vertex at or
/// in front of the near plane are skipped.
pub fn render_mesh(mesh: &TriMesh, colors: &[[Real; 3]], camera: &Camera, light: Vec3, ss: usize) -> GtRender {
    let intr = camera.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let (sw, sh) = (w * ss, h * ss);
    let normals = vertex_normals(mesh);
    let view: Vec<Vec3> = mesh.vertices.iter().map(|&p| camera.world_to_view(p)).collect();
    let screen: Vec<[Real; 2]> = view
        .iter()
        .map(|p| [(intr.fx * p[0] / p[2] + intr.cx) * ss as Real, (intr.fy * p[1] / p[2] + intr.cy) * ss as Real])
        .collect();

    let mut zbuf = vec![Real::INFINITY; sw * sh];
    let mut rgb = vec![[1.0 as Real; 3]; sw * sh];
    for f in &mesh.faces {
        if f.iter().any(|&i| view[i][2] <= intr.near) {
            continue;
        }
        let [a, b, c] = [screen[f[0]], screen[f[1]], screen[f[2]]];
        let area = edge(a, b, c);
        if area.abs() < 1e-12 {
            continue;
        }
        let xmin = a[0].min(b[0]).min(c[0]).floor().max(0.0) as usize;
        let ymin = a[1].min(b[1]).min(c[1]).floor().max(0.0) as usize;
        let xmax = (a[0].max(b[0]).max(c[0]).ceil().max(0.0) as usize).min(sw);
        let ymax = (a[1].max(b[1]).max(c[1]).ceil().max(0.0) as usize).min(sh);
        let inv_z = [1.0 / view[f[0]][2], 1.0 / view[f[1]][2], 1.0 / view[f[2]][2]];
        for y in ymin..ymax {
            for x in xmin..xmax {
                let p = [x as Real + 0.5, y as Real + 0.5];
                let l0 = edge(b, c, p) / area;
                let l1 = edge(c, a, p) / area;
                let l2 = edge(a, b, p) / area;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                // perspective-correct weights
                let wz = [l0 * inv_z[0], l1 * inv_z[1], l2 * inv_z[2]];
                let s = wz[0] + wz[1] + wz[2];
                let z = 1.0 / s;
                let k = y * sw + x;
                if z >= zbuf[k] {
                    continue;
                }
                zbuf[k] = z;
                let bary = [wz[0] / s, wz[1] / s, wz[2] / s];
                let mut n = [0.0; 3];
                let mut alb = [0.0; 3];
                for (j, &vi) in f.iter().enumerate() {
                    for d in 0..3 {
                        n[d] += bary[j] * normals[vi][d];
                        alb[d] += bary[j] * colors[vi][d];
                    }
                }
                let nn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max(1e-12);
                let cos = ((n[0] * light[0] + n[1] * light[1] + n[2] * light[2]) / nn).max(0.0);
                let shade = AMBIENT + DIFFUSE * cos;
                rgb[k] = [alb[0] * shade, alb[1] * shade, alb[2] * shade];
            }
        }
    }

    let mut image = vec![0.0; 3 * h * w];
    let mut coverage = vec![0.0; h * w];
    let norm = 1.0 / (ss * ss) as Real;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for dy in 0..ss {
                for dx in 0..ss {
                    let k = (y * ss + dy) * sw + x * ss + dx;
                    for c in 0..3 {
                        image[c * h * w + p] += rgb[k][c] * norm;
                    }
                    if zbuf[k].is_finite() {
                        coverage[p] += norm;
                    }
                }
            }
        }
    }
    let mask = coverage.iter().map(|&c| if c > 0.0 { 1.0 } else { 0.0 }).collect();
    GtRender {
        image: Tensor::new(vec![3, h, w], image).expect("sized"),
        mask: Tensor::new(vec![1, h, w], mask).expect("sized"),
        coverage: Tensor::new(vec![1, h, w], coverage).expect("sized"),
    }
}

/// [`render_mesh`] with the default light and supersampling.
pub fn render_ground_truth(mesh: &TriMesh, colors: &[[Real; 3]], camera: &Camera) -> GtRender {
    render_mesh(mesh, colors, camera, default_light(), SUPERSAMPLE)
}

fn edge(a: [Real; 2], b: [Real; 2], p: [Real; 2]) -> Real {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}
