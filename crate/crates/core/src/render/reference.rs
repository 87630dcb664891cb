//! Brute-force compositor used as a test oracle: every pixel walks the full
//! depth-sorted list with no tiling, binning or footprint culling. It is
//! written independently of the tiled path and shares only the compositing
//! constants.

use super::raster::{ALPHA_MAX, ALPHA_MIN, DEPTH_EPS, T_MIN};
use super::project::{CUTOFF, LOW_PASS};
use super::{Camera, RenderOutput};
use crate::error::Result;
use crate::gaussians::GaussianCloud;
use crate::tensor::{Real, Tensor};

type M3 = [[Real; 3]; 3];

fn matmul(a: &M3, b: &M3) -> M3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

fn transpose(a: &M3) -> M3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

fn rotation(q: &[Real]) -> M3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (r, i, j, k) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [r * r + i * i - j * j - k * k, 2.0 * (i * j - r * k), 2.0 * (i * k + r * j)],
        [2.0 * (i * j + r * k), r * r - i * i + j * j - k * k, 2.0 * (j * k - r * i)],
        [2.0 * (i * k - r * j), 2.0 * (j * k + r * i), r * r - i * i - j * j + k * k],
    ]
}

struct Splat {
    u: Real,
    v: Real,
    inv: [Real; 3],
    depth: Real,
    opacity: Real,
    color: [Real; 3],
}

pub fn reference_render(cloud: &GaussianCloud, camera: &Camera, background: [Real; 3]) -> Result<RenderOutput> {
    camera.validate()?;
    let intr = camera.intrinsics;
    let view = rotation(&camera.rotation);
    let mut splats: Vec<(Real, usize, Splat)> = Vec::new();
    for g in 0..cloud.len() {
        let mu = cloud.centers.row(g);
        let p: Vec<Real> = (0..3)
            .map(|i| view[i][0] * mu[0] + view[i][1] * mu[1] + view[i][2] * mu[2] + camera.translation[i])
            .collect();
        let z = p[2];
        if z < intr.near || z > intr.far {
            continue;
        }
        let s = cloud.scales.row(g);
        let scale2 = [[s[0] * s[0], 0.0, 0.0], [0.0, s[1] * s[1], 0.0], [0.0, 0.0, s[2] * s[2]]];
        let r = rotation(cloud.rotations.row(g));
        let cov3 = matmul(&matmul(&r, &scale2), &transpose(&r));
        let jac = [
            [intr.fx / z, 0.0, -intr.fx * p[0] / (z * z)],
            [0.0, intr.fy / z, -intr.fy * p[1] / (z * z)],
            [0.0, 0.0, 0.0],
        ];
        let t = matmul(&jac, &view);
        let cov2 = matmul(&matmul(&t, &cov3), &transpose(&t));
        let (a, b, c) = (cov2[0][0] + LOW_PASS, cov2[0][1], cov2[1][1] + LOW_PASS);
        let det = a * c - b * b;
        let col = cloud.colors.row(g);
        splats.push((
            z,
            g,
            Splat {
                u: intr.fx * p[0] / z + intr.cx,
                v: intr.fy * p[1] / z + intr.cy,
                inv: [c / det, -b / det, a / det],
                depth: z,
                opacity: cloud.opacities.data()[g],
                color: [col[0], col[1], col[2]],
            },
        ));
    }
    splats.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));

    let (w, h) = (intr.width, intr.height);
    let mut color = Tensor::zeros(vec![3, h, w]);
    let mut depth = Tensor::zeros(vec![h, w]);
    let mut weight = Tensor::zeros(vec![h, w]);
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = (x as Real + 0.5, y as Real + 0.5);
            let mut trans = 1.0;
            let mut acc = [0.0; 3];
            let mut zacc = 0.0;
            for (_, _, s) in &splats {
                let (dx, dy) = (cx - s.u, cy - s.v);
                let maha = s.inv[0] * dx * dx + 2.0 * s.inv[1] * dx * dy + s.inv[2] * dy * dy;
                if !(maha <= CUTOFF) {
                    continue;
                }
                let alpha = (s.opacity * (-0.5 * maha).exp()).min(ALPHA_MAX);
                if alpha < ALPHA_MIN {
                    continue;
                }
                if trans * (1.0 - alpha) < T_MIN {
                    break;
                }
                for ch in 0..3 {
                    acc[ch] += s.color[ch] * alpha * trans;
                }
                zacc += s.depth * alpha * trans;
                trans *= 1.0 - alpha;
            }
            let p = y * w + x;
            for ch in 0..3 {
                color.data_mut()[ch * h * w + p] = acc[ch] + trans * background[ch];
            }
            weight.data_mut()[p] = 1.0 - trans;
            depth.data_mut()[p] = zacc / (1.0 - trans).max(DEPTH_EPS);
        }
    }
    Ok(RenderOutput { color, depth, weight, background })
}
