//! Perspective projection of 3D Gaussians to screen-space ellipses and the
//! matching reverse pass.

use super::Intrinsics;
use crate::gaussians::Mat3;
use crate::tensor::Real;

/// Isotropic variance (pixels squared) added to every projected covariance.
pub const LOW_PASS: Real = 0.3;
/// Squared Mahalanobis radius beyond which a Gaussian contributes nothing.
pub const CUTOFF: Real = 9.0;

/// A Gaussian flattened to the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    /// Pixel coordinates of the projected mean.
    pub mean: [Real; 2],
    /// `(a, b, c)` of the 2D covariance `[[a, b], [b, c]]`, low-pass included.
    pub cov: [Real; 3],
    /// `(a, b, c)` of its inverse.
    pub conic: [Real; 3],
    /// View-space depth.
    pub depth: Real,
    /// Three standard deviations along the major axis, in pixels.
    pub radius: Real,
    /// Inclusive pixel bounds `[x0, y0, x1, y1]` of the footprint.
    pub rect: [usize; 4],
}

/// Intermediate quantities shared by the forward and reverse passes.
struct Geometry {
    qn: [Real; 4],
    qnorm: Real,
    rq: Mat3,
    m: Mat3,
    sigma: Mat3,
    p: [Real; 3],
    jac: [[Real; 3]; 2],
    t: [[Real; 3]; 2],
}

fn geometry(mean: &[Real; 3], quat: &[Real; 4], scale: &[Real; 3], w: &Mat3, tr: &[Real; 3], intr: &Intrinsics) -> Option<Geometry> {
    let qnorm = quat.iter().map(|v| v * v).sum::<Real>().sqrt();
    if !(qnorm > 0.0) || !qnorm.is_finite() {
        return None;
    }
    let qn = quat.map(|v| v / qnorm);
    let rq = crate::gaussians::quat_to_matrix(&qn);
    let m: Mat3 = std::array::from_fn(|i| std::array::from_fn(|k| rq[i][k] * scale[k]));
    let sigma: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| m[i][k] * m[j][k]).sum()));
    let p: [Real; 3] = std::array::from_fn(|i| (0..3).map(|k| w[i][k] * mean[k]).sum::<Real>() + tr[i]);
    let z = p[2];
    let jac = [
        [intr.fx / z, 0.0, -intr.fx * p[0] / (z * z)],
        [0.0, intr.fy / z, -intr.fy * p[1] / (z * z)],
    ];
    let t: [[Real; 3]; 2] = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| jac[i][k] * w[k][j]).sum()));
    Some(Geometry { qn, qnorm, rq, m, sigma, p, jac, t })
}

/// Projects one Gaussian; `None` when it is behind the near plane, beyond the
/// far plane, degenerate, or its footprint misses the image.
pub fn project_gaussian(
    mean: &[Real; 3],
    quat: &[Real; 4],
    scale: &[Real; 3],
    w: &Mat3,
    tr: &[Real; 3],
    intr: &Intrinsics,
) -> Option<Projected> {
    let g = geometry(mean, quat, scale, w, tr, intr)?;
    let z = g.p[2];
    if !(z >= intr.near && z <= intr.far) {
        return None;
    }
    let ts = |i: usize, j: usize| -> Real {
        (0..3).map(|k| (0..3).map(|l| g.t[i][k] * g.sigma[k][l] * g.t[j][l]).sum::<Real>()).sum()
    };
    let a = ts(0, 0) + LOW_PASS;
    let b = ts(0, 1);
    let c = ts(1, 1) + LOW_PASS;
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let u = intr.fx * g.p[0] / z + intr.cx;
    let v = intr.fy * g.p[1] / z + intr.cy;
    let half = 0.5 * (a - c);
    let lambda = 0.5 * (a + c) + (half * half + b * b).sqrt();
    // slight inflation keeps pixels exactly on the cutoff ellipse inside the box
    let radius = CUTOFF.sqrt() * lambda.sqrt() * (1.0 + 1e-9) + 1e-9;
    let lo_x = (u - radius - 0.5).ceil().max(0.0);
    let hi_x = (u + radius - 0.5).floor().min(intr.width as Real - 1.0);
    let lo_y = (v - radius - 0.5).ceil().max(0.0);
    let hi_y = (v + radius - 0.5).floor().min(intr.height as Real - 1.0);
    if !(lo_x <= hi_x && lo_y <= hi_y) {
        return None;
    }
    Some(Projected {
        mean: [u, v],
        cov: [a, b, c],
        conic,
        depth: z,
        radius,
        rect: [lo_x as usize, lo_y as usize, hi_x as usize, hi_y as usize],
    })
}

/// Gradients of one Gaussian's inputs.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct ProjectionGrads {
    pub mean: [Real; 3],
    pub quat: [Real; 4],
    pub scale: [Real; 3],
    pub w: Mat3,
    pub t: [Real; 3],
}

/// Reverse pass of [`project_gaussian`] given gradients on the screen mean,
/// the conic `(a, b, c)` and the depth.
#[allow(clippy::too_many_arguments)]
pub(crate) fn project_backward(
    mean: &[Real; 3],
    quat: &[Real; 4],
    scale: &[Real; 3],
    w: &Mat3,
    tr: &[Real; 3],
    intr: &Intrinsics,
    proj: &Projected,
    g_mean2: [Real; 2],
    g_conic: [Real; 3],
    g_depth: Real,
) -> ProjectionGrads {
    let g = geometry(mean, quat, scale, w, tr, intr).expect("projected Gaussians have valid geometry");
    let [x, y, z] = g.p;
    let (fx, fy) = (intr.fx, intr.fy);
    let q = [[proj.conic[0], proj.conic[1]], [proj.conic[1], proj.conic[2]]];
    // conic entry b appears twice in the quadratic form
    let gq = [[g_conic[0], 0.5 * g_conic[1]], [0.5 * g_conic[1], g_conic[2]]];
    // d(Q) = -Q d(Sigma2) Q
    let qg = mul2(&q, &gq);
    let qgq = mul2(&qg, &q);
    let gs2 = qgq.map(|r| r.map(|v| -v));
    // Sigma2 = T Sigma T^T
    let mut gsig = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            gsig[i][j] = (0..2).map(|a| (0..2).map(|b| g.t[a][i] * gs2[a][b] * g.t[b][j]).sum::<Real>()).sum();
        }
    }
    let mut gt = [[0.0; 3]; 2];
    for a in 0..2 {
        for j in 0..3 {
            gt[a][j] = 2.0
                * (0..2)
                    .map(|b| gs2[a][b] * (0..3).map(|k| g.t[b][k] * g.sigma[k][j]).sum::<Real>())
                    .sum::<Real>();
        }
    }
    // T = J W
    let mut gj = [[0.0; 3]; 2];
    for a in 0..2 {
        for k in 0..3 {
            gj[a][k] = (0..3).map(|j| gt[a][j] * w[k][j]).sum();
        }
    }
    let mut gw = [[0.0; 3]; 3];
    for k in 0..3 {
        for j in 0..3 {
            gw[k][j] = (0..2).map(|a| g.jac[a][k] * gt[a][j]).sum();
        }
    }
    let z2 = z * z;
    let z3 = z2 * z;
    let mut gp = [0.0; 3];
    gp[0] += gj[0][2] * (-fx / z2) + g_mean2[0] * fx / z;
    gp[1] += gj[1][2] * (-fy / z2) + g_mean2[1] * fy / z;
    gp[2] += gj[0][0] * (-fx / z2)
        + gj[0][2] * (2.0 * fx * x / z3)
        + gj[1][1] * (-fy / z2)
        + gj[1][2] * (2.0 * fy * y / z3)
        - g_mean2[0] * fx * x / z2
        - g_mean2[1] * fy * y / z2
        + g_depth;
    // p = W mean + t
    let gmean: [Real; 3] = std::array::from_fn(|k| (0..3).map(|i| w[i][k] * gp[i]).sum());
    for i in 0..3 {
        for k in 0..3 {
            gw[i][k] += gp[i] * mean[k];
        }
    }
    // Sigma = M M^T, M = R diag(s)
    let mut gm = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            gm[i][k] = 2.0 * (0..3).map(|j| gsig[i][j] * g.m[j][k]).sum::<Real>();
        }
    }
    let gscale: [Real; 3] = std::array::from_fn(|k| (0..3).map(|i| gm[i][k] * g.rq[i][k]).sum());
    let gr: Mat3 = std::array::from_fn(|i| std::array::from_fn(|k| gm[i][k] * scale[k]));
    let [qw, qx, qy, qz] = g.qn;
    let gqn = [
        2.0 * (-qz * gr[0][1] + qy * gr[0][2] + qz * gr[1][0] - qx * gr[1][2] - qy * gr[2][0] + qx * gr[2][1]),
        2.0 * (qy * gr[0][1] + qz * gr[0][2] + qy * gr[1][0] - 2.0 * qx * gr[1][1] - qw * gr[1][2]
            + qz * gr[2][0]
            + qw * gr[2][1]
            - 2.0 * qx * gr[2][2]),
        2.0 * (-2.0 * qy * gr[0][0] + qx * gr[0][1] + qw * gr[0][2] + qx * gr[1][0] + qz * gr[1][2]
            - qw * gr[2][0]
            + qz * gr[2][1]
            - 2.0 * qy * gr[2][2]),
        2.0 * (-2.0 * qz * gr[0][0] - qw * gr[0][1] + qx * gr[0][2] + qw * gr[1][0] - 2.0 * qz * gr[1][1]
            + qy * gr[1][2]
            + qx * gr[2][0]
            + qy * gr[2][1]),
    ];
    let dotq: Real = (0..4).map(|i| g.qn[i] * gqn[i]).sum();
    let gquat: [Real; 4] = std::array::from_fn(|i| (gqn[i] - g.qn[i] * dotq) / g.qnorm);
    ProjectionGrads { mean: gmean, quat: gquat, scale: gscale, w: gw, t: gp }
}

fn mul2(a: &[[Real; 2]; 2], b: &[[Real; 2]; 2]) -> [[Real; 2]; 2] {
    std::array::from_fn(|i| std::array::from_fn(|j| a[i][0] * b[0][j] + a[i][1] * b[1][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    const ID: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    fn intr() -> Intrinsics {
        Intrinsics { fx: 100.0, fy: 100.0, cx: 32.0, cy: 24.0, width: 64, height: 48, near: 0.1, far: 100.0 }
    }

    #[test]
    fn on_axis_point_lands_on_principal_point() {
        let p = project_gaussian(&[0.0, 0.0, 5.0], &[1.0, 0.0, 0.0, 0.0], &[0.1; 3], &ID, &[0.0; 3], &intr()).unwrap();
        assert_eq!(p.mean, [32.0, 24.0]);
        assert_eq!(p.depth, 5.0);
    }

    #[test]
    fn isotropic_footprint_matches_axis_formula() {
        let (f, s, z) = (100.0, 0.1, 5.0);
        let p = project_gaussian(&[0.0, 0.0, z], &[1.0, 0.0, 0.0, 0.0], &[s; 3], &ID, &[0.0; 3], &intr()).unwrap();
        let want = (f * s / z) * (f * s / z) + LOW_PASS;
        assert!((p.cov[0] - want).abs() < 0.01 * want);
        assert!((p.cov[2] - want).abs() < 0.01 * want);
        assert!(p.cov[1].abs() < 1e-12);
    }

    #[test]
    fn behind_camera_and_off_screen_are_culled() {
        let q = [1.0, 0.0, 0.0, 0.0];
        assert!(project_gaussian(&[0.0, 0.0, -1.0], &q, &[0.1; 3], &ID, &[0.0; 3], &intr()).is_none());
        assert!(project_gaussian(&[0.0, 0.0, 200.0], &q, &[0.1; 3], &ID, &[0.0; 3], &intr()).is_none());
        assert!(project_gaussian(&[50.0, 0.0, 5.0], &q, &[0.01; 3], &ID, &[0.0; 3], &intr()).is_none());
    }
}
