//! Gaussian containers, covariance assembly and neural Gaussian spawning.

mod raw;
mod spawn;

pub use raw::{read_raw_cloud, raw_cloud_bytes, write_raw_cloud, RAW_MAGIC, RAW_VERSION};
pub use spawn::{SpawnConfig, SpawnHeads};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub type Mat3 = [[Real; 3]; 3];

/// Concrete Gaussian attributes, one row per Gaussian. Quaternions are
/// `(w, x, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    /// `[N, 3]`
    pub centers: Tensor,
    /// `[N, 4]`
    pub rotations: Tensor,
    /// `[N, 3]`
    pub scales: Tensor,
    /// `[N, 3]`
    pub colors: Tensor,
    /// `[N, 1]`
    pub opacities: Tensor,
    /// `[N, F]` for anchors.
    pub features: Option<Tensor>,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks shapes and the attribute ranges every cloud must satisfy.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for (name, t, w) in [
            ("centers", &self.centers, 3),
            ("rotations", &self.rotations, 4),
            ("scales", &self.scales, 3),
            ("colors", &self.colors, 3),
            ("opacities", &self.opacities, 1),
        ] {
            if t.shape() != [n, w] {
                return Err(Error::Shape(format!("{name} has shape {:?}, expected [{n}, {w}]", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!("non-finite {name}")));
            }
        }
        for i in 0..n {
            let q = self.rotations.row(i);
            let norm = q.iter().map(|v| v * v).sum::<Real>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("quaternion {i} has norm {norm}")));
            }
        }
        if self.scales.data().iter().any(|&s| s <= 0.0) {
            return Err(Error::Contract("non-positive scale".into()));
        }
        if self.opacities.data().iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::Contract("opacity outside (0, 1)".into()));
        }
        Ok(())
    }

    /// Reads a cloud's current values off the tape.
    pub fn from_tape(tape: &Tape, v: &CloudVars) -> Self {
        Self {
            centers: tape.value(v.centers).clone(),
            rotations: tape.value(v.rotations).clone(),
            scales: tape.value(v.scales).clone(),
            colors: tape.value(v.colors).clone(),
            opacities: tape.value(v.opacities).clone(),
            features: None,
        }
    }

    /// Places the attributes on the tape as constants.
    pub fn to_tape(&self, tape: &mut Tape) -> CloudVars {
        CloudVars {
            centers: tape.constant(self.centers.clone()),
            rotations: tape.constant(self.rotations.clone()),
            scales: tape.constant(self.scales.clone()),
            colors: tape.constant(self.colors.clone()),
            opacities: tape.constant(self.opacities.clone()),
        }
    }

    pub fn covariance(&self, i: usize) -> Mat3 {
        let q = self.rotations.row(i);
        let s = self.scales.row(i);
        assemble_covariance(&[q[0], q[1], q[2], q[3]], &[s[0], s[1], s[2]])
    }
}

/// Gaussian attributes living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CloudVars {
    pub centers: Var,
    pub rotations: Var,
    pub scales: Var,
    pub colors: Var,
    pub opacities: Var,
}

impl CloudVars {
    pub fn len(&self, tape: &Tape) -> usize {
        tape.shape(self.centers)[0]
    }
}

/// Anchors first, then neural Gaussians; `None` stands for an empty set.
pub fn gather(tape: &mut Tape, anchors: &CloudVars, neural: Option<&CloudVars>) -> Result<CloudVars> {
    let Some(n) = neural else {
        return Ok(*anchors);
    };
    let pairs = [
        (anchors.centers, n.centers),
        (anchors.rotations, n.rotations),
        (anchors.scales, n.scales),
        (anchors.colors, n.colors),
        (anchors.opacities, n.opacities),
    ];
    for (a, b) in pairs {
        if tape.shape(a)[1..] != tape.shape(b)[1..] {
            return Err(Error::Shape(format!(
                "attribute layouts differ: {:?} vs {:?}",
                tape.shape(a),
                tape.shape(b)
            )));
        }
    }
    let [c, r, s, col, o] = pairs.map(|(a, b)| tape.concat(&[a, b], 0));
    Ok(CloudVars { centers: c, rotations: r, scales: s, colors: col, opacities: o })
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[Real; 4]) -> Mat3 {
    let [w, x, y, z] = *q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Unit quaternion `(w, x, y, z)` of a rotation matrix, with `w >= 0`.
pub fn matrix_to_quat(m: &Mat3) -> [Real; 4] {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
    };
    let n = q.iter().map(|v| v * v).sum::<Real>().sqrt();
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    q.map(|v| sign * v / n)
}

/// `R diag(S)^2 R^T`.
pub fn assemble_covariance(q: &[Real; 4], s: &[Real; 3]) -> Mat3 {
    let r = quat_to_matrix(q);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| r[i][k] * s[k] * s[k] * r[j][k]).sum();
        }
    }
    out
}

/// Hamilton product `a * b`.
pub fn quat_mul(a: &[Real; 4], b: &[Real; 4]) -> [Real; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}
