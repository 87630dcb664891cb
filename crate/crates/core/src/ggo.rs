//! Graph-guided optimization: a small cross-attention block that reads the
//! graph bottleneck codes and a learned time embedding and predicts
//! corrections to the tracked expression code and camera pose.
//!
//! The temporal feature is split into tokens of the bottleneck width, and the
//! two bottleneck codes act as queries, so attention is a `[2, T]` softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::Mat3;
use crate::nn::{Linear, Mlp};
use crate::render::PoseVars;
use crate::tensor::{CustomOp, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::util::Rng;

/// Below this rotation angle `so3_exp` switches to its Taylor expansion.
pub const SO3_TAYLOR_EPS: Real = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GgoConfig {
    pub temporal_dim: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    /// `‖δe‖∞` bound.
    pub e_bound: Real,
    /// Per-axis translation bound, in scene units.
    pub translation_bound: Real,
    /// Predict only a rotation correction (τ fixed to 0).
    pub rotation_only: bool,
}

impl Default for GgoConfig {
    fn default() -> Self {
        Self {
            temporal_dim: 32,
            hidden: 64,
            attn_dim: 32,
            e_bound: 0.5,
            translation_bound: 0.1,
            rotation_only: false,
        }
    }
}

/// Predicted corrections of one frame.
#[derive(Clone, Copy, Debug)]
pub struct TrackingOffsets {
    /// `[1, |e|]`
    pub delta_e: Var,
    /// `[3]` axis-angle, `‖ω‖ < π`.
    pub omega: Var,
    /// `[3]`
    pub tau: Var,
    /// `[2, T]` attention weights, kept for inspection.
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct Ggo {
    pub config: GgoConfig,
    pub expr_dim: usize,
    /// Width of each query token (the bottleneck width).
    pub token: usize,
    temporal: Mlp,
    query: Linear,
    key: Linear,
    value: Linear,
    head: Linear,
}

impl Ggo {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: GgoConfig,
        bottleneck: usize,
        expr_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if bottleneck == 0 || config.temporal_dim % bottleneck != 0 {
            return Err(Error::Config(format!(
                "temporal_dim {} must be a positive multiple of the bottleneck width {bottleneck}",
                config.temporal_dim
            )));
        }
        if !(config.e_bound >= 0.0 && config.translation_bound >= 0.0) {
            return Err(Error::Config("offset bounds must be non-negative".into()));
        }
        let (d, h) = (config.attn_dim, config.hidden);
        let temporal = Mlp::new(store, &format!("{name}.temporal"), [3, h, config.temporal_dim], false, rng);
        let query = Linear::new(store, &format!("{name}.query"), bottleneck, d, rng);
        let key = Linear::new(store, &format!("{name}.key"), bottleneck, d, rng);
        let value = Linear::new(store, &format!("{name}.value"), bottleneck, d, rng);
        let head = Linear::zeros(store, &format!("{name}.head"), 2 * d, expr_dim + 6);
        Ok(Self { config, expr_dim, token: bottleneck, temporal, query, key, value, head })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.temporal.hidden, &self.temporal.out, &self.query, &self.key, &self.value, &self.head]
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// `f_t: [1, temporal_dim]` from normalized time; `t` outside `[0, 1]`
    /// is clamped with a warning.
    pub fn temporal_features(&self, tape: &mut Tape, store: &ParamStore, t: Real) -> Var {
        let x = tape.constant(time_input(t));
        self.temporal.forward(tape, store, x)
    }

    /// Cross-attention from `f_g: [1, 2·token]` to `f_t`, then the bounded
    /// offset head.
    pub fn predict_offsets(&self, tape: &mut Tape, store: &ParamStore, f_g: Var, f_t: Var) -> Result<TrackingOffsets> {
        let (b, td) = (self.token, self.config.temporal_dim);
        if tape.shape(f_g) != [1, 2 * b] || tape.shape(f_t) != [1, td] {
            return Err(Error::Shape(format!(
                "attention expects f_g [1, {}] and f_t [1, {td}], got {:?} and {:?}",
                2 * b,
                tape.shape(f_g),
                tape.shape(f_t)
            )));
        }
        let d = self.config.attn_dim;
        let qt = tape.reshape(f_g, vec![2, b]);
        let kt = tape.reshape(f_t, vec![td / b, b]);
        let q = self.query.forward(tape, store, qt);
        let k = self.key.forward(tape, store, kt);
        let v = self.value.forward(tape, store, kt);
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt);
        let logits = tape.scale(logits, 1.0 / (d as Real).sqrt());
        let attention = tape.softmax(logits);
        let ctx = tape.matmul(attention, v);
        let ctx = tape.reshape(ctx, vec![1, 2 * d]);
        let raw = self.head.forward(tape, store, ctx);
        let raw = tape.tanh(raw);

        let ne = self.expr_dim;
        let de = tape.slice(raw, 1, 0, ne);
        let delta_e = tape.scale(de, self.config.e_bound);
        let w = tape.slice(raw, 1, ne, 3);
        let w = tape.reshape(w, vec![3]);
        // Each component below π/√3 keeps the angle below π.
        let omega = tape.scale(w, std::f64::consts::PI as Real / (3.0 as Real).sqrt());
        let tau = tape.slice(raw, 1, ne + 3, 3);
        let tau = tape.reshape(tau, vec![3]);
        let bound = if self.config.rotation_only { 0.0 } else { self.config.translation_bound };
        let tau = tape.scale(tau, bound);
        Ok(TrackingOffsets { delta_e, omega, tau, attention })
    }
}

fn time_input(t: Real) -> Tensor {
    let t = if (0.0..=1.0).contains(&t) {
        t
    } else {
        log::warn!("normalized time {t} outside [0, 1]; clamping");
        if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) }
    };
    let a = 2.0 * std::f64::consts::PI as Real * t;
    Tensor::new(vec![1, 3], vec![t, a.sin(), a.cos()]).expect("3 values")
}

/// `e' = e + δe`, `R' = exp(ω) R`, `t' = t + τ`.
pub fn apply_offsets(tape: &mut Tape, pose: &PoseVars, e: Var, off: &TrackingOffsets) -> Result<(PoseVars, Var)> {
    if tape.shape(e) != tape.shape(off.delta_e) {
        return Err(Error::Shape(format!(
            "expression {:?} vs offset {:?}",
            tape.shape(e),
            tape.shape(off.delta_e)
        )));
    }
    let r = so3_exp(tape, off.omega);
    let rotation = tape.matmul(r, pose.rotation);
    let translation = tape.add(pose.translation, off.tau);
    let e2 = tape.add(e, off.delta_e);
    Ok((PoseVars { rotation, translation }, e2))
}

fn hat(w: &[Real; 3]) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

/// Rodrigues' formula; second-order Taylor below [`SO3_TAYLOR_EPS`].
pub fn so3_exp_matrix(w: &[Real; 3]) -> Mat3 {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b) = if theta < SO3_TAYLOR_EPS {
        (1.0, 0.5)
    } else {
        let h = (0.5 * theta).sin();
        // (1 - cos θ)/θ² written without cancellation
        (theta.sin() / theta, 2.0 * h * h / (theta * theta))
    };
    let k = hat(w);
    let k2 = mat_mul(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// `∂R/∂ω_i` for each axis.
fn so3_jacobian(w: &[Real; 3], r: &Mat3) -> [Mat3; 3] {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let mut out = [[[0.0; 3]; 3]; 3];
    if theta2.sqrt() < SO3_TAYLOR_EPS {
        let k = hat(w);
        for (i, d) in out.iter_mut().enumerate() {
            let mut e = [0.0; 3];
            e[i] = 1.0;
            let ei = hat(&e);
            let p = mat_mul(&ei, &k);
            let q = mat_mul(&k, &ei);
            for a in 0..3 {
                for b in 0..3 {
                    d[a][b] = ei[a][b] + 0.5 * (p[a][b] + q[a][b]);
                }
            }
        }
        return out;
    }
    // ∂R/∂ω_i = (ω_i [ω]× + [ω × (I − R) e_i]×) R / θ²
    let k = hat(w);
    for (i, d) in out.iter_mut().enumerate() {
        let c = [-r[0][i], -r[1][i], -r[2][i]];
        let c = [c[0] + if i == 0 { 1.0 } else { 0.0 }, c[1] + if i == 1 { 1.0 } else { 0.0 }, c[2] + if i == 2 { 1.0 } else { 0.0 }];
        let x = [w[1] * c[2] - w[2] * c[1], w[2] * c[0] - w[0] * c[2], w[0] * c[1] - w[1] * c[0]];
        let hx = hat(&x);
        let mut m = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] = (w[i] * k[a][b] + hx[a][b]) / theta2;
            }
        }
        *d = mat_mul(&m, r);
    }
    out
}

struct So3Exp;

impl CustomOp for So3Exp {
    fn name(&self) -> &str {
        "so3_exp"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let d = inputs[0].data();
        let w = [d[0], d[1], d[2]];
        let o = output.data();
        let r = [[o[0], o[1], o[2]], [o[3], o[4], o[5]], [o[6], o[7], o[8]]];
        let jac = so3_jacobian(&w, &r);
        let g = grad.data();
        let gw = jac
            .iter()
            .map(|j| (0..9).map(|k| g[k] * j[k / 3][k % 3]).sum())
            .collect();
        vec![Some(Tensor::from_vec(gw))]
    }
}

/// Differentiable `[3] -> [3, 3]` exponential map.
pub fn so3_exp(tape: &mut Tape, omega: Var) -> Var {
    let d = tape.value(omega).data();
    assert_eq!(d.len(), 3, "so3_exp expects a 3-vector");
    let r = so3_exp_matrix(&[d[0], d[1], d[2]]);
    let out = Tensor::new(vec![3, 3], r.iter().flatten().copied().collect()).expect("3x3");
    tape.custom(Box::new(So3Exp), &[omega], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_is_identity() {
        let r = so3_exp_matrix(&[0.0; 3]);
        assert_eq!(r, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = so3_exp_matrix(&[0.0, 0.0, std::f64::consts::FRAC_PI_2 as Real]);
        // R e_x = first column
        assert!((r[0][0]).abs() < 1e-12 && (r[1][0] - 1.0).abs() < 1e-12 && r[2][0].abs() < 1e-12);
    }

    #[test]
    fn time_input_channels() {
        let a = time_input(0.0);
        let b = time_input(1.0);
        assert_ne!(a.data()[0], b.data()[0]);
        assert!((a.data()[2] - b.data()[2]).abs() < 1e-12);
        assert_eq!(time_input(1.7).data(), b.data());
    }
}
