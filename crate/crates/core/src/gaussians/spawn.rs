use serde::{Deserialize, Serialize};

use super::CloudVars;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::unet::{quaternion_activation, MIN_SCALE};
use crate::util::{normal_tensor, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpawnConfig {
    /// Neural Gaussians per anchor; 0 disables spawning.
    pub k: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub feature_std: Real,
    /// Initial spread of the offset bank, in units of the anchor scale.
    pub offset_std: Real,
    /// Subtracted inside the opacity sigmoid so new Gaussians start faint.
    pub opacity_shift: Real,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        Self { k: 5, feature_dim: 32, hidden: 64, feature_std: 0.01, offset_std: 0.5, opacity_shift: 2.0 }
    }
}

/// Per-anchor features and offsets plus the four attribute perceptrons.
#[derive(Clone, Debug)]
pub struct SpawnHeads {
    pub config: SpawnConfig,
    pub num_anchors: usize,
    pub expr_dim: usize,
    /// `[N, feature_dim]`
    pub features: ParamId,
    /// `[N, 3k]`
    pub offsets: ParamId,
    opacity: Mlp,
    color: Mlp,
    rotation: Mlp,
    scale: Mlp,
}

impl SpawnHeads {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: SpawnConfig,
        num_anchors: usize,
        expr_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let k = config.k;
        let features = store.add(
            format!("{name}.features"),
            normal_tensor(rng, vec![num_anchors, config.feature_dim], config.feature_std),
        );
        let offsets = store.add(
            format!("{name}.offsets"),
            normal_tensor(rng, vec![num_anchors, 3 * k], config.offset_std),
        );
        let fin = config.feature_dim + 3 + expr_dim;
        let h = config.hidden;
        let opacity = Mlp::new(store, &format!("{name}.opacity"), [fin, h, k], true, rng);
        let color = Mlp::new(store, &format!("{name}.color"), [fin, h, 3 * k], true, rng);
        let rotation = Mlp::new(store, &format!("{name}.rotation"), [fin, h, 4 * k], true, rng);
        let scale = Mlp::new(store, &format!("{name}.scale"), [fin, h, 3 * k], true, rng);
        Self { config, num_anchors, expr_dim, features, offsets, opacity, color, rotation, scale }
    }

    /// Spawns `k` neural Gaussians per anchor seen from `camera_center`.
    /// Returns `None` when `k = 0`.
    pub fn spawn(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        anchors: &CloudVars,
        camera_center: [Real; 3],
        e: Var,
        scale_max: Real,
    ) -> Result<Option<CloudVars>> {
        let n = anchors.len(tape);
        if n != self.num_anchors {
            return Err(Error::Shape(format!(
                "anchor features exist for {} anchors, got {n}",
                self.num_anchors
            )));
        }
        if tape.shape(e) != [1, self.expr_dim] {
            return Err(Error::Shape(format!("expression shape {:?}", tape.shape(e))));
        }
        let k = self.config.k;
        if k == 0 {
            return Ok(None);
        }
        let cam = tape.constant(Tensor::new(vec![1, 3], camera_center.to_vec())?);
        let cam = tape.broadcast(cam, vec![n, 3]);
        let rel = tape.sub(anchors.centers, cam);
        let dir = tape.normalize_rows(rel);
        let eb = tape.broadcast(e, vec![n, self.expr_dim]);
        let f = tape.param(store, self.features);
        let input = tape.concat(&[f, dir, eb], 1);

        let per = |tape: &mut Tape, v: Var, w: usize| tape.reshape(v, vec![n * k, w]);
        let mu = repeat_rows(tape, anchors.centers, k);
        let s_anchor = repeat_rows(tape, anchors.scales, k);

        let off = tape.param(store, self.offsets);
        let off = per(tape, off, 3);
        let off = tape.mul(off, s_anchor);
        let centers = tape.add(mu, off);

        let o = self.opacity.forward(tape, store, input);
        let o = per(tape, o, 1);
        let o = tape.add_scalar(o, -self.config.opacity_shift);
        let opacities = tape.sigmoid(o);

        let c = self.color.forward(tape, store, input);
        let c = per(tape, c, 3);
        let colors = tape.sigmoid(c);

        let q = self.rotation.forward(tape, store, input);
        let q = per(tape, q, 4);
        let rotations = quaternion_activation(tape, q);

        let s = self.scale.forward(tape, store, input);
        let s = per(tape, s, 3);
        let s = tape.exp(s);
        let s = tape.mul(s, s_anchor);
        let scales = tape.clamp(s, MIN_SCALE, scale_max);

        let out = CloudVars { centers, rotations, scales, colors, opacities };
        for v in [centers, rotations, scales, colors, opacities] {
            if !tape.value(v).is_finite() {
                return Err(Error::Numeric("non-finite neural Gaussian attribute".into()));
            }
        }
        Ok(Some(out))
    }
}

/// `[N, w] -> [N k, w]`, each row repeated `k` times consecutively.
fn repeat_rows(tape: &mut Tape, x: Var, k: usize) -> Var {
    let (n, w) = (tape.shape(x)[0], tape.shape(x)[1]);
    let x3 = tape.reshape(x, vec![n, 1, w]);
    let b = tape.broadcast(x3, vec![n, k, w]);
    tape.reshape(b, vec![n * k, w])
}
