//! Depth-aware image enhancer: a three-level convolutional U-net whose block
//! activations are scaled and shifted by fields predicted from the rendered
//! depth, followed by a residual output head.
//!
//! All modulation predictors and the output head start at zero, so an
//! untrained enhancer returns `clamp(I_c, 0, 1)` exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::tensor::kernels::{axis_taps, ResampleMode};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Var};
use crate::util::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhancerConfig {
    /// Widths at full, half and quarter resolution.
    pub channels: [usize; 3],
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 64] }
    }
}

/// 1×1 predictor of `(γ̂, β)` for a `c`-channel block.
#[derive(Clone, Debug)]
pub struct Modulation {
    pub conv: Conv2d,
    pub channels: usize,
}

impl Modulation {
    pub fn zeros(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self { conv: Conv2d::zeros(store, name, 1, 2 * channels, 1), channels }
    }
}

/// `F̃ = (1 + γ̂(D)) ⊙ F + β(D)` with `D: [1, h', w']` normalized depth,
/// bilinearly resampled to the size of `F: [c, h, w]`.
pub fn modulate(tape: &mut Tape, store: &ParamStore, m: &Modulation, f: Var, depth: Var) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    if fs.len() != 3 || fs[0] != m.channels || tape.shape(depth).len() != 3 || tape.shape(depth)[0] != 1 {
        return Err(Error::Shape(format!(
            "modulate: features {fs:?} with {} channels expected, depth {:?}",
            m.channels,
            tape.shape(depth)
        )));
    }
    let d = if tape.shape(depth)[1..] == fs[1..] {
        depth
    } else {
        tape.resample(depth, fs[1], fs[2], ResampleMode::Bilinear)
    };
    let gb = m.conv.forward(tape, store, d);
    let gamma = tape.slice(gb, 0, 0, m.channels);
    let beta = tape.slice(gb, 0, m.channels, m.channels);
    let gf = tape.mul(gamma, f);
    let out = tape.add(f, gf);
    Ok(tape.add(out, beta))
}

/// Depth `[h, w]` or `[1, h, w]` mapped to `[1, h, w]` in `[0, 1]` by the
/// frame's clip range.
pub fn normalize_depth(tape: &mut Tape, depth: Var, near: Real, far: Real) -> Result<Var> {
    let s = tape.shape(depth).to_vec();
    let s = match s.as_slice() {
        [h, w] | [1, h, w] => [*h, *w],
        _ => return Err(Error::Shape(format!("depth map must be [h, w] or [1, h, w], got {s:?}"))),
    };
    if !(far > near) {
        return Err(Error::Contract(format!("near {near} must be below far {far}")));
    }
    let d = tape.reshape(depth, vec![1, s[0], s[1]]);
    let d = tape.add_scalar(d, -near);
    let d = tape.scale(d, 1.0 / (far - near));
    Ok(tape.clamp(d, 0.0, 1.0))
}

#[derive(Clone, Debug)]
pub struct Enhancer {
    pub config: EnhancerConfig,
    enc: [Conv2d; 3],
    dec: [Conv2d; 2],
    out: Conv2d,
    /// One per block: enc0, enc1, enc2, dec1, dec0.
    mods: [Modulation; 5],
}

impl Enhancer {
    pub fn new(store: &mut ParamStore, name: &str, config: EnhancerConfig, rng: &mut Rng) -> Result<Self> {
        let [c0, c1, c2] = config.channels;
        if c0 == 0 || c1 == 0 || c2 == 0 {
            return Err(Error::Config("enhancer channels must be positive".into()));
        }
        let enc = [
            Conv2d::new(store, &format!("{name}.enc0"), 3, c0, 3, rng),
            Conv2d::new(store, &format!("{name}.enc1"), c0, c1, 3, rng),
            Conv2d::new(store, &format!("{name}.enc2"), c1, c2, 3, rng),
        ];
        let dec = [
            Conv2d::new(store, &format!("{name}.dec1"), c2 + c1, c1, 3, rng),
            Conv2d::new(store, &format!("{name}.dec0"), c1 + c0, c0, 3, rng),
        ];
        let out = Conv2d::zeros(store, &format!("{name}.out"), c0, 3, 1);
        let mods = [
            Modulation::zeros(store, &format!("{name}.mod_enc0"), c0),
            Modulation::zeros(store, &format!("{name}.mod_enc1"), c1),
            Modulation::zeros(store, &format!("{name}.mod_enc2"), c2),
            Modulation::zeros(store, &format!("{name}.mod_dec1"), c1),
            Modulation::zeros(store, &format!("{name}.mod_dec0"), c0),
        ];
        Ok(Self { config, enc, dec, out, mods })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.enc
            .iter()
            .chain(&self.dec)
            .chain(std::iter::once(&self.out))
            .chain(self.mods.iter().map(|m| &m.conv))
            .flat_map(|c| [c.weight, c.bias])
            .collect()
    }

    fn block(&self, tape: &mut Tape, store: &ParamStore, i: usize, x: Var, d: Var) -> Result<Var> {
        let conv = if i < 3 { &self.enc[i] } else { &self.dec[i - 3] };
        let y = conv.forward(tape, store, x);
        let y = tape.elu(y);
        modulate(tape, store, &self.mods[i], y, d)
    }

    /// Refines a coarse `[3, h, w]` render given its normalized `[1, h, w]`
    /// depth; `h` and `w` must be divisible by 4.
    pub fn enhance(&self, tape: &mut Tape, store: &ParamStore, coarse: Var, depth: Var) -> Result<Var> {
        let s = tape.shape(coarse).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("coarse image must be [3, h, w], got {s:?}")));
        }
        if tape.shape(depth) != [1, s[1], s[2]] {
            return Err(Error::Shape(format!("depth {:?} does not match image {s:?}", tape.shape(depth))));
        }
        let (h, w) = (s[1], s[2]);
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("enhancer needs sides divisible by 4, got {h}x{w}")));
        }
        let e0 = self.block(tape, store, 0, coarse, depth)?;
        let p0 = tape.resample(e0, h / 2, w / 2, ResampleMode::Bilinear);
        let e1 = self.block(tape, store, 1, p0, depth)?;
        let p1 = tape.resample(e1, h / 4, w / 4, ResampleMode::Bilinear);
        let e2 = self.block(tape, store, 2, p1, depth)?;
        let u1 = tape.resample(e2, h / 2, w / 2, ResampleMode::Bilinear);
        let c1 = tape.concat(&[u1, e1], 0);
        let d1 = self.block(tape, store, 3, c1, depth)?;
        let u0 = tape.resample(d1, h, w, ResampleMode::Bilinear);
        let c0 = tape.concat(&[u0, e0], 0);
        let d0 = self.block(tape, store, 4, c0, depth)?;
        let r = self.out.forward(tape, store, d0);
        let y = tape.add(coarse, r);
        Ok(tape.clamp(y, 0.0, 1.0))
    }

    /// Radius (in pixels, Chebyshev distance) beyond which a change of the
    /// coarse image cannot reach an output pixel, for images `size` wide.
    /// Computed by propagating dependency intervals through the network
    /// along one axis; the network is separable in its reach.
    pub fn receptive_radius(&self, size: usize) -> usize {
        assert!(size % 4 == 0 && size > 0);
        type Span = Vec<(usize, usize)>;
        let conv = |x: &Span| -> Span {
            let n = x.len();
            (0..n)
                .map(|i| {
                    let lo = x[i.saturating_sub(1)].0.min(x[i].0);
                    let hi = x[(i + 1).min(n - 1)].1.max(x[i].1);
                    (lo, hi)
                })
                .collect()
        };
        let resample = |x: &Span, n_out: usize| -> Span {
            axis_taps(x.len(), n_out, ResampleMode::Bilinear)
                .into_iter()
                .map(|(a, b, _)| (x[a].0.min(x[b].0), x[a].1.max(x[b].1)))
                .collect()
        };
        let union = |a: &Span, b: &Span| -> Span {
            a.iter().zip(b).map(|(p, q)| (p.0.min(q.0), p.1.max(q.1))).collect()
        };
        let input: Span = (0..size).map(|i| (i, i)).collect();
        let e0 = conv(&input);
        let e1 = conv(&resample(&e0, size / 2));
        let e2 = conv(&resample(&e1, size / 4));
        let d1 = conv(&union(&resample(&e2, size / 2), &e1));
        let d0 = conv(&union(&resample(&d1, size), &e0));
        d0.iter()
            .enumerate()
            .map(|(i, &(lo, hi))| (i - lo).max(hi - i))
            .max()
            .unwrap_or(0)
    }
}
