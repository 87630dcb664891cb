//! Tiled front-to-back compositing and its reverse pass.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use super::project::{project_backward, project_gaussian, Projected, CUTOFF};
use super::Intrinsics;
use crate::gaussians::Mat3;
use crate::tensor::Real;

pub const TILE: usize = 16;
pub const ALPHA_MAX: Real = 0.99;
pub const ALPHA_MIN: Real = 1.0 / 255.0;
pub const T_MIN: Real = 1e-4;
/// Floor of the weight used to normalize the expected depth.
pub const DEPTH_EPS: Real = 1e-6;
/// Output channels: r, g, b, depth, weight.
pub const CHANNELS: usize = 5;

/// Borrowed, flattened renderer inputs.
#[derive(Clone, Copy)]
pub(crate) struct Scene<'a> {
    pub means: &'a [Real],
    pub quats: &'a [Real],
    pub scales: &'a [Real],
    pub colors: &'a [Real],
    pub opacities: &'a [Real],
    pub w: Mat3,
    pub t: [Real; 3],
    pub background: [Real; 3],
    pub intr: Intrinsics,
}

impl Scene<'_> {
    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    fn mean(&self, i: usize) -> [Real; 3] {
        [self.means[3 * i], self.means[3 * i + 1], self.means[3 * i + 2]]
    }

    fn quat(&self, i: usize) -> [Real; 4] {
        [self.quats[4 * i], self.quats[4 * i + 1], self.quats[4 * i + 2], self.quats[4 * i + 3]]
    }

    fn scale(&self, i: usize) -> [Real; 3] {
        [self.scales[3 * i], self.scales[3 * i + 1], self.scales[3 * i + 2]]
    }

    fn color(&self, i: usize) -> [Real; 3] {
        [self.colors[3 * i], self.colors[3 * i + 1], self.colors[3 * i + 2]]
    }
}

/// Projections, global depth order and per-tile lists.
pub(crate) struct Prepared {
    pub proj: Vec<Option<Projected>>,
    /// Visible Gaussians sorted by `(depth, index)`.
    pub order: Vec<u32>,
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
}

pub(crate) fn prepare(scene: &Scene) -> Prepared {
    let n = scene.len();
    let project = |i: usize| {
        project_gaussian(&scene.mean(i), &scene.quat(i), &scene.scale(i), &scene.w, &scene.t, &scene.intr)
    };
    #[cfg(feature = "parallel")]
    let proj: Vec<Option<Projected>> = (0..n).into_par_iter().map(project).collect();
    #[cfg(not(feature = "parallel"))]
    let proj: Vec<Option<Projected>> = (0..n).map(project).collect();
    let mut order: Vec<u32> = (0..n as u32).filter(|&i| proj[i as usize].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (proj[a as usize].unwrap().depth, proj[b as usize].unwrap().depth);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let tiles_x = scene.intr.width.div_ceil(TILE);
    let tiles_y = scene.intr.height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for &g in &order {
        let r = proj[g as usize].unwrap().rect;
        for ty in r[1] / TILE..=r[3] / TILE {
            for tx in r[0] / TILE..=r[2] / TILE {
                tiles[ty * tiles_x + tx].push(g);
            }
        }
    }
    Prepared { proj, order, tiles, tiles_x }
}

/// Opacity-weighted Gaussian falloff at a pixel center, or `None` if the
/// Gaussian is outside the cutoff or too faint to count.
#[inline]
fn contribution(p: &Projected, opacity: Real, px: usize, py: usize) -> Option<Contribution> {
    let dx = px as Real + 0.5 - p.mean[0];
    let dy = py as Real + 0.5 - p.mean[1];
    let [qa, qb, qc] = p.conic;
    let m2 = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy;
    if !(m2 <= CUTOFF) {
        return None;
    }
    let g = (-0.5 * m2).exp();
    let raw = opacity * g;
    let alpha = raw.min(ALPHA_MAX);
    if alpha < ALPHA_MIN {
        return None;
    }
    Some(Contribution { alpha, g, dx, dy, clamped: raw > ALPHA_MAX })
}

struct Contribution {
    alpha: Real,
    g: Real,
    dx: Real,
    dy: Real,
    clamped: bool,
}

/// Per-pixel compositing results needed by the reverse pass.
pub(crate) struct Forward {
    /// `[5, H, W]`
    pub image: Vec<Real>,
    pub final_t: Vec<Real>,
    /// One past the last contributing entry of the pixel's tile list.
    pub last: Vec<u32>,
    /// Unnormalized depth `sum z alpha T`.
    pub numer: Vec<Real>,
}

struct TilePixels {
    px: Vec<(usize, [Real; 3], Real, Real, u32)>,
}

fn tile_pixels(intr: &Intrinsics, tiles_x: usize, tile: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let x0 = tx * TILE;
    let y0 = ty * TILE;
    let x1 = (x0 + TILE).min(intr.width);
    let y1 = (y0 + TILE).min(intr.height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

fn forward_tile(scene: &Scene, prep: &Prepared, tile: usize) -> TilePixels {
    let list = &prep.tiles[tile];
    let w = scene.intr.width;
    let px = tile_pixels(&scene.intr, prep.tiles_x, tile)
        .map(|(x, y)| {
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut numer = 0.0;
            let mut last = 0u32;
            for (j, &g) in list.iter().enumerate() {
                let gi = g as usize;
                let p = prep.proj[gi].as_ref().unwrap();
                let Some(k) = contribution(p, scene.opacities[gi], x, y) else {
                    continue;
                };
                let next_t = t * (1.0 - k.alpha);
                if next_t < T_MIN {
                    break;
                }
                let col = scene.color(gi);
                let wgt = k.alpha * t;
                for ch in 0..3 {
                    c[ch] += col[ch] * wgt;
                }
                numer += p.depth * wgt;
                t = next_t;
                last = j as u32 + 1;
            }
            (y * w + x, c, t, numer, last)
        })
        .collect();
    TilePixels { px }
}

pub(crate) fn forward(scene: &Scene, prep: &Prepared) -> Forward {
    let npx = scene.intr.num_pixels();
    let ntiles = prep.tiles.len();
    #[cfg(feature = "parallel")]
    let tiles: Vec<TilePixels> = (0..ntiles).into_par_iter().map(|t| forward_tile(scene, prep, t)).collect();
    #[cfg(not(feature = "parallel"))]
    let tiles: Vec<TilePixels> = (0..ntiles).map(|t| forward_tile(scene, prep, t)).collect();
    let mut out = Forward {
        image: vec![0.0; CHANNELS * npx],
        final_t: vec![1.0; npx],
        last: vec![0; npx],
        numer: vec![0.0; npx],
    };
    let bg = scene.background;
    for tp in tiles {
        for (p, c, t, numer, last) in tp.px {
            let weight = 1.0 - t;
            for ch in 0..3 {
                out.image[ch * npx + p] = c[ch] + t * bg[ch];
            }
            out.image[3 * npx + p] = numer / weight.max(DEPTH_EPS);
            out.image[4 * npx + p] = weight;
            out.final_t[p] = t;
            out.last[p] = last;
            out.numer[p] = numer;
        }
    }
    out
}

/// Gradients of all renderer inputs, flattened like the inputs.
pub(crate) struct SceneGrads {
    pub means: Vec<Real>,
    pub quats: Vec<Real>,
    pub scales: Vec<Real>,
    pub colors: Vec<Real>,
    pub opacities: Vec<Real>,
    pub w: Mat3,
    pub t: [Real; 3],
    pub background: [Real; 3],
}

/// Screen-space gradient slots per tile entry.
const G_MEAN: usize = 0;
const G_CONIC: usize = 2;
const G_OPACITY: usize = 5;
const G_COLOR: usize = 6;
const G_DEPTH: usize = 9;
const G_LEN: usize = 10;

struct TileGrads {
    entries: Vec<[Real; G_LEN]>,
    background: [Real; 3],
}

fn backward_tile(scene: &Scene, prep: &Prepared, fwd: &Forward, grad: &[Real], tile: usize) -> TileGrads {
    let list = &prep.tiles[tile];
    let npx = scene.intr.num_pixels();
    let w = scene.intr.width;
    let bg = scene.background;
    let mut entries = vec![[0.0; G_LEN]; list.len()];
    let mut gbg = [0.0; 3];
    for (x, y) in tile_pixels(&scene.intr, prep.tiles_x, tile) {
        let p = y * w + x;
        let gc = [grad[p], grad[npx + p], grad[2 * npx + p]];
        let gd = grad[3 * npx + p];
        let gw = grad[4 * npx + p];
        let tf = fwd.final_t[p];
        let weight = 1.0 - tf;
        let numer = fwd.numer[p];
        for ch in 0..3 {
            gbg[ch] += gc[ch] * tf;
        }
        let denom = weight.max(DEPTH_EPS);
        let gn = gd / denom;
        let gw_eff = if weight > DEPTH_EPS { gw - gd * numer / (weight * weight) } else { gw };
        let mut s_c = [0.0; 3];
        let mut s_n = 0.0;
        let mut t = tf;
        for j in (0..fwd.last[p] as usize).rev() {
            let gi = list[j] as usize;
            let pr = prep.proj[gi].as_ref().unwrap();
            let opacity = scene.opacities[gi];
            let Some(k) = contribution(pr, opacity, x, y) else {
                continue;
            };
            let one_minus = 1.0 - k.alpha;
            let ti = t / one_minus;
            let col = scene.color(gi);
            let wgt = k.alpha * ti;
            let mut g_alpha = gn * (pr.depth * ti - s_n / one_minus) + gw_eff * tf / one_minus;
            for ch in 0..3 {
                g_alpha += gc[ch] * (col[ch] * ti - (s_c[ch] + tf * bg[ch]) / one_minus);
            }
            let e = &mut entries[j];
            for ch in 0..3 {
                e[G_COLOR + ch] += gc[ch] * wgt;
                s_c[ch] += col[ch] * wgt;
            }
            e[G_DEPTH] += gn * wgt;
            s_n += pr.depth * wgt;
            if !k.clamped {
                e[G_OPACITY] += g_alpha * k.g;
                let g_pow = g_alpha * k.alpha;
                let [qa, qb, qc] = pr.conic;
                e[G_MEAN] += g_pow * (qa * k.dx + qb * k.dy);
                e[G_MEAN + 1] += g_pow * (qb * k.dx + qc * k.dy);
                e[G_CONIC] += g_pow * (-0.5 * k.dx * k.dx);
                e[G_CONIC + 1] += g_pow * (-k.dx * k.dy);
                e[G_CONIC + 2] += g_pow * (-0.5 * k.dy * k.dy);
            }
            t = ti;
        }
    }
    TileGrads { entries, background: gbg }
}

/// Reverse pass. Per-tile partial sums are reduced in tile order, so the
/// result does not depend on the number of threads.
pub(crate) fn backward(scene: &Scene, prep: &Prepared, fwd: &Forward, grad: &[Real]) -> SceneGrads {
    let n = scene.len();
    let ntiles = prep.tiles.len();
    #[cfg(feature = "parallel")]
    let tiles: Vec<TileGrads> =
        (0..ntiles).into_par_iter().map(|t| backward_tile(scene, prep, fwd, grad, t)).collect();
    #[cfg(not(feature = "parallel"))]
    let tiles: Vec<TileGrads> = (0..ntiles).map(|t| backward_tile(scene, prep, fwd, grad, t)).collect();

    let mut screen = vec![[0.0; G_LEN]; n];
    let mut gbg = [0.0; 3];
    for (tile, tg) in tiles.iter().enumerate() {
        for (j, e) in tg.entries.iter().enumerate() {
            let acc = &mut screen[prep.tiles[tile][j] as usize];
            for k in 0..G_LEN {
                acc[k] += e[k];
            }
        }
        for ch in 0..3 {
            gbg[ch] += tg.background[ch];
        }
    }

    let mut out = SceneGrads {
        means: vec![0.0; 3 * n],
        quats: vec![0.0; 4 * n],
        scales: vec![0.0; 3 * n],
        colors: vec![0.0; 3 * n],
        opacities: vec![0.0; n],
        w: [[0.0; 3]; 3],
        t: [0.0; 3],
        background: gbg,
    };
    let per_gaussian = |&g: &u32| {
        let gi = g as usize;
        let s = &screen[gi];
        let pg = project_backward(
            &scene.mean(gi),
            &scene.quat(gi),
            &scene.scale(gi),
            &scene.w,
            &scene.t,
            &scene.intr,
            prep.proj[gi].as_ref().unwrap(),
            [s[G_MEAN], s[G_MEAN + 1]],
            [s[G_CONIC], s[G_CONIC + 1], s[G_CONIC + 2]],
            s[G_DEPTH],
        );
        (gi, pg)
    };
    #[cfg(feature = "parallel")]
    let proj_grads: Vec<_> = prep.order.par_iter().map(per_gaussian).collect();
    #[cfg(not(feature = "parallel"))]
    let proj_grads: Vec<_> = prep.order.iter().map(per_gaussian).collect();
    // index order keeps the camera reduction independent of depth ties
    let mut proj_grads = proj_grads;
    proj_grads.sort_by_key(|(gi, _)| *gi);
    for (gi, pg) in proj_grads {
        let s = &screen[gi];
        out.means[3 * gi..3 * gi + 3].copy_from_slice(&pg.mean);
        out.quats[4 * gi..4 * gi + 4].copy_from_slice(&pg.quat);
        out.scales[3 * gi..3 * gi + 3].copy_from_slice(&pg.scale);
        out.colors[3 * gi..3 * gi + 3].copy_from_slice(&s[G_COLOR..G_COLOR + 3]);
        out.opacities[gi] = s[G_OPACITY];
        for i in 0..3 {
            for j in 0..3 {
                out.w[i][j] += pg.w[i][j];
            }
            out.t[i] += pg.t[i];
        }
    }
    out
}
