//! Numeric kernels shared by tape ops: GEMM, im2col convolution, resampling
//! and depthwise filtering. All kernels accumulate in a fixed order.

use super::Real;

/// `c = op(a) * op(b) + beta * c` for row-major operands.
///
/// `a` is `m x k` (or `k x m` when `ta`), `b` is `k x n` (or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    ta: bool,
    b: &[Real],
    tb: bool,
    c: &mut [Real],
    beta: Real,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
        );
    }
}

#[cfg(not(feature = "f32"))]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: *const Real,
    rsa: isize,
    csa: isize,
    b: *const Real,
    rsb: isize,
    csb: isize,
    beta: Real,
    c: *mut Real,
    rsc: isize,
) {
    matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
}

#[cfg(feature = "f32")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: *const Real,
    rsa: isize,
    csa: isize,
    b: *const Real,
    rsb: isize,
    csb: isize,
    beta: Real,
    c: *mut Real,
    rsc: isize,
) {
    matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
}

/// Geometry of a stride-1 2-D convolution over a single `[C, H, W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

pub fn im2col(x: &[Real], g: &ConvGeom, cols: &mut [Real]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    debug_assert_eq!(cols.len(), g.patch() * plane);
    for ci in 0..g.cin {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (ci * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize + dy as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + dx as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

pub fn col2im(cols: &[Real], g: &ConvGeom, x: &mut [Real]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for ci in 0..g.cin {
        let dst = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (ci * g.kh + dy) * g.kw + dx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize + dy as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * wo..(oy + 1) * wo];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = ox as isize + dx as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `weight` is `[cout, cin, kh, kw]`; output `[cout, ho, wo]`.
pub fn conv2d_forward(
    x: &[Real],
    weight: &[Real],
    bias: Option<&[Real]>,
    cout: usize,
    g: &ConvGeom,
) -> Vec<Real> {
    let plane = g.out_h() * g.out_w();
    let mut out = vec![0.0; cout * plane];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(b[co]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.kh == 1 && g.kw == 1 && g.pad == 0 {
        gemm(cout, g.cin, plane, weight, false, x, false, &mut out, beta);
    } else {
        let mut cols = vec![0.0; g.patch() * plane];
        im2col(x, g, &mut cols);
        gemm(
            cout,
            g.patch(),
            plane,
            weight,
            false,
            &cols,
            false,
            &mut out,
            beta,
        );
    }
    out
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    x: &[Real],
    weight: &[Real],
    grad_out: &[Real],
    cout: usize,
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Vec<Real>>, Vec<Real>, Vec<Real>) {
    let plane = g.out_h() * g.out_w();
    let mut d_weight = vec![0.0; cout * g.patch()];
    let d_bias: Vec<Real> = grad_out.chunks(plane).map(|c| c.iter().sum()).collect();
    if g.kh == 1 && g.kw == 1 && g.pad == 0 {
        gemm(
            cout,
            plane,
            g.cin,
            grad_out,
            false,
            x,
            true,
            &mut d_weight,
            0.0,
        );
        let d_input = need_input.then(|| {
            let mut dx = vec![0.0; g.cin * plane];
            gemm(
                g.cin, cout, plane, weight, true, grad_out, false, &mut dx, 0.0,
            );
            dx
        });
        return (d_input, d_weight, d_bias);
    }
    let mut cols = vec![0.0; g.patch() * plane];
    im2col(x, g, &mut cols);
    gemm(
        cout,
        plane,
        g.patch(),
        grad_out,
        false,
        &cols,
        true,
        &mut d_weight,
        0.0,
    );
    let d_input = need_input.then(|| {
        gemm(
            g.patch(),
            cout,
            plane,
            weight,
            true,
            grad_out,
            false,
            &mut cols,
            0.0,
        );
        let mut dx = vec![0.0; g.cin * g.h * g.w];
        col2im(&cols, g, &mut dx);
        dx
    });
    (d_input, d_weight, d_bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResampleMode {
    Nearest,
    Bilinear,
}

/// Per-output-index source taps `(i0, i1, w1)` along one axis with half-pixel centers.
pub(crate) fn axis_taps(n_in: usize, n_out: usize, mode: ResampleMode) -> Vec<(usize, usize, Real)> {
    let scale = n_in as Real / n_out as Real;
    (0..n_out)
        .map(|o| match mode {
            ResampleMode::Nearest => {
                let i = (((o as Real + 0.5) * scale).floor() as usize).min(n_in - 1);
                (i, i, 0.0)
            }
            ResampleMode::Bilinear => {
                let s = ((o as Real + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as Real)
            }
        })
        .collect()
}

/// Resample `[C, H, W]` to `[C, ho, wo]`.
pub fn resample_forward(
    x: &[Real],
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    mode: ResampleMode,
) -> Vec<Real> {
    let ty = axis_taps(h, ho, mode);
    let tx = axis_taps(w, wo, mode);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                dst[oy * wo + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

pub fn resample_backward(
    g: &[Real],
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    mode: ResampleMode,
) -> Vec<Real> {
    let ty = axis_taps(h, ho, mode);
    let tx = axis_taps(w, wo, mode);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &g[ch * ho * wo..(ch + 1) * ho * wo];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let v = src[oy * wo + ox];
                dst[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                dst[y0 * w + x1] += v * (1.0 - wy) * wx;
                dst[y1 * w + x0] += v * wy * (1.0 - wx);
                dst[y1 * w + x1] += v * wy * wx;
            }
        }
    }
    dx
}

/// Valid-mode depthwise correlation of every channel of `[C, H, W]` with one `kh x kw` kernel.
pub fn filter_valid_forward(
    x: &[Real],
    c: usize,
    h: usize,
    w: usize,
    k: &[Real],
    kh: usize,
    kw: usize,
) -> Vec<Real> {
    let (ho, wo) = (h + 1 - kh, w + 1 - kw);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for dy in 0..kh {
            for dx in 0..kw {
                let kv = k[dy * kw + dx];
                if kv == 0.0 {
                    continue;
                }
                for oy in 0..ho {
                    let srow = &src[(oy + dy) * w + dx..(oy + dy) * w + dx + wo];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d += kv * s;
                    }
                }
            }
        }
    }
    out
}

pub fn filter_valid_backward(
    g: &[Real],
    c: usize,
    h: usize,
    w: usize,
    k: &[Real],
    kh: usize,
    kw: usize,
) -> Vec<Real> {
    let (ho, wo) = (h + 1 - kh, w + 1 - kw);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &g[ch * ho * wo..(ch + 1) * ho * wo];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for dy in 0..kh {
            for dxx in 0..kw {
                let kv = k[dy * kw + dxx];
                if kv == 0.0 {
                    continue;
                }
                for oy in 0..ho {
                    let grow = &src[oy * wo..(oy + 1) * wo];
                    let drow = &mut dst[(oy + dy) * w + dxx..(oy + dy) * w + dxx + wo];
                    for (d, s) in drow.iter_mut().zip(grow) {
                        *d += kv * s;
                    }
                }
            }
        }
    }
    dx
}
