//! Forward and backward kernels for the heavier tape operations.
//!
//! Layout conventions: matrices are row-major `[rows, cols]`; images are
//! `[H, W, C]` with channels innermost.

use crate::real::Real;

/// `c[m,n] = a[m,k] * b[k,n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        T::zero(),
        &mut c,
        n as isize,
        1,
    );
    c
}

/// `da += g * b^T`, `db += a^T * g`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
    da: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(da) = da {
        // da[m,k] = g[m,n] * b^T[n,k]
        T::gemm(
            m,
            n,
            k,
            T::one(),
            g,
            n as isize,
            1,
            b,
            1,
            n as isize,
            T::one(),
            da,
            k as isize,
            1,
        );
    }
    if let Some(db) = db {
        // db[k,n] = a^T[k,m] * g[m,n]
        T::gemm(
            k,
            m,
            n,
            T::one(),
            a,
            1,
            k as isize,
            g,
            n as isize,
            1,
            T::one(),
            db,
            n as isize,
            1,
        );
    }
}

/// Geometry of a 3x3, zero-padded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        9 * self.cin
    }
}

/// Unfolds `[H,W,Cin]` into `[Ho*Wo, 9*Cin]` patches.
pub fn im2col<T: Real>(input: &[T], g: ConvGeom) -> Vec<T> {
    let (ho, wo, p) = (g.out_h(), g.out_w(), g.patch());
    let mut col = vec![T::zero(); ho * wo * p];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut col[(oy * wo + ox) * p..(oy * wo + ox + 1) * p];
            for ky in 0..3 {
                let iy = (oy * g.stride + ky) as isize - 1;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * g.stride + kx) as isize - 1;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * 3 + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                }
            }
        }
    }
    col
}

/// Scatters patch gradients back onto the `[H,W,Cin]` input.
pub fn col2im<T: Real>(dcol: &[T], g: ConvGeom, dinput: &mut [T]) {
    let (ho, wo, p) = (g.out_h(), g.out_w(), g.patch());
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &dcol[(oy * wo + ox) * p..(oy * wo + ox + 1) * p];
            for ky in 0..3 {
                let iy = (oy * g.stride + ky) as isize - 1;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * g.stride + kx) as isize - 1;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * 3 + kx) * g.cin;
                    for c in 0..g.cin {
                        dinput[dst + c] = dinput[dst + c] + row[src + c];
                    }
                }
            }
        }
    }
}

/// Bilinear tap weights for one continuous pixel coordinate.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap<T> {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub fx: T,
    pub fy: T,
}

/// Integer pixel coordinates are texel centers; anything outside
/// `[0, W-1] x [0, H-1]` (or non-finite) is invalid.
pub fn bilinear_tap<T: Real>(u: T, v: T, w: usize, h: usize) -> Option<BilinearTap<T>> {
    if !(u.is_finite() && v.is_finite()) || w == 0 || h == 0 {
        return None;
    }
    let wmax = T::c((w - 1) as f64);
    let hmax = T::c((h - 1) as f64);
    if u < T::zero() || v < T::zero() || u > wmax || v > hmax {
        return None;
    }
    let fl_u = u.floor().to_usize().unwrap_or(0);
    let fl_v = v.floor().to_usize().unwrap_or(0);
    let x0 = if w > 1 { fl_u.min(w - 2) } else { 0 };
    let y0 = if h > 1 { fl_v.min(h - 2) } else { 0 };
    let x1 = if w > 1 { x0 + 1 } else { 0 };
    let y1 = if h > 1 { y0 + 1 } else { 0 };
    let fx = if w > 1 { u - T::c(x0 as f64) } else { T::zero() };
    let fy = if h > 1 { v - T::c(y0 as f64) } else { T::zero() };
    Some(BilinearTap {
        x0,
        y0,
        x1,
        y1,
        fx,
        fy,
    })
}

/// Samples `[H,W,C]` at each `uv` row; returns `[N,C]` values and validity.
pub fn bilinear_forward<T: Real>(
    map: &[T],
    h: usize,
    w: usize,
    c: usize,
    uv: &[T],
) -> (Vec<T>, Vec<Option<BilinearTap<T>>>) {
    let n = uv.len() / 2;
    let mut out = vec![T::zero(); n * c];
    let mut taps = Vec::with_capacity(n);
    for i in 0..n {
        let tap = bilinear_tap(uv[2 * i], uv[2 * i + 1], w, h);
        if let Some(t) = tap {
            let (w00, w01, w10, w11) = tap_weights(&t);
            let m00 = &map[(t.y0 * w + t.x0) * c..][..c];
            let m01 = &map[(t.y0 * w + t.x1) * c..][..c];
            let m10 = &map[(t.y1 * w + t.x0) * c..][..c];
            let m11 = &map[(t.y1 * w + t.x1) * c..][..c];
            let o = &mut out[i * c..(i + 1) * c];
            for ch in 0..c {
                o[ch] = w00 * m00[ch] + w01 * m01[ch] + w10 * m10[ch] + w11 * m11[ch];
            }
        }
        taps.push(tap);
    }
    (out, taps)
}

fn tap_weights<T: Real>(t: &BilinearTap<T>) -> (T, T, T, T) {
    let one = T::one();
    (
        (one - t.fx) * (one - t.fy),
        t.fx * (one - t.fy),
        (one - t.fx) * t.fy,
        t.fx * t.fy,
    )
}

/// Backward of [`bilinear_forward`] into the map and/or the coordinates.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_backward<T: Real>(
    map: &[T],
    w: usize,
    c: usize,
    taps: &[Option<BilinearTap<T>>],
    g: &[T],
    mut dmap: Option<&mut [T]>,
    mut duv: Option<&mut [T]>,
) {
    let one = T::one();
    for (i, tap) in taps.iter().enumerate() {
        let Some(t) = tap else { continue };
        let gi = &g[i * c..(i + 1) * c];
        let (w00, w01, w10, w11) = tap_weights(t);
        let i00 = (t.y0 * w + t.x0) * c;
        let i01 = (t.y0 * w + t.x1) * c;
        let i10 = (t.y1 * w + t.x0) * c;
        let i11 = (t.y1 * w + t.x1) * c;
        if let Some(dm) = dmap.as_deref_mut() {
            for ch in 0..c {
                dm[i00 + ch] = dm[i00 + ch] + w00 * gi[ch];
                dm[i01 + ch] = dm[i01 + ch] + w01 * gi[ch];
                dm[i10 + ch] = dm[i10 + ch] + w10 * gi[ch];
                dm[i11 + ch] = dm[i11 + ch] + w11 * gi[ch];
            }
        }
        if let Some(du) = duv.as_deref_mut() {
            let mut gu = T::zero();
            let mut gv = T::zero();
            for ch in 0..c {
                let (m00, m01, m10, m11) = (map[i00 + ch], map[i01 + ch], map[i10 + ch], map[i11 + ch]);
                gu = gu + gi[ch] * ((one - t.fy) * (m01 - m00) + t.fy * (m11 - m10));
                gv = gv + gi[ch] * ((one - t.fx) * (m10 - m00) + t.fx * (m11 - m01));
            }
            if t.x1 != t.x0 {
                du[2 * i] = du[2 * i] + gu;
            }
            if t.y1 != t.y0 {
                du[2 * i + 1] = du[2 * i + 1] + gv;
            }
        }
    }
}

/// Per row `[x, sin(pi x), cos(pi x), sin(2 pi x), cos(2 pi x), ...]` up to
/// frequency `2^(L-1) pi`, where each term spans all `d` inputs.
pub fn pos_encode<T: Real>(x: &[T], d: usize, levels: usize) -> Vec<T> {
    let n = x.len() / d;
    let width = d * (1 + 2 * levels);
    let mut out = vec![T::zero(); n * width];
    for r in 0..n {
        let xr = &x[r * d..(r + 1) * d];
        let o = &mut out[r * width..(r + 1) * width];
        o[..d].copy_from_slice(xr);
        for j in 0..d {
            let mut octaves = Octaves::new(xr[j].as_f64());
            for l in 0..levels {
                let (sin, cos) = octaves.next_pair();
                o[d + 2 * l * d + j] = T::c(sin);
                o[d + (2 * l + 1) * d + j] = T::c(cos);
            }
        }
    }
    out
}

/// `sin`/`cos` of `2^l pi x` for successive `l` by angle doubling in f64,
/// re-anchored with direct evaluation every few octaves.
struct Octaves {
    x: f64,
    level: usize,
    sin: f64,
    cos: f64,
}

impl Octaves {
    const REANCHOR: usize = 4;

    fn new(x: f64) -> Self {
        Self {
            x,
            level: 0,
            sin: 0.0,
            cos: 1.0,
        }
    }

    fn next_pair(&mut self) -> (f64, f64) {
        if self.level % Self::REANCHOR == 0 {
            let a = std::f64::consts::PI * (1u64 << self.level) as f64 * self.x;
            (self.sin, self.cos) = a.sin_cos();
        } else {
            let (s, c) = (self.sin, self.cos);
            self.sin = 2.0 * s * c;
            self.cos = (c - s) * (c + s);
        }
        self.level += 1;
        (self.sin, self.cos)
    }
}

pub fn pos_encode_backward<T: Real>(x: &[T], d: usize, levels: usize, g: &[T], dx: &mut [T]) {
    let n = x.len() / d;
    let width = d * (1 + 2 * levels);
    for r in 0..n {
        let xr = &x[r * d..(r + 1) * d];
        let gr = &g[r * width..(r + 1) * width];
        for j in 0..d {
            let mut acc = gr[j].as_f64();
            let mut octaves = Octaves::new(xr[j].as_f64());
            for l in 0..levels {
                let freq = std::f64::consts::PI * (1u64 << l) as f64;
                let (sin, cos) = octaves.next_pair();
                acc += freq * (gr[d + 2 * l * d + j].as_f64() * cos - gr[d + (2 * l + 1) * d + j].as_f64() * sin);
            }
            dx[r * d + j] = dx[r * d + j] + T::c(acc);
        }
    }
}

/// Guard for normalizing expected depth by accumulated opacity.
pub const DEPTH_EPS: f64 = 1e-6;

/// Emission-absorption compositing along `rays` rays of `s` samples each.
///
/// Inputs: densities `[R,S]`, colors `[R*S,3]`, sample depths `[R,S]`, and the
/// far bound per ray (closing the last interval). Output rows are
/// `[r, g, b, alpha, depth]` followed by the per-sample weights `[R,S]`.
pub fn composite_forward<T: Real>(
    sigma: &[T],
    color: &[T],
    t: &[T],
    far: &[T],
    s: usize,
) -> (Vec<T>, Vec<T>) {
    let rays = far.len();
    let mut out = vec![T::zero(); rays * 5];
    let mut weights = vec![T::zero(); rays * s];
    let eps = T::c(DEPTH_EPS);
    for r in 0..rays {
        let mut optical = T::zero();
        let (mut cr, mut cg, mut cb, mut alpha, mut dn) =
            (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
        for i in 0..s {
            let k = r * s + i;
            let delta = if i + 1 < s { t[k + 1] - t[k] } else { far[r] - t[k] };
            let tau = sigma[k] * delta;
            let trans = (-optical).exp();
            let w = trans * (T::one() - (-tau).exp());
            weights[k] = w;
            cr = cr + w * color[3 * k];
            cg = cg + w * color[3 * k + 1];
            cb = cb + w * color[3 * k + 2];
            alpha = alpha + w;
            dn = dn + w * t[k];
            optical = optical + tau;
        }
        let o = &mut out[r * 5..(r + 1) * 5];
        o[0] = cr;
        o[1] = cg;
        o[2] = cb;
        o[3] = alpha;
        o[4] = dn / alpha.max(eps);
    }
    (out, weights)
}

/// Gradient buffers for [`composite_backward`].
pub struct CompositeGrads<'a, T> {
    pub sigma: Option<&'a mut [T]>,
    pub color: Option<&'a mut [T]>,
    pub t: Option<&'a mut [T]>,
}

#[allow(clippy::too_many_arguments)]
pub fn composite_backward<T: Real>(
    sigma: &[T],
    color: &[T],
    t: &[T],
    far: &[T],
    s: usize,
    out: &[T],
    weights: &[T],
    g: &[T],
    mut grads: CompositeGrads<'_, T>,
) {
    let rays = far.len();
    let eps = T::c(DEPTH_EPS);
    let mut gw = vec![T::zero(); s];
    let mut gs = vec![T::zero(); s];
    for r in 0..rays {
        let o = &out[r * 5..(r + 1) * 5];
        let gr = &g[r * 5..(r + 1) * 5];
        let alpha = o[3];
        let am = alpha.max(eps);
        let dn = o[4] * am;
        let clamp_active = alpha > eps;
        for i in 0..s {
            let k = r * s + i;
            let mut d_depth = t[k] / am;
            if clamp_active {
                d_depth = d_depth - dn / (am * am);
            }
            gw[i] = gr[0] * color[3 * k]
                + gr[1] * color[3 * k + 1]
                + gr[2] * color[3 * k + 2]
                + gr[3]
                + gr[4] * d_depth;
            if let Some(gc) = grads.color.as_deref_mut() {
                gc[3 * k] = gc[3 * k] + gr[0] * weights[k];
                gc[3 * k + 1] = gc[3 * k + 1] + gr[1] * weights[k];
                gc[3 * k + 2] = gc[3 * k + 2] + gr[2] * weights[k];
            }
            if let Some(gt) = grads.t.as_deref_mut() {
                gt[k] = gt[k] + gr[4] * weights[k] / am;
            }
        }
        // d w_i / d tau_j = -w_i for j < i, T_j exp(-tau_j) for j = i.
        let mut suffix = T::zero();
        let mut optical = T::zero();
        let mut prefix_trans = Vec::with_capacity(s);
        for i in 0..s {
            let k = r * s + i;
            let delta = if i + 1 < s { t[k + 1] - t[k] } else { far[r] - t[k] };
            prefix_trans.push((-optical).exp());
            optical = optical + sigma[k] * delta;
        }
        for i in (0..s).rev() {
            let k = r * s + i;
            let delta = if i + 1 < s { t[k + 1] - t[k] } else { far[r] - t[k] };
            let tau = sigma[k] * delta;
            gs[i] = gw[i] * prefix_trans[i] * (-tau).exp() - suffix;
            suffix = suffix + gw[i] * weights[k];
        }
        for i in 0..s {
            let k = r * s + i;
            let delta = if i + 1 < s { t[k + 1] - t[k] } else { far[r] - t[k] };
            if let Some(gsig) = grads.sigma.as_deref_mut() {
                gsig[k] = gsig[k] + gs[i] * delta;
            }
            if let Some(gt) = grads.t.as_deref_mut() {
                let gdelta = gs[i] * sigma[k];
                if i + 1 < s {
                    gt[k + 1] = gt[k + 1] + gdelta;
                }
                gt[k] = gt[k] - gdelta;
            }
        }
    }
}
