//! Slice-level forward and backward kernels for the heavier graph ops.

use super::gemm::gemm;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let p = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let p = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (kr, p) = (g.col_rows(), g.col_cols());
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * p;
    let mut out = vec![0.0; g.batch * out_stride];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kr * p] };
    for b in 0..g.batch {
        let xb = &x[b * in_stride..(b + 1) * in_stride];
        let ob = &mut out[b * out_stride..(b + 1) * out_stride];
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                ob[co * p..(co + 1) * p].fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let rhs: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        gemm(g.cout, kr, p, 1.0, w, false, rhs, false, beta, ob);
    }
    out
}

/// Accumulates gradients into whichever of `dx`, `dw`, `dbias` are present.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let (kr, p) = (g.col_rows(), g.col_cols());
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * p;
    if let Some(db) = dbias {
        for b in 0..g.batch {
            for (co, d) in db.iter_mut().enumerate() {
                let off = b * out_stride + co * p;
                *d += dy[off..off + p].iter().sum::<f64>();
            }
        }
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kr * p] };
    let mut dcols = if g.is_pointwise() || dx.is_none() {
        Vec::new()
    } else {
        vec![0.0; kr * p]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_stride..(b + 1) * in_stride];
        let dyb = &dy[b * out_stride..(b + 1) * out_stride];
        if let Some(dw) = dw.as_deref_mut() {
            let rhs: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            gemm(g.cout, p, kr, 1.0, dyb, false, rhs, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
            if g.is_pointwise() {
                gemm(kr, g.cout, p, 1.0, w, true, dyb, false, 1.0, dxb);
            } else {
                gemm(kr, g.cout, p, 1.0, w, true, dyb, false, 0.0, &mut dcols);
                col2im(g, &dcols, dxb);
            }
        }
    }
}

/// Depthwise "same" convolution along the last axis of a `(batch, channels, len)` buffer.
pub(crate) fn depthwise_conv1d_forward(
    x: &[f64],
    dims: (usize, usize, usize),
    w: &[f64],
    k: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (batch, ch, len) = dims;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let off = (b * ch + c) * len;
            let xs = &x[off..off + len];
            let ws = &w[c * k..(c + 1) * k];
            let b0 = bias.map_or(0.0, |bv| bv[c]);
            for t in 0..len {
                let mut acc = b0;
                for (j, &wj) in ws.iter().enumerate() {
                    let s = t as isize + j as isize - pad;
                    if s >= 0 && (s as usize) < len {
                        acc += wj * xs[s as usize];
                    }
                }
                out[off + t] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_conv1d_backward(
    x: &[f64],
    dims: (usize, usize, usize),
    w: &[f64],
    k: usize,
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    let (batch, ch, len) = dims;
    let pad = (k / 2) as isize;
    for b in 0..batch {
        for c in 0..ch {
            let off = (b * ch + c) * len;
            for t in 0..len {
                let g = dy[off + t];
                if let Some(db) = dbias.as_deref_mut() {
                    db[c] += g;
                }
                for j in 0..k {
                    let s = t as isize + j as isize - pad;
                    if s < 0 || s as usize >= len {
                        continue;
                    }
                    let s = s as usize;
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[c * k + j] += g * x[off + s];
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[off + s] += g * w[c * k + j];
                    }
                }
            }
        }
    }
}

/// Two-tap linear interpolation source for one output coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Half-pixel (align-corners = false) sampling taps mapping `in_len` onto `out_len`.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<BilinearTap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = src - i0 as f64;
            BilinearTap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

/// Resamples every `(h, w)` plane of `x` to `(oh, ow)`.
pub(crate) fn bilinear_forward(x: &[f64], planes: usize, hw: (usize, usize), ohw: (usize, usize)) -> Vec<f64> {
    let (h, w) = hw;
    let (oh, ow) = ohw;
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, ry) in ty.iter().enumerate() {
            let r0 = &src[ry.i0 * w..(ry.i0 + 1) * w];
            let r1 = &src[ry.i1 * w..(ry.i1 + 1) * w];
            for (ox, cx) in tx.iter().enumerate() {
                let top = cx.w0 * r0[cx.i0] + cx.w1 * r0[cx.i1];
                let bot = cx.w0 * r1[cx.i0] + cx.w1 * r1[cx.i1];
                dst[oy * ow + ox] = ry.w0 * top + ry.w1 * bot;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(dy: &[f64], planes: usize, hw: (usize, usize), ohw: (usize, usize), dx: &mut [f64]) {
    let (h, w) = hw;
    let (oh, ow) = ohw;
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, cx) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                d[ry.i0 * w + cx.i0] += ry.w0 * cx.w0 * v;
                d[ry.i0 * w + cx.i1] += ry.w0 * cx.w1 * v;
                d[ry.i1 * w + cx.i0] += ry.w1 * cx.w0 * v;
                d[ry.i1 * w + cx.i1] += ry.w1 * cx.w1 * v;
            }
        }
    }
}

/// Output shape of numpy-style broadcasting, or `None` when incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index of the broadcast source in `src`.
pub(crate) fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}
