//! Forward and backward kernels behind the tape operations.
//!
//! Every kernel here is a pure function over flat row-major buffers. The
//! tape stores whatever a backward kernel needs and calls these in reverse.

use crate::error::{Result, RtnError};
use crate::geom::BBox;

use super::grid::Grid;

/// `c = a * b + beta * c` with optional transposition of `a` and `b`.
///
/// `a` is `m x k` after transposition, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds are asserted above and the strides describe row-major
    // (or transposed row-major) matrices inside those bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn conv_geom(
    input: &[usize],
    kernel: &[usize],
    bias: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeom)> {
    let (n, c, h, w) = match *input {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(RtnError::Shape(format!("conv2d input must be rank 4, got {input:?}"))),
    };
    let (k, kc, kh, kw) = match *kernel {
        [k, kc, kh, kw] => (k, kc, kh, kw),
        _ => return Err(RtnError::Shape(format!("conv2d kernel must be rank 4, got {kernel:?}"))),
    };
    if kc != c {
        return Err(RtnError::Config(format!(
            "conv2d kernel expects {kc} input channels, input has {c}"
        )));
    }
    if bias != [k] {
        return Err(RtnError::Config(format!(
            "conv2d bias shape {bias:?} does not match {k} output channels"
        )));
    }
    if stride == 0 {
        return Err(RtnError::Config("conv2d stride must be positive".into()));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad || kh == 0 || kw == 0 {
        return Err(RtnError::Shape(format!(
            "kernel {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    Ok((
        n,
        k,
        ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        },
    ))
}

fn im2col(g: &ConvGeom, img: &[f64], col: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if y < 0 || y >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &img[(c * g.h + y as usize) * g.w..(c * g.h + y as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if x < 0 || x >= g.w as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], img: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + y as usize) * g.w;
                    for ox in 0..g.wo {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            img[base + x as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    input: &Grid,
    kernel: &Grid,
    bias: &Grid,
    stride: usize,
    pad: usize,
) -> Result<Grid> {
    let (n, k, g) = conv_geom(input.shape(), kernel.shape(), bias.shape(), stride, pad)?;
    let in_plane = g.c * g.h * g.w;
    let out_plane = k * g.ho * g.wo;
    let mut out = vec![0.0; n * out_plane];
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..n {
        let img = &input.values()[b * in_plane..(b + 1) * in_plane];
        let dst = &mut out[b * out_plane..(b + 1) * out_plane];
        for (ch, plane) in dst.chunks_mut(g.ho * g.wo).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias.values()[ch]);
        }
        im2col(&g, img, &mut col);
        gemm(k, g.col_rows(), g.col_cols(), kernel.values(), false, &col, false, 1.0, dst);
    }
    Grid::new(vec![n, k, g.ho, g.wo], out)
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub(crate) fn conv2d_backward(
    input: &Grid,
    kernel: &Grid,
    bias: &Grid,
    stride: usize,
    pad: usize,
    dout: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (n, k, g) = conv_geom(input.shape(), kernel.shape(), bias.shape(), stride, pad)?;
    let in_plane = g.c * g.h * g.w;
    let out_plane = k * g.ho * g.wo;
    let mut din = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; k];
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    let mut dcol = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..n {
        let img = &input.values()[b * in_plane..(b + 1) * in_plane];
        let dy = &dout[b * out_plane..(b + 1) * out_plane];
        for (ch, plane) in dy.chunks(g.ho * g.wo).enumerate() {
            db[ch] += plane.iter().sum::<f64>();
        }
        im2col(&g, img, &mut col);
        // dK[k, r] += dY[k, p] * col[r, p]
        gemm(k, g.col_cols(), g.col_rows(), dy, false, &col, true, 1.0, &mut dk);
        // dcol[r, p] = K[k, r]^T * dY[k, p]
        gemm(g.col_rows(), k, g.col_cols(), kernel.values(), true, dy, false, 0.0, &mut dcol);
        col2im(&g, &dcol, &mut din[b * in_plane..(b + 1) * in_plane]);
    }
    Ok((din, dk, db))
}

pub(crate) fn check_transposed(input: &[usize], kernel: &[usize], stride: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = match *input {
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(RtnError::Shape(format!(
                "transposed_conv2d input must be rank 4, got {input:?}"
            )))
        }
    };
    if stride == 0 {
        return Err(RtnError::Config("transposed_conv2d stride must be positive".into()));
    }
    match *kernel {
        [kc, co, kh, kw] if kc == c && kh == stride && kw == stride => Ok((n, c, co, h, w)),
        _ => Err(RtnError::Config(format!(
            "transposed_conv2d kernel {kernel:?} must be [{c}, out, {stride}, {stride}]"
        ))),
    }
}

pub(crate) fn transposed_conv2d_forward(input: &Grid, kernel: &Grid, stride: usize) -> Result<Grid> {
    let (n, ci, co, h, w) = check_transposed(input.shape(), kernel.shape(), stride)?;
    let s = stride;
    let hw = h * w;
    let rows = co * s * s;
    let mut tmp = vec![0.0; rows * hw];
    let (ho, wo) = (h * s, w * s);
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        let x = &input.values()[b * ci * hw..(b + 1) * ci * hw];
        gemm(rows, ci, hw, kernel.values(), true, x, false, 0.0, &mut tmp);
        let dst = &mut out[b * co * ho * wo..(b + 1) * co * ho * wo];
        for o in 0..co {
            for a in 0..s {
                for bb in 0..s {
                    let r = (o * s + a) * s + bb;
                    for y in 0..h {
                        for xx in 0..w {
                            dst[(o * ho + y * s + a) * wo + xx * s + bb] = tmp[r * hw + y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Grid::new(vec![n, co, ho, wo], out)
}

pub(crate) fn transposed_conv2d_backward(
    input: &Grid,
    kernel: &Grid,
    stride: usize,
    dout: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, ci, co, h, w) = check_transposed(input.shape(), kernel.shape(), stride)?;
    let s = stride;
    let hw = h * w;
    let rows = co * s * s;
    let (ho, wo) = (h * s, w * s);
    let mut dtmp = vec![0.0; rows * hw];
    let mut din = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    for b in 0..n {
        let dy = &dout[b * co * ho * wo..(b + 1) * co * ho * wo];
        for o in 0..co {
            for a in 0..s {
                for bb in 0..s {
                    let r = (o * s + a) * s + bb;
                    for y in 0..h {
                        for xx in 0..w {
                            dtmp[r * hw + y * w + xx] = dy[(o * ho + y * s + a) * wo + xx * s + bb];
                        }
                    }
                }
            }
        }
        let x = &input.values()[b * ci * hw..(b + 1) * ci * hw];
        // dK[ci, r] += x[ci, p] * dtmp[r, p]
        gemm(ci, hw, rows, x, false, &dtmp, true, 1.0, &mut dk);
        // dx[ci, p] = K[ci, r] * dtmp[r, p]
        gemm(ci, rows, hw, kernel.values(), false, &dtmp, false, 0.0, &mut din[b * ci * hw..(b + 1) * ci * hw]);
    }
    Ok((din, dk))
}

/// Parameters of one direction of the width-wise recurrence.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RnnDir<'a> {
    /// `[hidden, channels]`
    pub wx: &'a [f64],
    /// `[hidden, hidden]`
    pub wh: &'a [f64],
    /// `[hidden]`
    pub b: &'a [f64],
}

/// Channels-last copy of a `[N, C, H, W]` buffer: `[N, H, W, C]`.
fn to_nhwc(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for t in 0..w {
                    out[((b * h + y) * w + t) * c + ch] = x[((b * c + ch) * h + y) * w + t];
                }
            }
        }
    }
    out
}

/// Bidirectional tanh recurrence along the width axis.
///
/// Output `[N, 2*hidden, H, W]`: forward states in the first `hidden`
/// channels, backward states in the rest.
pub(crate) fn birnn_forward(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    hidden: usize,
    fwd: RnnDir<'_>,
    bwd: RnnDir<'_>,
) -> Vec<f64> {
    let (n, c, h, w) = dims;
    let xt = to_nhwc(x, n, c, h, w);
    let oc = 2 * hidden;
    let mut out = vec![0.0; n * oc * h * w];
    let mut state = vec![0.0; hidden];
    let mut pre = vec![0.0; hidden];
    for (d, dir) in [fwd, bwd].into_iter().enumerate() {
        for b in 0..n {
            for y in 0..h {
                state.iter_mut().for_each(|v| *v = 0.0);
                for step in 0..w {
                    let t = if d == 0 { step } else { w - 1 - step };
                    let xv = &xt[((b * h + y) * w + t) * c..((b * h + y) * w + t + 1) * c];
                    for j in 0..hidden {
                        let mut acc = dir.b[j];
                        let wxr = &dir.wx[j * c..(j + 1) * c];
                        for (a, bv) in wxr.iter().zip(xv) {
                            acc += a * bv;
                        }
                        let whr = &dir.wh[j * hidden..(j + 1) * hidden];
                        for (a, bv) in whr.iter().zip(state.iter()) {
                            acc += a * bv;
                        }
                        pre[j] = acc;
                    }
                    for j in 0..hidden {
                        state[j] = pre[j].tanh();
                        out[((b * oc + d * hidden + j) * h + y) * w + t] = state[j];
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct RnnDirGrads {
    pub wx: Vec<f64>,
    pub wh: Vec<f64>,
    pub b: Vec<f64>,
}

/// Backpropagation through time for [`birnn_forward`]. Returns the input
/// gradient and per-direction parameter gradients.
pub(crate) fn birnn_backward(
    x: &[f64],
    out: &[f64],
    dims: (usize, usize, usize, usize),
    hidden: usize,
    dirs: [RnnDir<'_>; 2],
    dout: &[f64],
) -> (Vec<f64>, [RnnDirGrads; 2]) {
    let (n, c, h, w) = dims;
    let xt = to_nhwc(x, n, c, h, w);
    let oc = 2 * hidden;
    let mut dxt = vec![0.0; xt.len()];
    let mut grads = [0, 1].map(|_| RnnDirGrads {
        wx: vec![0.0; hidden * c],
        wh: vec![0.0; hidden * hidden],
        b: vec![0.0; hidden],
    });
    let mut dh_next = vec![0.0; hidden];
    let mut da = vec![0.0; hidden];
    let mut hprev = vec![0.0; hidden];
    for (d, dir) in dirs.iter().enumerate() {
        let g = &mut grads[d];
        for b in 0..n {
            for y in 0..h {
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                for step in (0..w).rev() {
                    let t = if d == 0 { step } else { w - 1 - step };
                    let idx = |j: usize, tt: usize| ((b * oc + d * hidden + j) * h + y) * w + tt;
                    for j in 0..hidden {
                        let hv = out[idx(j, t)];
                        let dh = dout[idx(j, t)] + dh_next[j];
                        da[j] = dh * (1.0 - hv * hv);
                    }
                    if step > 0 {
                        let tp = if d == 0 { t - 1 } else { t + 1 };
                        for j in 0..hidden {
                            hprev[j] = out[idx(j, tp)];
                        }
                    } else {
                        hprev.iter_mut().for_each(|v| *v = 0.0);
                    }
                    let base = ((b * h + y) * w + t) * c;
                    let xv = &xt[base..base + c];
                    let dxv = &mut dxt[base..base + c];
                    for j in 0..hidden {
                        let a = da[j];
                        if a == 0.0 {
                            continue;
                        }
                        g.b[j] += a;
                        let gwx = &mut g.wx[j * c..(j + 1) * c];
                        for (gv, xvv) in gwx.iter_mut().zip(xv) {
                            *gv += a * xvv;
                        }
                        let gwh = &mut g.wh[j * hidden..(j + 1) * hidden];
                        for (gv, hv) in gwh.iter_mut().zip(hprev.iter()) {
                            *gv += a * hv;
                        }
                        let wxr = &dir.wx[j * c..(j + 1) * c];
                        for (dv, wv) in dxv.iter_mut().zip(wxr) {
                            *dv += a * wv;
                        }
                    }
                    for (k, dn) in dh_next.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for j in 0..hidden {
                            acc += dir.wh[j * hidden + k] * da[j];
                        }
                        *dn = acc;
                    }
                }
            }
        }
    }
    // back to NCHW
    let mut dx = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for t in 0..w {
                    dx[((b * c + ch) * h + y) * w + t] = dxt[((b * h + y) * w + t) * c + ch];
                }
            }
        }
    }
    (dx, grads)
}

/// Cell index ranges covered by each of `bins` equal bins of `[start, end)`.
pub(crate) fn bin_ranges(start: f64, end: f64, bins: usize, limit: usize) -> Vec<(usize, usize)> {
    let width = (end - start) / bins as f64;
    (0..bins)
        .map(|i| {
            let s = start + i as f64 * width;
            let e = start + (i + 1) as f64 * width;
            let lo = (s.floor().max(0.0) as usize).min(limit - 1);
            let hi = (e.ceil() as isize).clamp(lo as isize + 1, limit as isize) as usize;
            (lo, hi)
        })
        .collect()
}

/// Max pooling of each region (in feature-cell coordinates) to `bins x bins`.
/// Returns the pooled values `[R, C, bins, bins]` and, for every output
/// element, the flat input index that produced it.
pub(crate) fn roi_max_pool(
    input: &Grid,
    regions: &[BBox],
    bins: usize,
) -> Result<(Grid, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if n != 1 {
        return Err(RtnError::Shape(format!(
            "region pooling expects a single feature map, got batch {n}"
        )));
    }
    let mut values = Vec::with_capacity(regions.len() * c * bins * bins);
    let mut argmax = Vec::with_capacity(values.capacity());
    for r in regions {
        if !(r.x1 > r.x0 && r.y1 > r.y0) || !r.is_valid() {
            return Err(RtnError::DegenerateRegion(format!("{r:?}")));
        }
        let xs = bin_ranges(r.x0, r.x1, bins, w);
        let ys = bin_ranges(r.y0, r.y1, bins, h);
        for ch in 0..c {
            for &(y0, y1) in &ys {
                for &(x0, x1) in &xs {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let idx = (ch * h + y) * w + x;
                            let v = input.values()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    values.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((Grid::new(vec![regions.len(), c, bins, bins], values)?, argmax))
}

/// `y[r, o] = sum_d x[r, d] * w[o, d] + b[o]`
pub(crate) fn linear_forward(x: &Grid, weight: &Grid, bias: &Grid) -> Result<Grid> {
    let rows = *x.shape().first().ok_or_else(|| RtnError::Shape("linear input must have a batch axis".into()))?;
    let d = x.len().checked_div(rows).unwrap_or(0);
    let (o, wd) = match *weight.shape() {
        [o, wd] => (o, wd),
        _ => return Err(RtnError::Shape(format!("linear weight must be rank 2, got {:?}", weight.shape()))),
    };
    if wd != d || bias.shape() != [o] {
        return Err(RtnError::Config(format!(
            "linear layer {:?}/{:?} cannot consume rows of width {d}",
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = Vec::with_capacity(rows * o);
    for _ in 0..rows {
        out.extend_from_slice(bias.values());
    }
    gemm(rows, d, o, x.values(), false, weight.values(), true, 1.0, &mut out);
    Grid::new(vec![rows, o], out)
}

pub(crate) fn linear_backward(
    x: &Grid,
    weight: &Grid,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.shape()[0];
    let d = x.len().checked_div(rows).unwrap_or(0);
    let o = weight.shape()[0];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; o];
    gemm(rows, o, d, dout, false, weight.values(), false, 0.0, &mut dx);
    gemm(o, rows, d, dout, true, x.values(), false, 0.0, &mut dw);
    for r in 0..rows {
        for (j, g) in db.iter_mut().enumerate() {
            *g += dout[r * o + j];
        }
    }
    (dx, dw, db)
}
