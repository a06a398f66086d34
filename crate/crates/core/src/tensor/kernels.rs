//! Eager computational kernels. The tape records these; inference calls them
//! directly. Reductions run in a fixed index order so results are bit-stable.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{check_same_shape, NdArray, Precision};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

pub(crate) fn add(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    check_same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(NdArray::from_parts(a.shape().to_vec(), data))
}

pub(crate) fn sub(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    check_same_shape(a, b, "sub")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(NdArray::from_parts(a.shape().to_vec(), data))
}

pub(crate) fn mul(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    check_same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(NdArray::from_parts(a.shape().to_vec(), data))
}

pub(crate) fn scale(a: &NdArray, s: f64) -> NdArray {
    let data = a.data().iter().map(|x| x * s).collect();
    NdArray::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn add_scalar(a: &NdArray, s: f64) -> NdArray {
    let data = a.data().iter().map(|x| x + s).collect();
    NdArray::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn abs(a: &NdArray) -> NdArray {
    let data = a.data().iter().map(|x| x.abs()).collect();
    NdArray::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn sqrt(a: &NdArray) -> Result<NdArray> {
    if a.data().iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidArgument(
            "sqrt of negative value".to_string(),
        ));
    }
    let data = a.data().iter().map(|x| x.sqrt()).collect();
    Ok(NdArray::from_parts(a.shape().to_vec(), data))
}

pub(crate) fn leaky_relu(a: &NdArray, slope: f64) -> NdArray {
    let data = a
        .data()
        .iter()
        .map(|&x| if x >= 0.0 { x } else { slope * x })
        .collect();
    NdArray::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn clamp(a: &NdArray, lo: f64, hi: f64) -> Result<NdArray> {
    if !(lo <= hi) {
        return Err(Error::InvalidArgument(format!(
            "clamp bounds inverted: [{lo}, {hi}]"
        )));
    }
    let data = a.data().iter().map(|x| x.clamp(lo, hi)).collect();
    Ok(NdArray::from_parts(a.shape().to_vec(), data))
}

pub(crate) fn reshape(a: &NdArray, shape: &[usize]) -> Result<NdArray> {
    let n: usize = shape.iter().product();
    if n != a.len() {
        return Err(Error::ShapeMismatch(format!(
            "reshape {:?} -> {:?}",
            a.shape(),
            shape
        )));
    }
    Ok(NdArray::from_parts(shape.to_vec(), a.data().to_vec()))
}

// ---------------------------------------------------------------------------
// Reductions and vector ops
// ---------------------------------------------------------------------------

pub(crate) fn sum_all(a: &NdArray) -> NdArray {
    NdArray::scalar(a.data().iter().sum())
}

pub(crate) fn mean_all(a: &NdArray) -> Result<NdArray> {
    if a.is_empty() {
        return Err(Error::InvalidArgument("mean of empty array".to_string()));
    }
    Ok(NdArray::scalar(
        a.data().iter().sum::<f64>() / a.len() as f64,
    ))
}

pub(crate) fn concat_vecs(parts: &[&NdArray]) -> Result<NdArray> {
    let mut data = Vec::new();
    for p in parts {
        if p.shape().len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "concat_vecs wants 1-d parts, got {:?}",
                p.shape()
            )));
        }
        data.extend_from_slice(p.data());
    }
    let n = data.len();
    Ok(NdArray::from_parts(vec![n], data))
}

/// Cosine similarity of two flat vectors. Zero-norm inputs are an error,
/// never a NaN.
pub(crate) fn cosine_sim(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    check_same_shape(a, b, "cosine_sim")?;
    if a.shape().len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "cosine_sim wants flat vectors, got {:?}",
            a.shape()
        )));
    }
    let na = a.norm_l2();
    let nb = b.norm_l2();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument(
            "cosine similarity of zero-norm vector".to_string(),
        ));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok(NdArray::scalar(dot / (na * nb)))
}

// ---------------------------------------------------------------------------
// Channel-indexed ops on [C, H, W] images
// ---------------------------------------------------------------------------

pub(crate) fn chw(a: &NdArray, what: &str) -> Result<(usize, usize, usize)> {
    match a.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::ShapeMismatch(format!(
            "{what}: expected [C, H, W], got {other:?}"
        ))),
    }
}

/// Per-channel affine: `y[c] = g[c] * x[c] + b[c]`. Accepts plain or
/// batch-blocked images; the affine terms are shared across the batch.
pub(crate) fn channel_affine(x: &NdArray, g: &NdArray, b: &NdArray) -> Result<NdArray> {
    let (c, nb, h, w, _) = img_dims(x, "channel_affine")?;
    if g.shape() != [c] || b.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "channel_affine: {c} channels vs gain {:?}, bias {:?}",
            g.shape(),
            b.shape()
        )));
    }
    let block = nb * h * w;
    let mut data = vec![0.0; c * block];
    for ci in 0..c {
        let (gc, bc) = (g.data()[ci], b.data()[ci]);
        for i in 0..block {
            data[ci * block + i] = gc * x.data()[ci * block + i] + bc;
        }
    }
    Ok(NdArray::from_parts(x.shape().to_vec(), data))
}

/// Timestep conditioning: `y[c] = x[c] * (1 + ss[c]) + ss[C + c]`.
/// Batched images take one `[B, 2C]` row of scales and shifts per sample.
pub(crate) fn scale_shift(x: &NdArray, ss: &NdArray) -> Result<NdArray> {
    let (c, nb, h, w, batched) = img_dims(x, "scale_shift")?;
    let want: &[usize] = if batched { &[nb, 2 * c] } else { &[2 * c] };
    if ss.shape() != want {
        return Err(Error::ShapeMismatch(format!(
            "scale_shift: image {:?} vs ss {:?}",
            x.shape(),
            ss.shape()
        )));
    }
    let hw = h * w;
    let mut data = vec![0.0; c * nb * hw];
    for ci in 0..c {
        for bi in 0..nb {
            let row = bi * 2 * c;
            let (sc, tc) = (1.0 + ss.data()[row + ci], ss.data()[row + c + ci]);
            let off = (ci * nb + bi) * hw;
            for i in 0..hw {
                data[off + i] = sc * x.data()[off + i] + tc;
            }
        }
    }
    Ok(NdArray::from_parts(x.shape().to_vec(), data))
}

pub(crate) fn concat_channels(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    let (ca, nba, ha, wa, batched_a) = img_dims(a, "concat_channels lhs")?;
    let (cb, nbb, hb, wb, batched_b) = img_dims(b, "concat_channels rhs")?;
    if (nba, ha, wa, batched_a) != (nbb, hb, wb, batched_b) {
        return Err(Error::ShapeMismatch(format!(
            "concat_channels: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Ok(NdArray::from_parts(
        img_shape(ca + cb, nba, ha, wa, batched_a),
        data,
    ))
}

/// Add a row vector to every row of a matrix (dense-layer bias).
pub(crate) fn add_row(x: &NdArray, v: &NdArray) -> Result<NdArray> {
    let (r, cdim) = match x.shape() {
        [r, c] => (*r, *c),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "add_row expects a matrix, got {other:?}"
            )))
        }
    };
    if v.shape() != [cdim] {
        return Err(Error::ShapeMismatch(format!(
            "add_row: {cdim} columns vs vector {:?}",
            v.shape()
        )));
    }
    let mut data = vec![0.0; r * cdim];
    for ri in 0..r {
        for ci in 0..cdim {
            data[ri * cdim + ci] = x.data()[ri * cdim + ci] + v.data()[ci];
        }
    }
    Ok(NdArray::from_parts(vec![r, cdim], data))
}

pub(crate) fn channel_mean(x: &NdArray) -> Result<NdArray> {
    let (c, h, w) = chw(x, "channel_mean")?;
    let hw = (h * w) as f64;
    let data = (0..c)
        .map(|ci| x.data()[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / hw)
        .collect();
    Ok(NdArray::from_parts(vec![c], data))
}

/// Per-channel population standard deviation over the spatial grid.
pub(crate) fn channel_std(x: &NdArray) -> Result<NdArray> {
    let (c, h, w) = chw(x, "channel_std")?;
    let hw = h * w;
    let data = (0..c)
        .map(|ci| {
            let sl = &x.data()[ci * hw..(ci + 1) * hw];
            let mu = sl.iter().sum::<f64>() / hw as f64;
            let var = sl.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / hw as f64;
            var.max(0.0).sqrt()
        })
        .collect();
    Ok(NdArray::from_parts(vec![c], data))
}

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------

fn gemm_f64(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Vec<f64> {
    let (m, n) = (a.nrows(), b.ncols());
    let mut out = vec![0.0; m * n];
    {
        let c = ArrayViewMut2::from_shape((m, n), &mut out).expect("gemm out shape");
        let mut c = c;
        general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    }
    out
}

fn gemm_f32(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Vec<f32> {
    let (m, n) = (a.nrows(), b.ncols());
    let mut out = vec![0.0f32; m * n];
    {
        let c = ArrayViewMut2::from_shape((m, n), &mut out).expect("gemm out shape");
        let mut c = c;
        general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    }
    out
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `a[m,k] · b[k,n]`, optionally transposing either operand view.
pub(crate) fn matmul_t(
    a: &NdArray,
    ta: bool,
    b: &NdArray,
    tb: bool,
    prec: Precision,
) -> Result<NdArray> {
    let dims = |x: &NdArray| -> Result<(usize, usize)> {
        match x.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch(format!(
                "matmul expects 2-d, got {other:?}"
            ))),
        }
    };
    let (ar, ac) = dims(a)?;
    let (br, bc) = dims(b)?;
    let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims: {ka} vs {kb}"
        )));
    }
    let data = match prec {
        Precision::Full => {
            let av = ArrayView2::from_shape((ar, ac), a.data()).expect("matmul lhs");
            let bv = ArrayView2::from_shape((br, bc), b.data()).expect("matmul rhs");
            let av = if ta { av.reversed_axes() } else { av };
            let bv = if tb { bv.reversed_axes() } else { bv };
            gemm_f64(av, bv)
        }
        Precision::Reduced => {
            let a32 = to_f32(a.data());
            let b32 = to_f32(b.data());
            let av = ArrayView2::from_shape((ar, ac), &a32[..]).expect("matmul lhs");
            let bv = ArrayView2::from_shape((br, bc), &b32[..]).expect("matmul rhs");
            let av = if ta { av.reversed_axes() } else { av };
            let bv = if tb { bv.reversed_axes() } else { bv };
            to_f64(&gemm_f32(av, bv))
        }
    };
    Ok(NdArray::from_parts(vec![m, n], data))
}

pub(crate) fn matmul(a: &NdArray, b: &NdArray, prec: Precision) -> Result<NdArray> {
    matmul_t(a, false, b, false, prec)
}

// ---------------------------------------------------------------------------
// Convolution via im2col / col2im
// ---------------------------------------------------------------------------

/// Output side length of a convolution over one axis.
pub fn conv_out_side(side: usize, k: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - k) / stride + 1
}

struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    fn new(
        b: usize,
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = conv_out_side(h, kh, stride, pad);
        let ow = conv_out_side(w, kw, stride, pad);
        Ok(Self {
            b,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// GEMM columns: batch-blocked spatial positions.
    fn cols(&self) -> usize {
        self.b * self.oh * self.ow
    }
}

/// Inclusive output range `(o0, o1)` with `0 <= o*stride + k_off - pad < extent`.
fn kernel_range(
    extent: usize,
    out_extent: usize,
    k_off: usize,
    stride: usize,
    pad: usize,
) -> Option<(usize, usize)> {
    let lo = pad as isize - k_off as isize;
    let s = stride as isize;
    let o0 = if lo <= 0 { 0 } else { ((lo + s - 1) / s) as usize };
    let hi = extent as isize - 1 + pad as isize - k_off as isize;
    if hi < 0 {
        return None;
    }
    let o1 = ((hi / s) as usize).min(out_extent - 1);
    (o0 <= o1).then_some((o0, o1))
}

fn im2col<T: Copy + Default>(x: &[f64], g: &ConvGeom, cast: impl Fn(f64) -> T) -> Vec<T> {
    let mut col = vec![T::default(); g.rows() * g.cols()];
    let (ow, m) = (g.ow, g.oh * g.ow);
    for c in 0..g.c {
        for bb in 0..g.b {
            let plane_off = (c * g.b + bb) * g.h * g.w;
            let plane = &x[plane_off..plane_off + g.h * g.w];
            for i in 0..g.kh {
                let Some((oy0, oy1)) = kernel_range(g.h, g.oh, i, g.stride, g.pad) else {
                    continue;
                };
                for j in 0..g.kw {
                    let Some((ox0, ox1)) = kernel_range(g.w, g.ow, j, g.stride, g.pad) else {
                        continue;
                    };
                    let row = ((c * g.kh + i) * g.kw + j) * g.cols() + bb * m;
                    let len = ox1 - ox0 + 1;
                    for oy in oy0..=oy1 {
                        let y = oy * g.stride + i - g.pad;
                        let src0 = y * g.w + (ox0 * g.stride + j - g.pad);
                        let dst = &mut col[row + oy * ow + ox0..row + oy * ow + ox0 + len];
                        if g.stride == 1 {
                            for (d, &v) in dst.iter_mut().zip(&plane[src0..src0 + len]) {
                                *d = cast(v);
                            }
                        } else {
                            let mut src = src0;
                            for d in dst.iter_mut() {
                                *d = cast(plane[src]);
                                src += g.stride;
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Copy + Into<f64>>(col: &[T], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.b * g.c * g.h * g.w];
    let (ow, m) = (g.ow, g.oh * g.ow);
    for c in 0..g.c {
        for bb in 0..g.b {
            let plane_off = (c * g.b + bb) * g.h * g.w;
            let plane = &mut out[plane_off..plane_off + g.h * g.w];
            for i in 0..g.kh {
                let Some((oy0, oy1)) = kernel_range(g.h, g.oh, i, g.stride, g.pad) else {
                    continue;
                };
                for j in 0..g.kw {
                    let Some((ox0, ox1)) = kernel_range(g.w, g.ow, j, g.stride, g.pad) else {
                        continue;
                    };
                    let row = ((c * g.kh + i) * g.kw + j) * g.cols() + bb * m;
                    let len = ox1 - ox0 + 1;
                    for oy in oy0..=oy1 {
                        let y = oy * g.stride + i - g.pad;
                        let src = &col[row + oy * ow + ox0..row + oy * ow + ox0 + len];
                        let dst0 = y * g.w + (ox0 * g.stride + j - g.pad);
                        if g.stride == 1 {
                            for (d, &v) in plane[dst0..dst0 + len].iter_mut().zip(src) {
                                *d += v.into();
                            }
                        } else {
                            let mut dst = dst0;
                            for &v in src {
                                plane[dst] += v.into();
                                dst += g.stride;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cached im2col buffer carried from a conv forward to its backward.
pub(crate) enum ColBuf {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

/// Image operand: `[C, H, W]` or batch-blocked `[C, B, H, W]`.
pub(crate) fn img_dims(a: &NdArray, what: &str) -> Result<(usize, usize, usize, usize, bool)> {
    match a.shape() {
        [c, h, w] => Ok((*c, 1, *h, *w, false)),
        [c, b, h, w] => Ok((*c, *b, *h, *w, true)),
        other => Err(Error::ShapeMismatch(format!(
            "{what}: expected [C, H, W] or [C, B, H, W], got {other:?}"
        ))),
    }
}

fn img_shape(cout: usize, b: usize, oh: usize, ow: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![cout, b, oh, ow]
    } else {
        vec![cout, oh, ow]
    }
}

#[allow(clippy::type_complexity)]
fn conv_shapes(
    x: &NdArray,
    w: &NdArray,
    transposed: bool,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, bool)> {
    let (c, b, h, wid, batched) = img_dims(x, "conv input")?;
    let (wc0, wc1, kh, kw) = match w.shape() {
        [a, b, kh, kw] => (*a, *b, *kh, *kw),
        other => Err(Error::ShapeMismatch(format!(
            "conv weight expects 4-d, got {other:?}"
        )))?,
    };
    // conv weight is [O, C, kh, kw]; transposed-conv weight is [C, O, kh, kw]
    let (cin, cout) = if transposed { (wc0, wc1) } else { (wc1, wc0) };
    if cin != c {
        return Err(Error::ShapeMismatch(format!(
            "conv weight expects {cin} input channels, image has {c}"
        )));
    }
    Ok((b, c, h, wid, cout, kh, kw, batched))
}

fn check_bias(b: &NdArray, cout: usize) -> Result<()> {
    if b.shape() != [cout] {
        return Err(Error::ShapeMismatch(format!(
            "conv bias {:?} vs {cout} output channels",
            b.shape()
        )));
    }
    Ok(())
}

/// 2-d convolution: `x [C,H,W] * w [O,C,kh,kw] + b [O] -> [O,H',W']`.
/// `want_col` additionally returns the unfolded input for backward reuse.
pub(crate) fn conv2d_and_col(
    x: &NdArray,
    w: &NdArray,
    b: &NdArray,
    stride: usize,
    pad: usize,
    prec: Precision,
    want_col: bool,
) -> Result<(NdArray, Option<ColBuf>)> {
    let (nb, c, h, wid, cout, kh, kw, batched) = conv_shapes(x, w, false)?;
    check_bias(b, cout)?;
    let g = ConvGeom::new(nb, c, h, wid, kh, kw, stride, pad)?;
    let (rows, cols) = (g.rows(), g.cols());
    let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
    let (mut data, col) = match prec {
        Precision::Full => {
            // 1x1 stride-1 convs are a plain GEMM on the input itself.
            let owned;
            let col: &[f64] = if pointwise {
                x.data()
            } else {
                owned = im2col::<f64>(x.data(), &g, |v| v);
                &owned
            };
            let wv = ArrayView2::from_shape((cout, rows), w.data()).expect("conv weight");
            let cv = ArrayView2::from_shape((rows, cols), col).expect("conv col");
            let out = gemm_f64(wv, cv);
            (
                out,
                (want_col && !pointwise).then(|| ColBuf::F64(col.to_vec())),
            )
        }
        Precision::Reduced => {
            let col = if pointwise {
                to_f32(x.data())
            } else {
                im2col::<f32>(x.data(), &g, |v| v as f32)
            };
            let w32 = to_f32(w.data());
            let wv = ArrayView2::from_shape((cout, rows), &w32[..]).expect("conv weight");
            let cv = ArrayView2::from_shape((rows, cols), &col[..]).expect("conv col");
            (
                to_f64(&gemm_f32(wv, cv)),
                (want_col && !pointwise).then_some(ColBuf::F32(col)),
            )
        }
    };
    for o in 0..cout {
        let bo = b.data()[o];
        for v in &mut data[o * cols..(o + 1) * cols] {
            *v += bo;
        }
    }
    Ok((
        NdArray::from_parts(img_shape(cout, nb, g.oh, g.ow, batched), data),
        col,
    ))
}

pub(crate) fn conv2d(
    x: &NdArray,
    w: &NdArray,
    b: &NdArray,
    stride: usize,
    pad: usize,
    prec: Precision,
) -> Result<NdArray> {
    conv2d_and_col(x, w, b, stride, pad, prec, false).map(|(y, _)| y)
}

/// Gradients of [`conv2d`]. `dx`/`dw` are computed only when requested;
/// `cached_col` (from the forward pass) avoids re-unfolding the input.
pub(crate) fn conv2d_grads(
    x: &NdArray,
    w: &NdArray,
    dy: &NdArray,
    stride: usize,
    pad: usize,
    prec: Precision,
    cached_col: Option<&ColBuf>,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<NdArray>, Option<NdArray>, NdArray)> {
    let (nb, c, h, wid, cout, kh, kw, batched) = conv_shapes(x, w, false)?;
    let g = ConvGeom::new(nb, c, h, wid, kh, kw, stride, pad)?;
    let (rows, cols) = (g.rows(), g.cols());
    debug_assert_eq!(dy.shape(), &img_shape(cout, nb, g.oh, g.ow, batched)[..]);

    let db: Vec<f64> = (0..cout)
        .map(|o| dy.data()[o * cols..(o + 1) * cols].iter().sum())
        .collect();
    let db = NdArray::from_parts(vec![cout], db);

    let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
    let (dw, dx) = match prec {
        Precision::Full => {
            let dyv = ArrayView2::from_shape((cout, cols), dy.data()).expect("conv dy");
            let dw = if need_dw {
                let owned;
                let col: &[f64] = if pointwise {
                    x.data()
                } else {
                    match cached_col {
                        Some(ColBuf::F64(c)) => c,
                        _ => {
                            owned = im2col::<f64>(x.data(), &g, |v| v);
                            &owned
                        }
                    }
                };
                let cv = ArrayView2::from_shape((rows, cols), col).expect("conv col");
                Some(gemm_f64(dyv, cv.reversed_axes()))
            } else {
                None
            };
            let dx = if need_dx {
                let wv = ArrayView2::from_shape((cout, rows), w.data()).expect("conv weight");
                let dcol = gemm_f64(wv.reversed_axes(), dyv);
                Some(if pointwise { dcol } else { col2im(&dcol, &g) })
            } else {
                None
            };
            (dw, dx)
        }
        Precision::Reduced => {
            let dy32 = to_f32(dy.data());
            let dyv = ArrayView2::from_shape((cout, cols), &dy32[..]).expect("conv dy");
            let dw = if need_dw {
                let owned;
                let col: &[f32] = if pointwise {
                    owned = to_f32(x.data());
                    &owned
                } else {
                    match cached_col {
                        Some(ColBuf::F32(c)) => c,
                        _ => {
                            owned = im2col::<f32>(x.data(), &g, |v| v as f32);
                            &owned
                        }
                    }
                };
                let cv = ArrayView2::from_shape((rows, cols), col).expect("conv col");
                Some(to_f64(&gemm_f32(dyv, cv.reversed_axes())))
            } else {
                None
            };
            let dx = if need_dx {
                let w32 = to_f32(w.data());
                let wv = ArrayView2::from_shape((cout, rows), &w32[..]).expect("conv weight");
                let dcol = gemm_f32(wv.reversed_axes(), dyv);
                Some(if pointwise {
                    to_f64(&dcol)
                } else {
                    col2im(&dcol, &g)
                })
            } else {
                None
            };
            (dw, dx)
        }
    };
    Ok((
        dx.map(|d| NdArray::from_parts(img_shape(c, nb, h, wid, batched), d)),
        dw.map(|d| NdArray::from_parts(w.shape().to_vec(), d)),
        db,
    ))
}

/// Transposed 2-d convolution: `x [C,H,W] * w [C,O,kh,kw] + b [O]`.
///
/// Output spatial side is `(side-1)*stride + k - 2*pad`; the op is the adjoint
/// of [`conv2d`] with the same geometry.
pub(crate) fn conv2d_transpose(
    x: &NdArray,
    w: &NdArray,
    b: &NdArray,
    stride: usize,
    pad: usize,
    prec: Precision,
) -> Result<NdArray> {
    let (nb, c, h, wid, cout, kh, kw, batched) = conv_shapes(x, w, true)?;
    check_bias(b, cout)?;
    if (h - 1) * stride + kh < 2 * pad || (wid - 1) * stride + kw < 2 * pad {
        return Err(Error::ShapeMismatch(
            "transposed conv output would be empty".to_string(),
        ));
    }
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wid - 1) * stride + kw - 2 * pad;
    // Output grid plays the conv-input role in the shared col geometry.
    let g = ConvGeom::new(nb, cout, oh, ow, kh, kw, stride, pad)?;
    debug_assert_eq!((g.oh, g.ow), (h, wid));
    let (rows, cols) = (g.rows(), g.cols());

    let col = match prec {
        Precision::Full => {
            let wv = ArrayView2::from_shape((c, rows), w.data()).expect("tconv weight");
            let xv = ArrayView2::from_shape((c, cols), x.data()).expect("tconv input");
            gemm_f64(wv.reversed_axes(), xv)
        }
        Precision::Reduced => {
            let w32 = to_f32(w.data());
            let x32 = to_f32(x.data());
            let wv = ArrayView2::from_shape((c, rows), &w32[..]).expect("tconv weight");
            let xv = ArrayView2::from_shape((c, cols), &x32[..]).expect("tconv input");
            to_f64(&gemm_f32(wv.reversed_axes(), xv))
        }
    };
    let mut out = col2im(&col, &g);
    let plane = nb * oh * ow;
    for o in 0..cout {
        let bo = b.data()[o];
        for v in &mut out[o * plane..(o + 1) * plane] {
            *v += bo;
        }
    }
    Ok(NdArray::from_parts(img_shape(cout, nb, oh, ow, batched), out))
}

/// Gradients of [`conv2d_transpose`] w.r.t. input, weight, and bias.
pub(crate) fn conv2d_transpose_grads(
    x: &NdArray,
    w: &NdArray,
    dy: &NdArray,
    stride: usize,
    pad: usize,
    prec: Precision,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<NdArray>, Option<NdArray>, NdArray)> {
    let (nb, c, h, wid, cout, kh, kw, batched) = conv_shapes(x, w, true)?;
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wid - 1) * stride + kw - 2 * pad;
    let g = ConvGeom::new(nb, cout, oh, ow, kh, kw, stride, pad)?;
    let (rows, cols) = (g.rows(), g.cols());
    debug_assert_eq!(dy.shape(), &img_shape(cout, nb, oh, ow, batched)[..]);

    let plane = nb * oh * ow;
    let db: Vec<f64> = (0..cout)
        .map(|o| dy.data()[o * plane..(o + 1) * plane].iter().sum())
        .collect();
    let db = NdArray::from_parts(vec![cout], db);
    if !(need_dx || need_dw) {
        return Ok((None, None, db));
    }

    let (dx, dw) = match prec {
        Precision::Full => {
            let dcol = im2col::<f64>(dy.data(), &g, |v| v);
            let dcv = ArrayView2::from_shape((rows, cols), &dcol[..]).expect("tconv dcol");
            let dx = need_dx.then(|| {
                let wv = ArrayView2::from_shape((c, rows), w.data()).expect("tconv weight");
                gemm_f64(wv, dcv)
            });
            let dw = need_dw.then(|| {
                let xv = ArrayView2::from_shape((c, cols), x.data()).expect("tconv input");
                gemm_f64(xv, dcv.reversed_axes())
            });
            (dx, dw)
        }
        Precision::Reduced => {
            let dcol = im2col::<f32>(dy.data(), &g, |v| v as f32);
            let dcv = ArrayView2::from_shape((rows, cols), &dcol[..]).expect("tconv dcol");
            let dx = need_dx.then(|| {
                let w32 = to_f32(w.data());
                let wv = ArrayView2::from_shape((c, rows), &w32[..]).expect("tconv weight");
                to_f64(&gemm_f32(wv, dcv))
            });
            let dw = need_dw.then(|| {
                let x32 = to_f32(x.data());
                let xv = ArrayView2::from_shape((c, cols), &x32[..]).expect("tconv input");
                to_f64(&gemm_f32(xv, dcv.reversed_axes()))
            });
            (dx, dw)
        }
    };
    Ok((
        dx.map(|d| NdArray::from_parts(img_shape(c, nb, h, wid, batched), d)),
        dw.map(|d| NdArray::from_parts(w.shape().to_vec(), d)),
        db,
    ))
}

/// Stack per-sample `[C, H, W]` images into the batch-blocked `[C, B, H, W]`
/// layout the batched kernels consume.
pub fn stack_cbhw(images: &[&NdArray]) -> Result<NdArray> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty image batch".into()));
    }
    let (c, h, w) = chw(images[0], "stack_cbhw")?;
    let nb = images.len();
    let hw = h * w;
    let mut data = vec![0.0; c * nb * hw];
    for (bi, img) in images.iter().enumerate() {
        if img.shape() != images[0].shape() {
            return Err(Error::ShapeMismatch("stack_cbhw: ragged batch".into()));
        }
        for ci in 0..c {
            let dst = (ci * nb + bi) * hw;
            data[dst..dst + hw].copy_from_slice(&img.data()[ci * hw..(ci + 1) * hw]);
        }
    }
    Ok(NdArray::from_parts(vec![c, nb, h, w], data))
}
