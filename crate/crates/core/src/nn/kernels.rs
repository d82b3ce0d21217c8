//! Dense array kernels backing the graph ops.
//!
//! Convolutions lower to im2col plus one matrix product per image, so the
//! inner loops here only move data; the arithmetic happens inside `ndarray`'s
//! gemm. All spatial ops use square kernels and symmetric padding, which is
//! all the network needs.

use ndarray::{s, Array2, Array3, ArrayView3, Axis};

use super::Tensor;

/// Output length of a convolution along one axis (floor division).
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Output length of a transposed convolution along one axis.
pub fn convt_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len - 1) * stride + k - 2 * pad
}

/// Valid output-column range `[lo, hi)` for which `ow*stride + kj - pad`
/// falls inside `[0, w)`.
fn col_range(w: usize, k_off: usize, stride: usize, pad: usize, ow: usize) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    let max_iw = w as isize - 1 + pad as isize - k_off as isize;
    let hi = if max_iw < 0 {
        0
    } else {
        ((max_iw as usize) / stride + 1).min(ow)
    };
    (lo, hi.max(lo))
}

/// Unfolds one image `[C, H, W]` into a `[C*K*K, OH*OW]` patch matrix.
/// Out-of-bounds taps read as zero.
pub fn im2col(
    x: ArrayView3<'_, f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((c_in * k * k, oh * ow));
    let xs = x.as_slice().expect("im2col input must be contiguous");
    let cols = col.as_slice_mut().unwrap();
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let row = &mut cols[r * oh * ow..(r + 1) * oh * ow];
                let (lo, hi) = col_range(w, kj, stride, pad, ow);
                for o_h in 0..oh {
                    let ih = (o_h * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src_base = (c * h + ih as usize) * w;
                    let dst = &mut row[o_h * ow..o_h * ow + ow];
                    if stride == 1 && hi > lo {
                        let start = src_base + lo + kj - pad;
                        dst[lo..hi].copy_from_slice(&xs[start..start + (hi - lo)]);
                    } else {
                        for (o_w, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = xs[src_base + o_w * stride + kj - pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Folds a `[C*K*K, OH*OW]` patch matrix back into an image `[C, H, W]`,
/// accumulating where patches overlap. Adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    col: &Array2<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut x = Array3::<f64>::zeros((c_in, h, w));
    let xs = x.as_slice_mut().unwrap();
    let cols = col.as_slice().expect("col2im input must be contiguous");
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let row = &cols[r * oh * ow..(r + 1) * oh * ow];
                let (lo, hi) = col_range(w, kj, stride, pad, ow);
                for o_h in 0..oh {
                    let ih = (o_h * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_base = (c * h + ih as usize) * w;
                    let src = &row[o_h * ow..o_h * ow + ow];
                    for (o_w, v) in src.iter().enumerate().take(hi).skip(lo) {
                        xs[dst_base + o_w * stride + kj - pad] += v;
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution. `x` is `[N, IC, H, W]`, `w` is `[OC, IC, K, K]`, `b` is
/// `[1, OC, 1, 1]` if present.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, ic, h, w_in) = x.dim();
    let (oc, ic_w, kh, kw) = w.dim();
    assert_eq!(ic, ic_w, "conv2d channel mismatch");
    assert_eq!(kh, kw, "conv2d expects square kernels");
    let k = kh;
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w_in, k, stride, pad);
    let w_mat = w
        .view()
        .into_shape_with_order((oc, ic * k * k))
        .expect("conv weights must be contiguous");
    let mut y = Tensor::zeros((n, oc, oh, ow));
    for i in 0..n {
        let col = im2col(x.index_axis(Axis(0), i), k, stride, pad, oh, ow);
        let out = w_mat.dot(&col);
        y.index_axis_mut(Axis(0), i)
            .assign(&out.into_shape_with_order((oc, oh, ow)).unwrap());
    }
    if let Some(b) = b {
        add_channel_bias(&mut y, b);
    }
    y
}

/// Gradients of [`conv2d_forward`] with respect to input, weights, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (n, ic, h, w_in) = x.dim();
    let (oc, _, k, _) = w.dim();
    let (_, _, oh, ow) = dy.dim();
    let w_mat = w.view().into_shape_with_order((oc, ic * k * k)).unwrap();
    let mut dw_mat = Array2::<f64>::zeros((oc, ic * k * k));
    let mut dx = Tensor::zeros(x.dim());
    for i in 0..n {
        let dy_mat = dy
            .index_axis(Axis(0), i)
            .into_shape_with_order((oc, oh * ow))
            .unwrap();
        let dcol = w_mat.t().dot(&dy_mat);
        dx.index_axis_mut(Axis(0), i)
            .assign(&col2im(&dcol, ic, h, w_in, k, stride, pad, oh, ow));
        let col = im2col(x.index_axis(Axis(0), i), k, stride, pad, oh, ow);
        dw_mat = dw_mat + dy_mat.dot(&col.t());
    }
    let dw = dw_mat.into_shape_with_order((oc, ic, k, k)).unwrap();
    let db = need_bias.then(|| channel_sum(dy));
    (dx, dw, db)
}

/// 2-D transposed convolution (the adjoint of a stride-`s` convolution).
/// `x` is `[N, IC, H, W]`, `w` is `[IC, OC, K, K]`.
pub fn conv_transpose2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, ic, h, w_in) = x.dim();
    let (ic_w, oc, kh, kw) = w.dim();
    assert_eq!(ic, ic_w, "conv_transpose2d channel mismatch");
    assert_eq!(kh, kw, "conv_transpose2d expects square kernels");
    let k = kh;
    let oh = convt_out_len(h, k, stride, pad);
    let ow = convt_out_len(w_in, k, stride, pad);
    let w_mat = w.view().into_shape_with_order((ic, oc * k * k)).unwrap();
    let mut y = Tensor::zeros((n, oc, oh, ow));
    for i in 0..n {
        let x_mat = x
            .index_axis(Axis(0), i)
            .into_shape_with_order((ic, h * w_in))
            .unwrap();
        let col = w_mat.t().dot(&x_mat);
        y.index_axis_mut(Axis(0), i)
            .assign(&col2im(&col, oc, oh, ow, k, stride, pad, h, w_in));
    }
    if let Some(b) = b {
        add_channel_bias(&mut y, b);
    }
    y
}

/// Gradients of [`conv_transpose2d_forward`].
pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (n, ic, h, w_in) = x.dim();
    let (_, oc, k, _) = w.dim();
    let w_mat = w.view().into_shape_with_order((ic, oc * k * k)).unwrap();
    let mut dw_mat = Array2::<f64>::zeros((ic, oc * k * k));
    let mut dx = Tensor::zeros(x.dim());
    for i in 0..n {
        let dy_col = im2col(dy.index_axis(Axis(0), i), k, stride, pad, h, w_in);
        let dx_mat = w_mat.dot(&dy_col);
        dx.index_axis_mut(Axis(0), i)
            .assign(&dx_mat.into_shape_with_order((ic, h, w_in)).unwrap());
        let x_mat = x
            .index_axis(Axis(0), i)
            .into_shape_with_order((ic, h * w_in))
            .unwrap();
        dw_mat = dw_mat + x_mat.dot(&dy_col.t());
    }
    let dw = dw_mat.into_shape_with_order((ic, oc, k, k)).unwrap();
    let db = need_bias.then(|| channel_sum(dy));
    (dx, dw, db)
}

/// Adds a `[1, C, 1, 1]` bias in place.
pub fn add_channel_bias(y: &mut Tensor, b: &Tensor) {
    let (_, c, _, _) = y.dim();
    assert_eq!(b.dim(), (1, c, 1, 1), "bias shape mismatch");
    for ch in 0..c {
        let bv = b[[0, ch, 0, 0]];
        y.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| v + bv);
    }
}

/// Sums over batch and spatial axes, returning `[1, C, 1, 1]`.
pub fn channel_sum(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dim();
    let mut out = Tensor::zeros((1, c, 1, 1));
    for ch in 0..c {
        let mut acc = 0.0;
        for i in 0..n {
            acc += x.slice(s![i, ch, .., ..]).sum();
        }
        let _ = (h, w);
        out[[0, ch, 0, 0]] = acc;
    }
    out
}

/// Per-channel mean and biased variance over batch and spatial axes,
/// each returned as `[1, C, 1, 1]`.
pub fn channel_mean_var(x: &Tensor) -> (Tensor, Tensor) {
    let (n, c, h, w) = x.dim();
    let count = (n * h * w) as f64;
    let mut mean = Tensor::zeros((1, c, 1, 1));
    let mut var = Tensor::zeros((1, c, 1, 1));
    for ch in 0..c {
        let mut sum = 0.0;
        for i in 0..n {
            sum += x.slice(s![i, ch, .., ..]).sum();
        }
        let m = sum / count;
        let mut sq = 0.0;
        for i in 0..n {
            sq += x
                .slice(s![i, ch, .., ..])
                .fold(0.0, |acc, &v| acc + (v - m) * (v - m));
        }
        mean[[0, ch, 0, 0]] = m;
        var[[0, ch, 0, 0]] = sq / count;
    }
    (mean, var)
}

/// Sample positions for one axis of a bilinear resize with half-pixel
/// centers: output index `i` reads `frac`-weighted inputs `idx0[i]`/`idx1[i]`.
pub struct ResizeAxis {
    pub idx0: Vec<usize>,
    pub idx1: Vec<usize>,
    pub frac: Vec<f64>,
}

/// Builds the half-pixel sampling plan mapping `out_len` positions onto
/// `in_len` inputs.
pub fn resize_axis(in_len: usize, out_len: usize) -> ResizeAxis {
    let scale = in_len as f64 / out_len as f64;
    let mut idx0 = Vec::with_capacity(out_len);
    let mut idx1 = Vec::with_capacity(out_len);
    let mut frac = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        idx0.push(i0);
        idx1.push(i1);
        frac.push(if i1 > i0 { src - i0 as f64 } else { 0.0 });
    }
    ResizeAxis { idx0, idx1, frac }
}

/// Bilinear resize to `(oh, ow)` with half-pixel centers.
pub fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = x.dim();
    if (oh, ow) == (h, w) {
        return x.clone();
    }
    let ya = resize_axis(h, oh);
    let xa = resize_axis(w, ow);
    let mut y = Tensor::zeros((n, c, oh, ow));
    for i in 0..n {
        for ch in 0..c {
            let src = x.slice(s![i, ch, .., ..]);
            let mut dst = y.slice_mut(s![i, ch, .., ..]);
            for r in 0..oh {
                let (r0, r1, ty) = (ya.idx0[r], ya.idx1[r], ya.frac[r]);
                for col in 0..ow {
                    let (c0, c1, tx) = (xa.idx0[col], xa.idx1[col], xa.frac[col]);
                    let top = src[[r0, c0]] * (1.0 - tx) + src[[r0, c1]] * tx;
                    let bot = src[[r1, c0]] * (1.0 - tx) + src[[r1, c1]] * tx;
                    dst[[r, col]] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
    }
    y
}

/// Adjoint of [`bilinear_resize`]: scatters output gradients back onto the
/// `(h, w)` input grid.
pub fn bilinear_resize_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, oh, ow) = dy.dim();
    if (oh, ow) == (h, w) {
        return dy.clone();
    }
    let ya = resize_axis(h, oh);
    let xa = resize_axis(w, ow);
    let mut dx = Tensor::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let src = dy.slice(s![i, ch, .., ..]);
            let mut dst = dx.slice_mut(s![i, ch, .., ..]);
            for r in 0..oh {
                let (r0, r1, ty) = (ya.idx0[r], ya.idx1[r], ya.frac[r]);
                for col in 0..ow {
                    let (c0, c1, tx) = (xa.idx0[col], xa.idx1[col], xa.frac[col]);
                    let g = src[[r, col]];
                    dst[[r0, c0]] += g * (1.0 - ty) * (1.0 - tx);
                    dst[[r0, c1]] += g * (1.0 - ty) * tx;
                    dst[[r1, c0]] += g * ty * (1.0 - tx);
                    dst[[r1, c1]] += g * ty * tx;
                }
            }
        }
    }
    dx
}

/// Channel-wise softmax: each `(n, h, w)` column sums to one.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dim();
    let mut y = x.clone();
    for i in 0..n {
        for r in 0..h {
            for col in 0..w {
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(y[[i, ch, r, col]]);
                }
                let mut sum = 0.0;
                for ch in 0..c {
                    let e = (y[[i, ch, r, col]] - max).exp();
                    y[[i, ch, r, col]] = e;
                    sum += e;
                }
                for ch in 0..c {
                    y[[i, ch, r, col]] /= sum;
                }
            }
        }
    }
    y
}
