//! Differentiable primitives: 3x3 convolution (im2col + gemm), ReLU,
//! global average pooling, dropout, and affine maps.
//!
//! Activations are `(batch, channels, height, width)` in f64. Convolutions
//! run per image so the patch matrix stays cache-resident; backward
//! recomputes it instead of saving batch-sized scratch. Each forward
//! returns whatever the matching backward needs; nothing hidden is cached.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2, Axis};

fn out_side(input: usize, stride: usize) -> usize {
    input.div_ceil(stride).max(1)
}

/// Patch matrix of one image plane stack: row `(c, ky, kx)`, column
/// `(out_y, out_x)`, 3x3 kernel with padding 1.
fn im2col_single(
    x: &[f64], // (c, h, w) contiguous
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    cols: &mut [f64], // (c*9, oh*ow) contiguous, pre-zeroed by caller
) {
    let oh = out_side(h, stride);
    let ow = out_side(w, stride);
    let row_len = oh * ow;
    for ci in 0..c {
        let src_plane = ci * h * w;
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * row_len;
                let ox_lo = if kx == 0 && stride == 1 { 1 } else { 0 };
                let ox_hi = (w + 1 - kx).div_ceil(stride).min(ow);
                for oy in 0..oh {
                    let sy = (oy * stride + ky) as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_base = row + oy * ow;
                    let src_base = src_plane + sy as usize * w;
                    if stride == 1 {
                        let src0 = (src_base + ox_lo + kx) - 1;
                        let len = ox_hi - ox_lo;
                        cols[dst_base + ox_lo..dst_base + ox_lo + len]
                            .copy_from_slice(&x[src0..src0 + len]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            let sx = (ox * stride + kx) as isize - 1;
                            if sx < 0 {
                                continue;
                            }
                            cols[dst_base + ox] = x[src_base + sx as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add transpose of [`im2col_single`].
fn col2im_single(
    dcols: &[f64], // (c*9, oh*ow)
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    dx: &mut [f64], // (c, h, w), accumulated into
) {
    let oh = out_side(h, stride);
    let ow = out_side(w, stride);
    let row_len = oh * ow;
    for ci in 0..c {
        let dst_plane = ci * h * w;
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * row_len;
                let ox_lo = if kx == 0 && stride == 1 { 1 } else { 0 };
                let ox_hi = (w + 1 - kx).div_ceil(stride).min(ow);
                for oy in 0..oh {
                    let sy = (oy * stride + ky) as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_base = row + oy * ow;
                    let dst_base = dst_plane + sy as usize * w;
                    if stride == 1 {
                        let dst0 = (dst_base + ox_lo + kx) - 1;
                        let len = ox_hi - ox_lo;
                        let src = &dcols[src_base + ox_lo..src_base + ox_lo + len];
                        let dst = &mut dx[dst0..dst0 + len];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            let sx = (ox * stride + kx) as isize - 1;
                            if sx < 0 {
                                continue;
                            }
                            dx[dst_base + sx as usize] += dcols[src_base + ox];
                        }
                    }
                }
            }
        }
    }
}

fn as_matrix_mut(
    view: ndarray::ArrayViewMut3<'_, f64>,
    rows: usize,
    cols: usize,
) -> ArrayViewMut2<'_, f64> {
    view.into_shape_with_order((rows, cols))
        .expect("contiguous activation block")
}

fn as_matrix(view: ndarray::ArrayView3<'_, f64>, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    view.into_shape_with_order((rows, cols))
        .expect("contiguous activation block")
}

/// 3x3 convolution, padding 1. `weight` is `(c_out, c_in * 9)`.
pub fn conv3x3_forward(x: &Array4<f64>, weight: &ArrayView2<f64>, stride: usize) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let oh = out_side(h, stride);
    let ow = out_side(w, stride);
    let c_out = weight.nrows();
    debug_assert_eq!(weight.ncols(), c * 9);

    let mut out = Array4::<f64>::zeros((b, c_out, oh, ow));
    let mut cols = Array2::<f64>::zeros((c * 9, oh * ow));
    let x_slice = x.as_slice().expect("standard layout");

    for bi in 0..b {
        cols.fill(0.0);
        im2col_single(
            &x_slice[bi * c * h * w..(bi + 1) * c * h * w],
            c,
            h,
            w,
            stride,
            cols.as_slice_mut().unwrap(),
        );
        let out_b = as_matrix_mut(out.index_axis_mut(Axis(0), bi), c_out, oh * ow);
        general_mat_mul(1.0, weight, &cols.view(), 0.0, &mut { out_b });
    }
    out
}

/// Backward of [`conv3x3_forward`] given the forward input: returns
/// `(d_input, d_weight)`. Patch matrices are rebuilt per image; they are
/// cheaper to recompute than to keep.
pub fn conv3x3_backward(
    dy: &Array4<f64>,
    weight: &ArrayView2<f64>,
    input: &Array4<f64>,
    stride: usize,
) -> (Array4<f64>, Array2<f64>) {
    let (b, c, h, w) = input.dim();
    let oh = out_side(h, stride);
    let ow = out_side(w, stride);
    let c_out = weight.nrows();
    debug_assert_eq!(dy.dim(), (b, c_out, oh, ow));

    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    let mut d_weight = Array2::<f64>::zeros((c_out, c * 9));
    let mut cols = Array2::<f64>::zeros((c * 9, oh * ow));
    let mut dcols = Array2::<f64>::zeros((c * 9, oh * ow));

    let x_slice = input.as_slice().expect("standard layout");
    let plane_len = c * h * w;

    for bi in 0..b {
        cols.fill(0.0);
        im2col_single(
            &x_slice[bi * plane_len..(bi + 1) * plane_len],
            c,
            h,
            w,
            stride,
            cols.as_slice_mut().unwrap(),
        );
        let dy_b = as_matrix(dy.index_axis(Axis(0), bi), c_out, oh * ow);
        // dW += dy_b . cols^T
        general_mat_mul(1.0, &dy_b, &cols.t(), 1.0, &mut d_weight.view_mut());
        // dcols = W^T . dy_b
        general_mat_mul(1.0, &weight.t(), &dy_b, 0.0, &mut dcols.view_mut());
        let dx_b = &mut dx.as_slice_mut().unwrap()[bi * plane_len..(bi + 1) * plane_len];
        col2im_single(dcols.as_slice().unwrap(), c, h, w, stride, dx_b);
    }

    (dx, d_weight)
}

/// Negative-side slope of the activation. A small leak keeps gradient
/// flowing through inactive units; with a hard zero, an aggressive early
/// step can kill every unit feeding the pooled feature and training cannot
/// recover (the embedding norm collapses to zero).
pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { v * LEAKY_SLOPE });
}

/// Backward against the *output* activation (the map preserves sign, so
/// `y > 0` if and only if the pre-activation was positive).
pub fn leaky_relu_backward(dy: &mut Array4<f64>, y: &Array4<f64>) {
    dy.zip_mut_with(y, |d, &o| {
        if o <= 0.0 {
            *d *= LEAKY_SLOPE;
        }
    });
}

/// Global average pool `(b, c, h, w) -> (b, c)`.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array2::<f64>::zeros((b, c));
    let xs = x.as_slice().expect("standard layout");
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            let acc: f64 = xs[base..base + h * w].iter().sum();
            out[(bi, ci)] = acc * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, spatial: (usize, usize)) -> Array4<f64> {
    let (b, c) = dy.dim();
    let (h, w) = spatial;
    let scale = 1.0 / (h * w) as f64;
    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            let g = dy[(bi, ci)] * scale;
            let base = (bi * c + ci) * h * w;
            for v in &mut dxs[base..base + h * w] {
                *v = g;
            }
        }
    }
    dx
}

/// Affine map `y = x . w (+ bias)`, `x: (b, f)`, `w: (f, d)`.
pub fn affine_forward(x: &Array2<f64>, w: &ArrayView2<f64>, bias: Option<&[f64]>) -> Array2<f64> {
    let mut y = x.dot(w);
    if let Some(bias) = bias {
        for mut row in y.rows_mut() {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }
    y
}

/// Backward of [`affine_forward`]: `(dx, dw, db)`.
pub fn affine_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    w: &ArrayView2<f64>,
    has_bias: bool,
) -> (Array2<f64>, Array2<f64>, Option<Vec<f64>>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = has_bias.then(|| dy.sum_axis(Axis(0)).to_vec());
    (dx, dw, db)
}
