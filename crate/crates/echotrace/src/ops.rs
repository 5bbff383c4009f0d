//! Grid operations and their reverse-mode gradients.
//!
//! Shape conventions:
//! - activations: (batch, channels, rows, cols)
//! - `conv2d` kernels: (out_channels, in_channels, kh, kw), bias (1, out_channels, 1, 1)
//! - `tconv2d` kernels: (in_channels, out_channels, kh, kw), no bias
//!
//! `conv2d` computes cross-correlation (kernels are not flipped).
//! `tconv2d` is the exact adjoint of the matching strided `conv2d`, which the
//! gradient code relies on.

use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};
use crate::scalar::Scalar;

pub fn conv2d_out_shape(x: Shape, kernel: Shape, pad: usize, stride: usize) -> Result<Shape> {
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be >= 1"));
    }
    if kernel.channels != x.channels {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels but kernel expects {}",
                x.channels, kernel.channels
            ),
        ));
    }
    let (kh, kw) = (kernel.rows, kernel.cols);
    let (ext_r, ext_c) = (x.rows + 2 * pad, x.cols + 2 * pad);
    if ext_r < kh || ext_c < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {ext_r}x{ext_c}"),
        ));
    }
    if (ext_r - kh) % stride != 0 || (ext_c - kw) % stride != 0 {
        return Err(Error::shape(
            "conv2d",
            format!(
                "stride {stride} does not evenly tile padded extent {ext_r}x{ext_c} with kernel {kh}x{kw}"
            ),
        ));
    }
    Ok(Shape::new(
        x.batch,
        kernel.batch,
        (ext_r - kh) / stride + 1,
        (ext_c - kw) / stride + 1,
    ))
}

fn check_bias(kernel: Shape, bias: Shape) -> Result<()> {
    let want = Shape::new(1, kernel.batch, 1, 1);
    if bias != want {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {bias} does not match kernel out channels ({want})"),
        ));
    }
    Ok(())
}

/// Column range of output positions j with 0 <= j*stride + v - pad < limit.
#[inline]
fn out_range(v: usize, pad: usize, stride: usize, limit: usize, out_len: usize) -> (usize, usize) {
    let lo = if v >= pad {
        0
    } else {
        (pad - v + stride - 1) / stride
    };
    let max_src = limit + pad;
    let hi = if v >= max_src {
        0
    } else {
        ((max_src - 1 - v) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

pub fn conv2d<T: Scalar>(
    x: &Grid<T>,
    kernel: &Grid<T>,
    bias: &Grid<T>,
    pad: usize,
    stride: usize,
) -> Result<Grid<T>> {
    let out_shape = conv2d_out_shape(x.shape(), kernel.shape(), pad, stride)?;
    check_bias(kernel.shape(), bias.shape())?;
    let (xs, ks) = (x.shape(), kernel.shape());
    let mut out = Grid::zeros(out_shape);
    for b in 0..xs.batch {
        for oc in 0..ks.batch {
            let bval = bias.data()[oc];
            let op = out.plane_mut(b, oc);
            for v in op.iter_mut() {
                *v = bval;
            }
            for ic in 0..ks.channels {
                let xp = x.plane(b, ic);
                let kp = kernel.plane(oc, ic);
                for i in 0..out_shape.rows {
                    let orow = i * out_shape.cols;
                    for u in 0..ks.rows {
                        let y = (i * stride + u) as isize - pad as isize;
                        if y < 0 || y as usize >= xs.rows {
                            continue;
                        }
                        let xrow = &xp[(y as usize) * xs.cols..(y as usize + 1) * xs.cols];
                        let krow = &kp[u * ks.cols..(u + 1) * ks.cols];
                        for (v, &kv) in krow.iter().enumerate() {
                            let (j0, j1) = out_range(v, pad, stride, xs.cols, out_shape.cols);
                            for j in j0..j1 {
                                op[orow + j] += kv * xrow[j * stride + v - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct Conv2dGrads<T> {
    pub x: Grid<T>,
    pub kernel: Grid<T>,
    pub bias: Grid<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Grid<T>,
    kernel: &Grid<T>,
    pad: usize,
    stride: usize,
    grad_out: &Grid<T>,
) -> Result<Conv2dGrads<T>> {
    let out_shape = conv2d_out_shape(x.shape(), kernel.shape(), pad, stride)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad shape {} vs expected {}", grad_out.shape(), out_shape),
        ));
    }
    let (xs, ks) = (x.shape(), kernel.shape());
    let mut dx = Grid::zeros(xs);
    let mut dk = Grid::zeros(ks);
    let mut db = Grid::zeros(Shape::new(1, ks.batch, 1, 1));
    for b in 0..xs.batch {
        for oc in 0..ks.batch {
            let gp = grad_out.plane(b, oc);
            db.data_mut()[oc] += gp.iter().copied().sum();
            for ic in 0..ks.channels {
                let xp = x.plane(b, ic);
                let kp = kernel.plane(oc, ic);
                let dxp = dx.plane_mut(b, ic);
                let dkp = dk.plane_mut(oc, ic);
                for i in 0..out_shape.rows {
                    let grow = &gp[i * out_shape.cols..(i + 1) * out_shape.cols];
                    for u in 0..ks.rows {
                        let y = (i * stride + u) as isize - pad as isize;
                        if y < 0 || y as usize >= xs.rows {
                            continue;
                        }
                        let y = y as usize;
                        let xrow_base = y * xs.cols;
                        for v in 0..ks.cols {
                            let (j0, j1) = out_range(v, pad, stride, xs.cols, out_shape.cols);
                            let kv = kp[u * ks.cols + v];
                            let mut acc = T::zero();
                            for j in j0..j1 {
                                let g = grow[j];
                                let src = xrow_base + j * stride + v - pad;
                                acc += g * xp[src];
                                dxp[src] += kv * g;
                            }
                            dkp[u * ks.cols + v] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(Conv2dGrads {
        x: dx,
        kernel: dk,
        bias: db,
    })
}

const TCONV_STRIDES: [usize; 4] = [2, 4, 8, 16];

pub fn tconv2d_out_shape(x: Shape, kernel: Shape, stride: usize) -> Result<Shape> {
    if !TCONV_STRIDES.contains(&stride) {
        return Err(Error::shape(
            "tconv2d",
            format!("stride {stride} not in {TCONV_STRIDES:?}"),
        ));
    }
    if kernel.rows != 2 * stride || kernel.cols != 2 * stride {
        return Err(Error::shape(
            "tconv2d",
            format!(
                "kernel {}x{} must be 2*stride = {} square",
                kernel.rows,
                kernel.cols,
                2 * stride
            ),
        ));
    }
    if kernel.batch != x.channels {
        return Err(Error::shape(
            "tconv2d",
            format!(
                "input has {} channels but kernel expects {}",
                x.channels, kernel.batch
            ),
        ));
    }
    Ok(Shape::new(
        x.batch,
        kernel.channels,
        stride * x.rows + stride,
        stride * x.cols + stride,
    ))
}

pub fn tconv2d<T: Scalar>(x: &Grid<T>, kernel: &Grid<T>, stride: usize) -> Result<Grid<T>> {
    let out_shape = tconv2d_out_shape(x.shape(), kernel.shape(), stride)?;
    let (xs, ks) = (x.shape(), kernel.shape());
    let mut out = Grid::zeros(out_shape);
    for b in 0..xs.batch {
        for ic in 0..xs.channels {
            let xp = x.plane(b, ic);
            for oc in 0..ks.channels {
                let kp = kernel.plane(ic, oc);
                let op = out.plane_mut(b, oc);
                for p in 0..xs.rows {
                    for q in 0..xs.cols {
                        let xv = xp[p * xs.cols + q];
                        let (r0, c0) = (stride * p, stride * q);
                        for u in 0..ks.rows {
                            let orow = &mut op
                                [(r0 + u) * out_shape.cols + c0..(r0 + u) * out_shape.cols + c0 + ks.cols];
                            let krow = &kp[u * ks.cols..(u + 1) * ks.cols];
                            for (o, &kv) in orow.iter_mut().zip(krow) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct TConv2dGrads<T> {
    pub x: Grid<T>,
    pub kernel: Grid<T>,
}

pub fn tconv2d_backward<T: Scalar>(
    x: &Grid<T>,
    kernel: &Grid<T>,
    stride: usize,
    grad_out: &Grid<T>,
) -> Result<TConv2dGrads<T>> {
    let out_shape = tconv2d_out_shape(x.shape(), kernel.shape(), stride)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape(
            "tconv2d_backward",
            format!("grad shape {} vs expected {}", grad_out.shape(), out_shape),
        ));
    }
    let (xs, ks) = (x.shape(), kernel.shape());
    let mut dx = Grid::zeros(xs);
    let mut dk = Grid::zeros(ks);
    for b in 0..xs.batch {
        for ic in 0..xs.channels {
            let xp = x.plane(b, ic);
            let dxp = dx.plane_mut(b, ic);
            for oc in 0..ks.channels {
                let kp = kernel.plane(ic, oc);
                let gp = grad_out.plane(b, oc);
                let dkp = dk.plane_mut(ic, oc);
                for p in 0..xs.rows {
                    for q in 0..xs.cols {
                        let xv = xp[p * xs.cols + q];
                        let (r0, c0) = (stride * p, stride * q);
                        let mut acc = T::zero();
                        for u in 0..ks.rows {
                            let grow =
                                &gp[(r0 + u) * out_shape.cols + c0..(r0 + u) * out_shape.cols + c0 + ks.cols];
                            let krow = &kp[u * ks.cols..(u + 1) * ks.cols];
                            let dkrow = &mut dkp[u * ks.cols..(u + 1) * ks.cols];
                            for v in 0..ks.cols {
                                acc += krow[v] * grow[v];
                                dkrow[v] += xv * grow[v];
                            }
                        }
                        dxp[p * xs.cols + q] += acc;
                    }
                }
            }
        }
    }
    Ok(TConv2dGrads { x: dx, kernel: dk })
}

pub fn maxpool2_out_shape(x: Shape) -> Result<Shape> {
    if x.rows % 2 != 0 || x.cols % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("rows and cols must be even, got {}x{}", x.rows, x.cols),
        ));
    }
    Ok(Shape::new(x.batch, x.channels, x.rows / 2, x.cols / 2))
}

/// 2x2 stride-2 max pooling. Returns the pooled grid and, per output
/// element, the flat index of its source (ties go to the first element in
/// row-major window order).
pub fn maxpool2<T: Scalar>(x: &Grid<T>) -> Result<(Grid<T>, Vec<u32>)> {
    let out_shape = maxpool2_out_shape(x.shape())?;
    let xs = x.shape();
    let mut out = Grid::zeros(out_shape);
    let mut argmax = vec![0u32; out_shape.len()];
    let mut oi = 0usize;
    for b in 0..xs.batch {
        for c in 0..xs.channels {
            let xp = x.plane(b, c);
            let base = (b * xs.channels + c) * xs.plane_len();
            let op = out.plane_mut(b, c);
            for i in 0..out_shape.rows {
                for j in 0..out_shape.cols {
                    let (r0, c0) = (2 * i, 2 * j);
                    let mut best = xp[r0 * xs.cols + c0];
                    let mut best_at = r0 * xs.cols + c0;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let at = (r0 + dr) * xs.cols + c0 + dc;
                        if xp[at] > best {
                            best = xp[at];
                            best_at = at;
                        }
                    }
                    op[i * out_shape.cols + j] = best;
                    argmax[oi] = (base + best_at) as u32;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward<T: Scalar>(
    in_shape: Shape,
    argmax: &[u32],
    grad_out: &Grid<T>,
) -> Result<Grid<T>> {
    if argmax.len() != grad_out.shape().len() {
        return Err(Error::shape(
            "maxpool2_backward",
            "argmax length does not match grad shape",
        ));
    }
    let mut dx = Grid::zeros(in_shape);
    for (&at, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[at as usize] += g;
    }
    Ok(dx)
}

/// NaN passes through rather than flushing to zero, so a poisoned value
/// upstream still surfaces in the loss instead of being silently clipped.
pub fn relu<T: Scalar>(x: &Grid<T>) -> Grid<T> {
    x.map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() })
}

/// Gradient of relu uses the input sign; the subgradient at exactly 0 is 0.
pub fn relu_backward<T: Scalar>(x: &Grid<T>, grad_out: &Grid<T>) -> Grid<T> {
    let mut dx = grad_out.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

pub fn sigmoid<T: Scalar>(x: &Grid<T>) -> Grid<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Takes the forward output `y`, not the input: dy/dx = y(1-y).
pub fn sigmoid_backward<T: Scalar>(y: &Grid<T>, grad_out: &Grid<T>) -> Grid<T> {
    let mut dx = grad_out.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        *d = *d * v * (T::one() - v);
    }
    dx
}

pub fn crop_center_out_shape(x: Shape, rows: usize, cols: usize) -> Result<Shape> {
    if rows > x.rows || cols > x.cols {
        return Err(Error::shape(
            "crop_center",
            format!("target {rows}x{cols} exceeds input {}x{}", x.rows, x.cols),
        ));
    }
    Ok(Shape::new(x.batch, x.channels, rows, cols))
}

/// Offsets are floor((in - out) / 2) on each axis.
pub fn crop_center<T: Scalar>(x: &Grid<T>, rows: usize, cols: usize) -> Result<Grid<T>> {
    let out_shape = crop_center_out_shape(x.shape(), rows, cols)?;
    let xs = x.shape();
    let (or, oc) = ((xs.rows - rows) / 2, (xs.cols - cols) / 2);
    let mut out = Grid::zeros(out_shape);
    for b in 0..xs.batch {
        for c in 0..xs.channels {
            let xp = x.plane(b, c);
            let op = out.plane_mut(b, c);
            for i in 0..rows {
                let src = &xp[(i + or) * xs.cols + oc..(i + or) * xs.cols + oc + cols];
                op[i * cols..(i + 1) * cols].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

pub fn crop_center_backward<T: Scalar>(in_shape: Shape, grad_out: &Grid<T>) -> Result<Grid<T>> {
    let gs = grad_out.shape();
    crop_center_out_shape(in_shape, gs.rows, gs.cols)?;
    let (or, oc) = ((in_shape.rows - gs.rows) / 2, (in_shape.cols - gs.cols) / 2);
    let mut dx = Grid::zeros(in_shape);
    for b in 0..gs.batch {
        for c in 0..gs.channels {
            let gp = grad_out.plane(b, c);
            let dp = dx.plane_mut(b, c);
            for i in 0..gs.rows {
                let dst = &mut dp[(i + or) * in_shape.cols + oc..(i + or) * in_shape.cols + oc + gs.cols];
                dst.copy_from_slice(&gp[i * gs.cols..(i + 1) * gs.cols]);
            }
        }
    }
    Ok(dx)
}

pub fn concat_out_shape(parts: &[Shape]) -> Result<Shape> {
    let first = *parts.first().ok_or_else(|| {
        Error::shape("concat_channels", "needs at least one input")
    })?;
    let mut channels = 0;
    for s in parts {
        if s.batch != first.batch || s.rows != first.rows || s.cols != first.cols {
            return Err(Error::shape(
                "concat_channels",
                format!("part {s} does not match {first} on batch/rows/cols"),
            ));
        }
        channels += s.channels;
    }
    Ok(Shape::new(first.batch, channels, first.rows, first.cols))
}

pub fn concat_channels<T: Scalar>(parts: &[&Grid<T>]) -> Result<Grid<T>> {
    let shapes: Vec<Shape> = parts.iter().map(|p| p.shape()).collect();
    let out_shape = concat_out_shape(&shapes)?;
    let mut out = Grid::zeros(out_shape);
    for b in 0..out_shape.batch {
        let mut c_off = 0;
        for part in parts {
            for c in 0..part.shape().channels {
                out.plane_mut(b, c_off + c).copy_from_slice(part.plane(b, c));
            }
            c_off += part.shape().channels;
        }
    }
    Ok(out)
}

/// Splits the concat gradient back into per-part gradients.
pub fn concat_backward<T: Scalar>(parts: &[Shape], grad_out: &Grid<T>) -> Result<Vec<Grid<T>>> {
    let out_shape = concat_out_shape(parts)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape(
            "concat_backward",
            format!("grad shape {} vs expected {}", grad_out.shape(), out_shape),
        ));
    }
    let mut grads: Vec<Grid<T>> = parts.iter().map(|&s| Grid::zeros(s)).collect();
    for b in 0..out_shape.batch {
        let mut c_off = 0;
        for (pi, &s) in parts.iter().enumerate() {
            for c in 0..s.channels {
                grads[pi]
                    .plane_mut(b, c)
                    .copy_from_slice(grad_out.plane(b, c_off + c));
            }
            c_off += s.channels;
        }
    }
    Ok(grads)
}

pub fn add<T: Scalar>(a: &Grid<T>, b: &Grid<T>) -> Result<Grid<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{} vs {}", a.shape(), b.shape()),
        ));
    }
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}
