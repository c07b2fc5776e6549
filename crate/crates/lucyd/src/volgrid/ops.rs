//! Raw compute kernels for 3D convolution and its adjoints, plus the small
//! set of shape ops the tape records.
//!
//! Convolutions are written as runs of contiguous-row AXPY / dot loops so
//! the inner loops auto-vectorize; padding is handled by clamping each
//! tap's valid output range instead of materializing a padded volume.

use super::{Kernel3d, Real, Volume};
use crate::error::{Error, Result};

/// Spatial padding policy for [`conv3d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pad {
    /// Zero padding sized so output spatial extent is `ceil(in / stride)`.
    /// Requires odd kernel extents so the window has a center voxel.
    SameZero,
    /// No padding; output extent is `(in - k) / stride + 1`.
    Valid,
}

fn out_extent(n: usize, k: usize, stride: usize, pad: Pad) -> Result<usize> {
    match pad {
        Pad::SameZero => Ok(n.div_ceil(stride)),
        Pad::Valid => {
            if k > n {
                return Err(Error::shape(format!(
                    "valid convolution: kernel extent {k} exceeds input extent {n}"
                )));
            }
            Ok((n - k) / stride + 1)
        }
    }
}

fn check_conv_args<T: Real>(input: &Volume<T>, kernel: &Kernel3d<T>, stride: usize, pad: Pad) -> Result<()> {
    if input.channels() != kernel.c_in() {
        return Err(Error::shape(format!(
            "convolution input has {} channels but kernel expects {}",
            input.channels(),
            kernel.c_in()
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::invalid(format!("convolution stride must be 1 or 2, got {stride}")));
    }
    if pad == Pad::SameZero && !kernel.is_odd() {
        return Err(Error::invalid(format!(
            "same-zero padding requires odd kernel extents, got {:?}",
            kernel.spatial()
        )));
    }
    Ok(())
}

/// Offsets subtracted from the tap coordinate: the kernel center for
/// same-zero padding, zero for valid.
fn pad_offsets<T: Real>(kernel: &Kernel3d<T>, pad: Pad) -> (isize, isize, isize) {
    let (kd, kh, kw) = kernel.spatial();
    match pad {
        Pad::SameZero => (((kd - 1) / 2) as isize, ((kh - 1) / 2) as isize, ((kw - 1) / 2) as isize),
        Pad::Valid => (0, 0, 0),
    }
}

/// Output columns `x0..x1` for which `x * stride + shift` lands inside
/// `0..w_in`.
#[inline]
fn col_range(ow: usize, w_in: usize, stride: usize, shift: isize) -> (usize, usize) {
    let x0 = if shift >= 0 { 0 } else { ((-shift) as usize).div_ceil(stride) };
    let top = w_in as isize - 1 - shift;
    if top < 0 {
        return (0, 0);
    }
    let x1 = (top as usize / stride + 1).min(ow);
    (x0.min(x1), x1)
}

/// Strided cross-correlation of a CDHW volume with a multi-channel kernel,
/// plus per-output-channel bias.
pub fn conv3d<T: Real>(input: &Volume<T>, kernel: &Kernel3d<T>, stride: usize, pad: Pad) -> Result<Volume<T>> {
    check_conv_args(input, kernel, stride, pad)?;
    let (c_in, d, h, w) = input.shape();
    let (c_out, _, kd, kh, kw) = kernel.shape();
    let od = out_extent(d, kd, stride, pad)?;
    let oh = out_extent(h, kh, stride, pad)?;
    let ow = out_extent(w, kw, stride, pad)?;
    let (cz, cy, cx) = pad_offsets(kernel, pad);

    let mut out = Volume::zeros(c_out, od, oh, ow);
    let mut acc = vec![T::zero(); ow];
    for co in 0..c_out {
        let bias = kernel.bias()[co];
        for oz in 0..od {
            for oy in 0..oh {
                acc.fill(bias);
                for ci in 0..c_in {
                    for dz in 0..kd {
                        let iz = (oz * stride + dz) as isize - cz;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for dy in 0..kh {
                            let iy = (oy * stride + dy) as isize - cy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = input.row(ci, iz as usize, iy as usize);
                            for dx in 0..kw {
                                let wgt = kernel.weights()[kernel.weight_index(co, ci, dz, dy, dx)];
                                let shift = dx as isize - cx;
                                let (x0, x1) = col_range(ow, w, stride, shift);
                                if x1 <= x0 {
                                    continue;
                                }
                                if stride == 1 {
                                    let src = &in_row[(x0 as isize + shift) as usize..(x1 as isize + shift) as usize];
                                    for (a, s) in acc[x0..x1].iter_mut().zip(src) {
                                        *a += wgt * *s;
                                    }
                                } else {
                                    for (ox, a) in acc.iter_mut().enumerate().take(x1).skip(x0) {
                                        *a += wgt * in_row[((ox * stride) as isize + shift) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                out.row_mut(co, oz, oy).copy_from_slice(&acc);
            }
        }
    }
    Ok(out)
}

/// Gradient of [`conv3d`] with respect to its input (transposed
/// correlation of the output gradient).
pub(crate) fn conv3d_backward_input<T: Real>(
    input_shape: (usize, usize, usize, usize),
    kernel: &Kernel3d<T>,
    stride: usize,
    pad: Pad,
    grad_out: &Volume<T>,
) -> Volume<T> {
    let (c_in, d, h, w) = input_shape;
    let (c_out, _, kd, kh, kw) = kernel.shape();
    let (_, od, oh, ow) = grad_out.shape();
    let (cz, cy, cx) = pad_offsets(kernel, pad);

    let mut grad_in = Volume::zeros(c_in, d, h, w);
    let gdata = grad_in.data_mut();
    for co in 0..c_out {
        for oz in 0..od {
            for oy in 0..oh {
                let g_row = grad_out.row(co, oz, oy);
                for ci in 0..c_in {
                    for dz in 0..kd {
                        let iz = (oz * stride + dz) as isize - cz;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for dy in 0..kh {
                            let iy = (oy * stride + dy) as isize - cy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = ((ci * d + iz as usize) * h + iy as usize) * w;
                            for dx in 0..kw {
                                let wgt = kernel.weights()[kernel.weight_index(co, ci, dz, dy, dx)];
                                let shift = dx as isize - cx;
                                let (x0, x1) = col_range(ow, w, stride, shift);
                                if x1 <= x0 {
                                    continue;
                                }
                                if stride == 1 {
                                    let dst = &mut gdata
                                        [base + (x0 as isize + shift) as usize..base + (x1 as isize + shift) as usize];
                                    for (t, g) in dst.iter_mut().zip(&g_row[x0..x1]) {
                                        *t += wgt * *g;
                                    }
                                } else {
                                    for (ox, g) in g_row.iter().enumerate().take(x1).skip(x0) {
                                        gdata[base + ((ox * stride) as isize + shift) as usize] += wgt * *g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradient of [`conv3d`] with respect to kernel weights and bias,
/// returned in kernel layout.
pub(crate) fn conv3d_backward_kernel<T: Real>(
    input: &Volume<T>,
    kernel: &Kernel3d<T>,
    stride: usize,
    pad: Pad,
    grad_out: &Volume<T>,
) -> Kernel3d<T> {
    let (c_in, d, h, w) = input.shape();
    let (c_out, _, kd, kh, kw) = kernel.shape();
    let (_, od, oh, ow) = grad_out.shape();
    let (cz, cy, cx) = pad_offsets(kernel, pad);

    let mut grad = Kernel3d::zeros(c_out, c_in, kd, kh, kw);
    for co in 0..c_out {
        let mut bias_acc = T::zero();
        for oz in 0..od {
            for oy in 0..oh {
                let g_row = grad_out.row(co, oz, oy);
                bias_acc += g_row.iter().copied().sum::<T>();
                for ci in 0..c_in {
                    for dz in 0..kd {
                        let iz = (oz * stride + dz) as isize - cz;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for dy in 0..kh {
                            let iy = (oy * stride + dy) as isize - cy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = input.row(ci, iz as usize, iy as usize);
                            for dx in 0..kw {
                                let shift = dx as isize - cx;
                                let (x0, x1) = col_range(ow, w, stride, shift);
                                if x1 <= x0 {
                                    continue;
                                }
                                let mut dot = T::zero();
                                if stride == 1 {
                                    let src = &in_row[(x0 as isize + shift) as usize..(x1 as isize + shift) as usize];
                                    for (g, s) in g_row[x0..x1].iter().zip(src) {
                                        dot += *g * *s;
                                    }
                                } else {
                                    for (ox, g) in g_row.iter().enumerate().take(x1).skip(x0) {
                                        dot += *g * in_row[((ox * stride) as isize + shift) as usize];
                                    }
                                }
                                let wi = grad.weight_index(co, ci, dz, dy, dx);
                                grad.weights_mut()[wi] += dot;
                            }
                        }
                    }
                }
            }
        }
        grad.bias_mut()[co] = bias_acc;
    }
    grad
}

/// Nearest-neighbor upsampling that doubles every spatial extent.
pub(crate) fn upsample_nearest2x<T: Real>(input: &Volume<T>) -> Volume<T> {
    let (c, d, h, w) = input.shape();
    let mut out = Volume::zeros(c, 2 * d, 2 * h, 2 * w);
    for ch in 0..c {
        for z in 0..2 * d {
            for y in 0..2 * h {
                let src = input.index_of(ch, z / 2, y / 2, 0);
                let src_row = &input.data()[src..src + w];
                let row = out.row_mut(ch, z, y);
                for (x, v) in row.iter_mut().enumerate() {
                    *v = src_row[x / 2];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest2x`]: each input voxel collects the
/// gradient of the 2x2x2 output block it was copied into.
pub(crate) fn upsample_nearest2x_backward<T: Real>(
    input_shape: (usize, usize, usize, usize),
    grad_out: &Volume<T>,
) -> Volume<T> {
    let (c, d, h, w) = input_shape;
    let mut grad_in = Volume::zeros(c, d, h, w);
    for ch in 0..c {
        for z in 0..2 * d {
            for y in 0..2 * h {
                let g_row = grad_out.row(ch, z, y);
                let dst = grad_in.index_of(ch, z / 2, y / 2, 0);
                let dst_row = &mut grad_in.data_mut()[dst..dst + w];
                for (x, g) in g_row.iter().enumerate() {
                    dst_row[x / 2] += *g;
                }
            }
        }
    }
    grad_in
}

/// Stacks two volumes along the channel axis; spatial extents must match.
pub(crate) fn concat_channels<T: Real>(a: &Volume<T>, b: &Volume<T>) -> Result<Volume<T>> {
    if a.spatial() != b.spatial() {
        return Err(Error::shape(format!(
            "channel concat requires equal spatial extents, got {:?} and {:?}",
            a.spatial(),
            b.spatial()
        )));
    }
    let (d, h, w) = a.spatial();
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Volume::from_vec(a.channels() + b.channels(), d, h, w, data)
}

/// Mean over the channel axis, producing a single-channel volume.
pub(crate) fn channel_mean<T: Real>(input: &Volume<T>) -> Volume<T> {
    let (c, d, h, w) = input.shape();
    let voxels = d * h * w;
    let mut out = Volume::zeros(1, d, h, w);
    let odata = out.data_mut();
    for ch in 0..c {
        let src = &input.data()[ch * voxels..(ch + 1) * voxels];
        for (o, s) in odata.iter_mut().zip(src) {
            *o += *s;
        }
    }
    let inv = T::one() / T::of(c as f64);
    for o in odata.iter_mut() {
        *o *= inv;
    }
    out
}

/// Mean over every element, accumulated in f64 so large volumes do not
/// lose precision to a single-precision running sum.
pub(crate) fn mean_all<T: Real>(input: &Volume<T>) -> Volume<T> {
    Volume::scalar(T::of(input.mean_f64()))
}
