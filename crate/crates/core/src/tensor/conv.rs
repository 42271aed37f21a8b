//! Raw compute kernels for the spatial ops: 3D convolution, transpose
//! convolution, max pooling, and batch normalization.
//!
//! All kernels iterate in a fixed order per output element, so results are
//! bitwise identical regardless of thread count. Parallelism is only over
//! disjoint output slabs.

use super::Scalar;
use rayon::prelude::*;

/// Dimensions of a batched volume feature map.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub n: usize,
    pub c: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Dims {
    pub fn spatial(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.spatial()
    }
}

/// Padding for a kernel extent: symmetric for odd extents, zero for the
/// even extents used by stride-2 transpose kernels.
#[inline]
pub(crate) fn same_pad(k: usize) -> usize {
    (k - 1) / 2
}

#[inline]
pub(crate) fn conv_out_extent(input: usize, k: usize, stride: usize) -> usize {
    (input + 2 * same_pad(k) - k) / stride + 1
}

#[inline]
pub(crate) fn conv_transpose_out_extent(input: usize, k: usize, stride: usize) -> usize {
    (input - 1) * stride + k - 2 * same_pad(k)
}

/// out_row[range] += w * in_row[range + shift], clipped to valid indices.
#[inline]
fn axpy_shifted_z<T: Scalar>(out_row: &mut [T], in_row: &[T], w: T, dz: isize) {
    let zlen = out_row.len() as isize;
    let lo = 0.max(-dz) as usize;
    let hi = (zlen.min(zlen - dz)) as usize;
    if lo >= hi {
        return;
    }
    let src = &in_row[(lo as isize + dz) as usize..(hi as isize + dz) as usize];
    let dst = &mut out_row[lo..hi];
    for (o, i) in dst.iter_mut().zip(src) {
        *o = *o + w * *i;
    }
}

/// Stride-1 "same"-padded accumulation of one (kernel offset, weight) pair
/// over a full channel slab.
fn accumulate_shifted<T: Scalar>(
    out_ch: &mut [T],
    in_ch: &[T],
    w: T,
    d: Dims,
    dx: isize,
    dy: isize,
    dz: isize,
) {
    let (xe, ye, ze) = (d.x as isize, d.y as isize, d.z as isize);
    let x_lo = 0.max(-dx);
    let x_hi = xe.min(xe - dx);
    let y_lo = 0.max(-dy);
    let y_hi = ye.min(ye - dy);
    for ox in x_lo..x_hi {
        let ix = ox + dx;
        for oy in y_lo..y_hi {
            let iy = oy + dy;
            let out_base = ((ox * ye + oy) * ze) as usize;
            let in_base = ((ix * ye + iy) * ze) as usize;
            axpy_shifted_z(
                &mut out_ch[out_base..out_base + d.z],
                &in_ch[in_base..in_base + d.z],
                w,
                dz,
            );
        }
    }
}

/// Forward 3D convolution (cross-correlation), zero padding `(k-1)/2`.
///
/// `kernel` has shape (out_ch, in_ch, kx, ky, kz); `input` is (n, in_ch,
/// x, y, z) flattened. Returns the (n, out_ch, ox, oy, oz) output.
pub(crate) fn conv3d_forward<T: Scalar>(
    input: &[T],
    din: Dims,
    kernel: &[T],
    kdims: [usize; 5],
    bias: Option<&[T]>,
    stride: usize,
) -> (Vec<T>, Dims) {
    let [oc, ic, kx, ky, kz] = kdims;
    debug_assert_eq!(ic, din.c);
    let dout = Dims {
        n: din.n,
        c: oc,
        x: conv_out_extent(din.x, kx, stride),
        y: conv_out_extent(din.y, ky, stride),
        z: conv_out_extent(din.z, kz, stride),
    };
    let out_spatial = dout.spatial();
    let in_spatial = din.spatial();
    let mut out = vec![T::zero(); dout.numel()];

    out.par_chunks_mut(out_spatial)
        .enumerate()
        .for_each(|(slab, out_ch)| {
            let n = slab / oc;
            let o = slab % oc;
            if let Some(b) = bias {
                out_ch.fill(b[o]);
            }
            let in_batch = &input[n * din.c * in_spatial..(n + 1) * din.c * in_spatial];
            for i in 0..ic {
                let in_ch = &in_batch[i * in_spatial..(i + 1) * in_spatial];
                let kbase = ((o * ic + i) * kx * ky) * kz;
                if stride == 1 {
                    let (px, py, pz) = (same_pad(kx), same_pad(ky), same_pad(kz));
                    for a in 0..kx {
                        for b2 in 0..ky {
                            for c in 0..kz {
                                let w = kernel[kbase + (a * ky + b2) * kz + c];
                                accumulate_shifted(
                                    out_ch,
                                    in_ch,
                                    w,
                                    din,
                                    a as isize - px as isize,
                                    b2 as isize - py as isize,
                                    c as isize - pz as isize,
                                );
                            }
                        }
                    }
                } else {
                    conv_generic_gather(
                        out_ch, in_ch, kernel, kbase, din, dout, [kx, ky, kz], stride,
                    );
                }
            }
        });
    (out, dout)
}

/// Generic strided gather used for stride > 1 convolutions.
#[allow(clippy::too_many_arguments)]
fn conv_generic_gather<T: Scalar>(
    out_ch: &mut [T],
    in_ch: &[T],
    kernel: &[T],
    kbase: usize,
    din: Dims,
    dout: Dims,
    k: [usize; 3],
    stride: usize,
) {
    let [kx, ky, kz] = k;
    let (px, py, pz) = (
        same_pad(kx) as isize,
        same_pad(ky) as isize,
        same_pad(kz) as isize,
    );
    for ox in 0..dout.x {
        for oy in 0..dout.y {
            for oz in 0..dout.z {
                let mut acc = T::zero();
                for a in 0..kx {
                    let ix = (ox * stride + a) as isize - px;
                    if ix < 0 || ix >= din.x as isize {
                        continue;
                    }
                    for b in 0..ky {
                        let iy = (oy * stride + b) as isize - py;
                        if iy < 0 || iy >= din.y as isize {
                            continue;
                        }
                        for c in 0..kz {
                            let iz = (oz * stride + c) as isize - pz;
                            if iz < 0 || iz >= din.z as isize {
                                continue;
                            }
                            let w = kernel[kbase + (a * ky + b) * kz + c];
                            let idx = ((ix as usize) * din.y + iy as usize) * din.z + iz as usize;
                            acc = acc + w * in_ch[idx];
                        }
                    }
                }
                let oidx = (ox * dout.y + oy) * dout.z + oz;
                out_ch[oidx] = out_ch[oidx] + acc;
            }
        }
    }
}

/// Gradient of conv3d with respect to its input.
pub(crate) fn conv3d_backward_input<T: Scalar>(
    d_out: &[T],
    dout: Dims,
    kernel: &[T],
    kdims: [usize; 5],
    din: Dims,
    stride: usize,
) -> Vec<T> {
    let [oc, ic, kx, ky, kz] = kdims;
    let in_spatial = din.spatial();
    let out_spatial = dout.spatial();
    let mut d_in = vec![T::zero(); din.numel()];
    let (px, py, pz) = (
        same_pad(kx) as isize,
        same_pad(ky) as isize,
        same_pad(kz) as isize,
    );

    d_in.par_chunks_mut(in_spatial)
        .enumerate()
        .for_each(|(slab, din_ch)| {
            let n = slab / ic;
            let i = slab % ic;
            let dout_batch = &d_out[n * oc * out_spatial..(n + 1) * oc * out_spatial];
            for o in 0..oc {
                let dout_ch = &dout_batch[o * out_spatial..(o + 1) * out_spatial];
                let kbase = ((o * ic + i) * kx * ky) * kz;
                if stride == 1 {
                    // d_in[pos] += w * d_out[pos - offset]: the mirrored shift.
                    for a in 0..kx {
                        for b in 0..ky {
                            for c in 0..kz {
                                let w = kernel[kbase + (a * ky + b) * kz + c];
                                accumulate_shifted(
                                    din_ch,
                                    dout_ch,
                                    w,
                                    din,
                                    px - a as isize,
                                    py - b as isize,
                                    pz - c as isize,
                                );
                            }
                        }
                    }
                } else {
                    for ox in 0..dout.x {
                        for oy in 0..dout.y {
                            for oz in 0..dout.z {
                                let g = dout_ch[(ox * dout.y + oy) * dout.z + oz];
                                for a in 0..kx {
                                    let ix = (ox * stride + a) as isize - px;
                                    if ix < 0 || ix >= din.x as isize {
                                        continue;
                                    }
                                    for b in 0..ky {
                                        let iy = (oy * stride + b) as isize - py;
                                        if iy < 0 || iy >= din.y as isize {
                                            continue;
                                        }
                                        for c in 0..kz {
                                            let iz = (oz * stride + c) as isize - pz;
                                            if iz < 0 || iz >= din.z as isize {
                                                continue;
                                            }
                                            let w = kernel[kbase + (a * ky + b) * kz + c];
                                            let idx = ((ix as usize) * din.y + iy as usize)
                                                * din.z
                                                + iz as usize;
                                            din_ch[idx] = din_ch[idx] + w * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    d_in
}

/// Gradient of conv3d with respect to its kernel.
pub(crate) fn conv3d_backward_kernel<T: Scalar>(
    d_out: &[T],
    dout: Dims,
    input: &[T],
    din: Dims,
    kdims: [usize; 5],
    stride: usize,
) -> Vec<T> {
    let [oc, ic, kx, ky, kz] = kdims;
    let in_spatial = din.spatial();
    let out_spatial = dout.spatial();
    let ksize = ic * kx * ky * kz;
    let mut d_k = vec![T::zero(); oc * ksize];
    let (px, py, pz) = (
        same_pad(kx) as isize,
        same_pad(ky) as isize,
        same_pad(kz) as isize,
    );

    d_k.par_chunks_mut(ksize).enumerate().for_each(|(o, dk_o)| {
        for n in 0..din.n {
            let dout_ch = &d_out[(n * oc + o) * out_spatial..(n * oc + o + 1) * out_spatial];
            for i in 0..ic {
                let in_ch = &input[(n * ic + i) * in_spatial..(n * ic + i + 1) * in_spatial];
                for a in 0..kx {
                    for b in 0..ky {
                        for c in 0..kz {
                            let mut acc = T::zero();
                            if stride == 1 {
                                let dx = a as isize - px;
                                let dy = b as isize - py;
                                let dz = c as isize - pz;
                                let x_lo = 0.max(-dx);
                                let x_hi = (din.x as isize).min(din.x as isize - dx);
                                let y_lo = 0.max(-dy);
                                let y_hi = (din.y as isize).min(din.y as isize - dy);
                                let z_lo = 0.max(-dz) as usize;
                                let z_hi = ((din.z as isize).min(din.z as isize - dz)) as usize;
                                for ox in x_lo..x_hi {
                                    for oy in y_lo..y_hi {
                                        let ob =
                                            ((ox * din.y as isize + oy) * din.z as isize) as usize;
                                        let ib = (((ox + dx) * din.y as isize + (oy + dy))
                                            * din.z as isize)
                                            as usize;
                                        if z_lo < z_hi {
                                            let go = &dout_ch[ob + z_lo..ob + z_hi];
                                            let xi = &in_ch[(ib as isize + dz) as usize + z_lo
                                                ..(ib as isize + dz) as usize + z_hi];
                                            for (g, v) in go.iter().zip(xi) {
                                                acc = acc + *g * *v;
                                            }
                                        }
                                    }
                                }
                            } else {
                                for ox in 0..dout.x {
                                    let ix = (ox * stride + a) as isize - px;
                                    if ix < 0 || ix >= din.x as isize {
                                        continue;
                                    }
                                    for oy in 0..dout.y {
                                        let iy = (oy * stride + b) as isize - py;
                                        if iy < 0 || iy >= din.y as isize {
                                            continue;
                                        }
                                        for oz in 0..dout.z {
                                            let iz = (oz * stride + c) as isize - pz;
                                            if iz < 0 || iz >= din.z as isize {
                                                continue;
                                            }
                                            let g = dout_ch[(ox * dout.y + oy) * dout.z + oz];
                                            let v = in_ch[((ix as usize) * din.y + iy as usize)
                                                * din.z
                                                + iz as usize];
                                            acc = acc + g * v;
                                        }
                                    }
                                }
                            }
                            let prev = dk_o[(i * kx * ky + a * ky + b) * kz + c];
                            dk_o[(i * kx * ky + a * ky + b) * kz + c] = prev + acc;
                        }
                    }
                }
            }
        }
    });
    d_k
}

/// Per-channel reduction of an output gradient (bias gradient).
pub(crate) fn sum_per_channel<T: Scalar>(d_out: &[T], d: Dims) -> Vec<T> {
    let spatial = d.spatial();
    (0..d.c)
        .into_par_iter()
        .map(|c| {
            let mut acc = T::zero();
            for n in 0..d.n {
                for v in &d_out[(n * d.c + c) * spatial..(n * d.c + c + 1) * spatial] {
                    acc = acc + *v;
                }
            }
            acc
        })
        .collect()
}

/// Transpose convolution: the exact adjoint of [`conv3d_forward`] with the
/// same kernel, padding rule, and stride. Input channels correspond to the
/// kernel's first axis, output channels to its second.
pub(crate) fn conv_transpose3d_forward<T: Scalar>(
    input: &[T],
    din: Dims,
    kernel: &[T],
    kdims: [usize; 5],
    bias: Option<&[T]>,
    stride: usize,
) -> (Vec<T>, Dims) {
    let [a_ch, b_ch, kx, ky, kz] = kdims;
    debug_assert_eq!(a_ch, din.c);
    let dout = Dims {
        n: din.n,
        c: b_ch,
        x: conv_transpose_out_extent(din.x, kx, stride),
        y: conv_transpose_out_extent(din.y, ky, stride),
        z: conv_transpose_out_extent(din.z, kz, stride),
    };
    let in_spatial = din.spatial();
    let out_spatial = dout.spatial();
    let (px, py, pz) = (
        same_pad(kx) as isize,
        same_pad(ky) as isize,
        same_pad(kz) as isize,
    );
    let mut out = vec![T::zero(); dout.numel()];

    out.par_chunks_mut(out_spatial)
        .enumerate()
        .for_each(|(slab, out_ch)| {
            let n = slab / b_ch;
            let b = slab % b_ch;
            if let Some(bias) = bias {
                out_ch.fill(bias[b]);
            }
            for a in 0..a_ch {
                let in_ch = &input[(n * a_ch + a) * in_spatial..(n * a_ch + a + 1) * in_spatial];
                let kbase = ((a * b_ch + b) * kx * ky) * kz;
                for ox in 0..din.x {
                    for oy in 0..din.y {
                        for oz in 0..din.z {
                            let v = in_ch[(ox * din.y + oy) * din.z + oz];
                            for ka in 0..kx {
                                let tx = (ox * stride + ka) as isize - px;
                                if tx < 0 || tx >= dout.x as isize {
                                    continue;
                                }
                                for kb in 0..ky {
                                    let ty = (oy * stride + kb) as isize - py;
                                    if ty < 0 || ty >= dout.y as isize {
                                        continue;
                                    }
                                    for kc in 0..kz {
                                        let tz = (oz * stride + kc) as isize - pz;
                                        if tz < 0 || tz >= dout.z as isize {
                                            continue;
                                        }
                                        let w = kernel[kbase + (ka * ky + kb) * kz + kc];
                                        let idx = ((tx as usize) * dout.y + ty as usize) * dout.z
                                            + tz as usize;
                                        out_ch[idx] = out_ch[idx] + w * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    (out, dout)
}

/// Gradient of the transpose convolution with respect to its input: the
/// forward convolution gather with the same kernel.
pub(crate) fn conv_transpose3d_backward_input<T: Scalar>(
    d_out: &[T],
    dout: Dims,
    kernel: &[T],
    kdims: [usize; 5],
    din: Dims,
    stride: usize,
) -> Vec<T> {
    let [a_ch, b_ch, kx, ky, kz] = kdims;
    let in_spatial = din.spatial();
    let out_spatial = dout.spatial();
    let (px, py, pz) = (
        same_pad(kx) as isize,
        same_pad(ky) as isize,
        same_pad(kz) as isize,
    );
    let mut d_in = vec![T::zero(); din.numel()];

    d_in.par_chunks_mut(in_spatial)
        .enumerate()
        .for_each(|(slab, din_ch)| {
            let n = slab / a_ch;
            let a = slab % a_ch;
            for b in 0..b_ch {
                let dout_ch =
                    &d_out[(n * b_ch + b) * out_spatial..(n * b_ch + b + 1) * out_spatial];
                let kbase = ((a * b_ch + b) * kx * ky) * kz;
                for ox in 0..din.x {
                    for oy in 0..din.y {
                        for oz in 0..din.z {
                            let mut acc = T::zero();
                            for ka in 0..kx {
                                let tx = (ox * stride + ka) as isize - px;
                                if tx < 0 || tx >= dout.x as isize {
                                    continue;
                                }
                                for kb in 0..ky {
                                    let ty = (oy * stride + kb) as isize - py;
                                    if ty < 0 || ty >= dout.y as isize {
                                        continue;
                                    }
                                    for kc in 0..kz {
                                        let tz = (oz * stride + kc) as isize - pz;
                                        if tz < 0 || tz >= dout.z as isize {
                                            continue;
                                        }
                                        let w = kernel[kbase + (ka * ky + kb) * kz + kc];
                                        acc = acc
                                            + w * dout_ch[((tx as usize) * dout.y + ty as usize)
                                                * dout.z
                                                + tz as usize];
                                    }
                                }
                            }
                            let idx = (ox * din.y + oy) * din.z + oz;
                            din_ch[idx] = din_ch[idx] + acc;
                        }
                    }
                }
            }
        });
    d_in
}

/// Gradient of the transpose convolution with respect to its kernel.
pub(crate) fn conv_transpose3d_backward_kernel<T: Scalar>(
    d_out: &[T],
    dout: Dims,
    input: &[T],
    din: Dims,
    kdims: [usize; 5],
    stride: usize,
) -> Vec<T> {
    let [a_ch, b_ch, kx, ky, kz] = kdims;
    let in_spatial = din.spatial();
    let out_spatial = dout.spatial();
    let ksize = b_ch * kx * ky * kz;
    let (px, py, pz) = (
        same_pad(kx) as isize,
        same_pad(ky) as isize,
        same_pad(kz) as isize,
    );
    let mut d_k = vec![T::zero(); a_ch * ksize];

    d_k.par_chunks_mut(ksize).enumerate().for_each(|(a, dk_a)| {
        for n in 0..din.n {
            let in_ch = &input[(n * a_ch + a) * in_spatial..(n * a_ch + a + 1) * in_spatial];
            for b in 0..b_ch {
                let dout_ch =
                    &d_out[(n * b_ch + b) * out_spatial..(n * b_ch + b + 1) * out_spatial];
                for ka in 0..kx {
                    for kb in 0..ky {
                        for kc in 0..kz {
                            let mut acc = T::zero();
                            for ox in 0..din.x {
                                let tx = (ox * stride + ka) as isize - px;
                                if tx < 0 || tx >= dout.x as isize {
                                    continue;
                                }
                                for oy in 0..din.y {
                                    let ty = (oy * stride + kb) as isize - py;
                                    if ty < 0 || ty >= dout.y as isize {
                                        continue;
                                    }
                                    for oz in 0..din.z {
                                        let tz = (oz * stride + kc) as isize - pz;
                                        if tz < 0 || tz >= dout.z as isize {
                                            continue;
                                        }
                                        acc = acc
                                            + in_ch[(ox * din.y + oy) * din.z + oz]
                                                * dout_ch[((tx as usize) * dout.y + ty as usize)
                                                    * dout.z
                                                    + tz as usize];
                                    }
                                }
                            }
                            let ki = (b * kx * ky + ka * ky + kb) * kz + kc;
                            dk_a[ki] = dk_a[ki] + acc;
                        }
                    }
                }
            }
        }
    });
    d_k
}

/// Max pooling over non-overlapping windows. Returns the pooled values and
/// the flat spatial argmax index (within each (n, c) slab) per output
/// element; ties break to the first index in scan order.
pub(crate) fn max_pool3d_forward<T: Scalar>(
    input: &[T],
    din: Dims,
    window: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, Dims) {
    let dout = Dims {
        n: din.n,
        c: din.c,
        x: (din.x - window) / stride + 1,
        y: (din.y - window) / stride + 1,
        z: (din.z - window) / stride + 1,
    };
    let in_spatial = din.spatial();
    let out_spatial = dout.spatial();
    let mut out = vec![T::zero(); dout.numel()];
    let mut argmax = vec![0usize; dout.numel()];

    out.par_chunks_mut(out_spatial)
        .zip(argmax.par_chunks_mut(out_spatial))
        .enumerate()
        .for_each(|(slab, (out_ch, arg_ch))| {
            let in_ch = &input[slab * in_spatial..(slab + 1) * in_spatial];
            for ox in 0..dout.x {
                for oy in 0..dout.y {
                    for oz in 0..dout.z {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for wx in 0..window {
                            for wy in 0..window {
                                for wz in 0..window {
                                    let ix = ox * stride + wx;
                                    let iy = oy * stride + wy;
                                    let iz = oz * stride + wz;
                                    let idx = (ix * din.y + iy) * din.z + iz;
                                    if in_ch[idx] > best {
                                        best = in_ch[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        let oidx = (ox * dout.y + oy) * dout.z + oz;
                        out_ch[oidx] = best;
                        arg_ch[oidx] = best_idx;
                    }
                }
            }
        });
    (out, argmax, dout)
}

pub(crate) fn max_pool3d_backward<T: Scalar>(
    d_out: &[T],
    dout: Dims,
    argmax: &[usize],
    din: Dims,
) -> Vec<T> {
    let in_spatial = din.spatial();
    let out_spatial = dout.spatial();
    let mut d_in = vec![T::zero(); din.numel()];
    d_in.par_chunks_mut(in_spatial)
        .enumerate()
        .for_each(|(slab, din_ch)| {
            let g = &d_out[slab * out_spatial..(slab + 1) * out_spatial];
            let a = &argmax[slab * out_spatial..(slab + 1) * out_spatial];
            for (gi, &idx) in g.iter().zip(a) {
                din_ch[idx] = din_ch[idx] + *gi;
            }
        });
    d_in
}

/// Saved forward state for the batch-norm backward pass.
pub(crate) struct BnSaved<T> {
    /// Per-channel batch mean.
    pub mean: Vec<T>,
    /// Per-channel biased batch variance.
    pub var: Vec<T>,
    /// Normalized input (x - mean) / sqrt(var + eps).
    pub xhat: Vec<T>,
}

/// Training-mode batch norm: statistics over batch and spatial positions
/// jointly, per channel.
pub(crate) fn batch_norm_train<T: Scalar>(
    input: &[T],
    d: Dims,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, BnSaved<T>) {
    let spatial = d.spatial();
    let m = T::from_usize(d.n * spatial).unwrap();
    let mut out = vec![T::zero(); input.len()];
    let mut xhat = vec![T::zero(); input.len()];
    let mut mean = vec![T::zero(); d.c];
    let mut var = vec![T::zero(); d.c];

    let results: Vec<(T, T)> = (0..d.c)
        .into_par_iter()
        .map(|c| {
            let mut sum = T::zero();
            for n in 0..d.n {
                for v in &input[(n * d.c + c) * spatial..(n * d.c + c + 1) * spatial] {
                    sum = sum + *v;
                }
            }
            let mu = sum / m;
            let mut sq = T::zero();
            for n in 0..d.n {
                for v in &input[(n * d.c + c) * spatial..(n * d.c + c + 1) * spatial] {
                    let dv = *v - mu;
                    sq = sq + dv * dv;
                }
            }
            (mu, sq / m)
        })
        .collect();
    for (c, (mu, v)) in results.into_iter().enumerate() {
        mean[c] = mu;
        var[c] = v;
    }

    out.par_chunks_mut(spatial)
        .zip(xhat.par_chunks_mut(spatial))
        .enumerate()
        .for_each(|(slab, (out_ch, xhat_ch))| {
            let c = slab % d.c;
            let inv_std = T::one() / (var[c] + eps).sqrt();
            let in_ch = &input[slab * spatial..(slab + 1) * spatial];
            for ((o, xh), v) in out_ch.iter_mut().zip(xhat_ch.iter_mut()).zip(in_ch) {
                let norm = (*v - mean[c]) * inv_std;
                *xh = norm;
                *o = gamma[c] * norm + beta[c];
            }
        });
    (out, BnSaved { mean, var, xhat })
}

/// Eval-mode batch norm using running statistics.
pub(crate) fn batch_norm_eval<T: Scalar>(
    input: &[T],
    d: Dims,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Vec<T> {
    let spatial = d.spatial();
    let mut out = vec![T::zero(); input.len()];
    out.par_chunks_mut(spatial)
        .enumerate()
        .for_each(|(slab, out_ch)| {
            let c = slab % d.c;
            let inv_std = T::one() / (running_var[c] + eps).sqrt();
            let in_ch = &input[slab * spatial..(slab + 1) * spatial];
            for (o, v) in out_ch.iter_mut().zip(in_ch) {
                *o = gamma[c] * (*v - running_mean[c]) * inv_std + beta[c];
            }
        });
    out
}

/// Training-mode batch-norm backward: gradients w.r.t. input, gamma, beta.
pub(crate) fn batch_norm_train_backward<T: Scalar>(
    d_out: &[T],
    d: Dims,
    gamma: &[T],
    saved: &BnSaved<T>,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let spatial = d.spatial();
    let m = T::from_usize(d.n * spatial).unwrap();
    let mut d_in = vec![T::zero(); d_out.len()];
    let mut d_gamma = vec![T::zero(); d.c];
    let mut d_beta = vec![T::zero(); d.c];

    let sums: Vec<(T, T)> = (0..d.c)
        .into_par_iter()
        .map(|c| {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for n in 0..d.n {
                let base = (n * d.c + c) * spatial;
                for (g, xh) in d_out[base..base + spatial]
                    .iter()
                    .zip(&saved.xhat[base..base + spatial])
                {
                    sum_dy = sum_dy + *g;
                    sum_dy_xhat = sum_dy_xhat + *g * *xh;
                }
            }
            (sum_dy, sum_dy_xhat)
        })
        .collect();
    for (c, (sdy, sdyx)) in sums.iter().enumerate() {
        d_beta[c] = *sdy;
        d_gamma[c] = *sdyx;
    }

    d_in.par_chunks_mut(spatial)
        .enumerate()
        .for_each(|(slab, din_ch)| {
            let c = slab % d.c;
            let inv_std = T::one() / (saved.var[c] + eps).sqrt();
            let scale = gamma[c] * inv_std / m;
            let (sum_dy, sum_dy_xhat) = sums[c];
            let base = slab * spatial;
            for (i, di) in din_ch.iter_mut().enumerate() {
                let g = d_out[base + i];
                let xh = saved.xhat[base + i];
                *di = scale * (m * g - sum_dy - xh * sum_dy_xhat);
            }
        });
    (d_in, d_gamma, d_beta)
}

/// Eval-mode batch-norm backward (running stats are constants).
pub(crate) fn batch_norm_eval_backward<T: Scalar>(
    d_out: &[T],
    d: Dims,
    input: &[T],
    gamma: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let spatial = d.spatial();
    let mut d_in = vec![T::zero(); d_out.len()];
    let mut d_gamma = vec![T::zero(); d.c];
    let mut d_beta = vec![T::zero(); d.c];
    for c in 0..d.c {
        let inv_std = T::one() / (running_var[c] + eps).sqrt();
        let mut dg = T::zero();
        let mut db = T::zero();
        for n in 0..d.n {
            let base = (n * d.c + c) * spatial;
            for i in 0..spatial {
                let g = d_out[base + i];
                let xh = (input[base + i] - running_mean[c]) * inv_std;
                dg = dg + g * xh;
                db = db + g;
                d_in[base + i] = g * gamma[c] * inv_std;
            }
        }
        d_gamma[c] = dg;
        d_beta[c] = db;
    }
    (d_in, d_gamma, d_beta)
}
