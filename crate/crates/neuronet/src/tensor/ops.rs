//! Raw compute kernels behind the tape operations.
//!
//! All kernels are deterministic: fixed loop order, fixed accumulation
//! order, no data-dependent reordering. The convolution accumulates each
//! output element in (c_in, kd, kh, kw) order starting from the bias, with
//! zeros outside the input bounds — the same-padding convention the
//! direct-loop verification oracle follows, which is what makes bit-exact
//! comparison possible.

use crate::error::{Error, Result};
use crate::tensor::Element;

#[inline]
fn axpy<T: Element>(dst: &mut [T], src: &[T], w: T) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += w * *s;
    }
}

/// Dot product with four independent accumulators (fixed order, better ILP).
#[inline]
fn dot4<T: Element>(a: &[T], b: &[T]) -> T {
    let n = a.len();
    debug_assert_eq!(n, b.len());
    let mut acc = [T::zero(); 4];
    let main = n - n % 4;
    let mut i = 0;
    while i < main {
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    for j in main..n {
        acc[0] += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

// ── 3D convolution ───────────────────────────────────────────────────

/// Validated geometry of one conv3d application.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub ci: usize,
    pub co: usize,
    pub input: [usize; 3],
    pub out: [usize; 3],
    pub kernel: [usize; 3],
    pub pad: [usize; 3],
    pub stride: [usize; 3],
}

impl ConvDims {
    pub fn padded(&self) -> [usize; 3] {
        [
            self.input[0] + 2 * self.pad[0],
            self.input[1] + 2 * self.pad[1],
            self.input[2] + 2 * self.pad[2],
        ]
    }
}

pub(crate) fn conv3d_dims(
    ishape: &[usize],
    kshape: &[usize],
    bias_len: usize,
    stride: [usize; 3],
) -> Result<ConvDims> {
    if ishape.len() != 4 {
        return Err(Error::Config(format!(
            "conv3d input must be [C,D,H,W], got {ishape:?}"
        )));
    }
    if kshape.len() != 5 {
        return Err(Error::Config(format!(
            "conv3d kernel must be [Co,Ci,Kd,Kh,Kw], got {kshape:?}"
        )));
    }
    let (ci, input) = (ishape[0], [ishape[1], ishape[2], ishape[3]]);
    let (co, kci, kernel) = (kshape[0], kshape[1], [kshape[2], kshape[3], kshape[4]]);
    if ci != kci {
        return Err(Error::Config(format!(
            "conv3d channel mismatch: input has {ci} channels, kernel expects {kci}"
        )));
    }
    if bias_len != co {
        return Err(Error::Config(format!(
            "conv3d bias length {bias_len} does not match {co} output channels"
        )));
    }
    if input.iter().any(|&e| e == 0) {
        return Err(Error::Config("conv3d input has a zero spatial extent".into()));
    }
    for (axis, &k) in kernel.iter().enumerate() {
        if k % 2 == 0 || k == 0 {
            return Err(Error::Config(format!(
                "conv3d kernel extent must be odd, axis {axis} has {k}"
            )));
        }
    }
    for (axis, &s) in stride.iter().enumerate() {
        if s != 1 && s != 2 {
            return Err(Error::Config(format!(
                "conv3d stride must be 1 or 2, axis {axis} has {s}"
            )));
        }
    }
    let out = [
        input[0].div_ceil(stride[0]),
        input[1].div_ceil(stride[1]),
        input[2].div_ceil(stride[2]),
    ];
    let pad = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
    Ok(ConvDims {
        ci,
        co,
        input,
        out,
        kernel,
        pad,
        stride,
    })
}

/// Copy `[C,D,H,W]` data into a zero-padded `[C,D+2pd,H+2ph,W+2pw]` buffer.
fn pad_volume<T: Element>(x: &[T], c: usize, d: [usize; 3], pad: [usize; 3]) -> Vec<T> {
    let [dd, dh, dw] = d;
    let (pd, ph, pw) = (d[0] + 2 * pad[0], d[1] + 2 * pad[1], d[2] + 2 * pad[2]);
    let mut out = vec![T::zero(); c * pd * ph * pw];
    for ch in 0..c {
        for z in 0..dd {
            for y in 0..dh {
                let src = ch * dd * dh * dw + (z * dh + y) * dw;
                let dst = ch * pd * ph * pw + ((z + pad[0]) * ph + y + pad[1]) * pw + pad[2];
                out[dst..dst + dw].copy_from_slice(&x[src..src + dw]);
            }
        }
    }
    out
}

/// Strip padding back off a `[C,...]` padded buffer.
fn unpad_volume<T: Element>(xp: &[T], c: usize, d: [usize; 3], pad: [usize; 3]) -> Vec<T> {
    let [dd, dh, dw] = d;
    let (pd, ph, pw) = (d[0] + 2 * pad[0], d[1] + 2 * pad[1], d[2] + 2 * pad[2]);
    let mut out = vec![T::zero(); c * dd * dh * dw];
    for ch in 0..c {
        for z in 0..dd {
            for y in 0..dh {
                let src = ch * pd * ph * pw + ((z + pad[0]) * ph + y + pad[1]) * pw + pad[2];
                let dst = ch * dd * dh * dw + (z * dh + y) * dw;
                out[dst..dst + dw].copy_from_slice(&xp[src..src + dw]);
            }
        }
    }
    out
}

pub(crate) fn conv3d_forward<T: Element>(
    x: &[T],
    kernel: &[T],
    bias: &[T],
    dims: &ConvDims,
) -> Vec<T> {
    let [od, oh, ow] = dims.out;
    let [kd, kh, kw] = dims.kernel;
    let [sd, sh, sw] = dims.stride;
    let [pd, ph, pw] = dims.padded();
    let xp = pad_volume(x, dims.ci, dims.input, dims.pad);

    let ostride_c = od * oh * ow;
    let mut out = vec![T::zero(); dims.co * ostride_c];
    for co in 0..dims.co {
        out[co * ostride_c..(co + 1) * ostride_c].fill(bias[co]);
    }

    for co in 0..dims.co {
        for ci in 0..dims.ci {
            let xc = &xp[ci * pd * ph * pw..(ci + 1) * pd * ph * pw];
            for zk in 0..kd {
                for yk in 0..kh {
                    for xk in 0..kw {
                        let w = kernel[(((co * dims.ci + ci) * kd + zk) * kh + yk) * kw + xk];
                        for z in 0..od {
                            let iz = z * sd + zk;
                            for y in 0..oh {
                                let iy = y * sh + yk;
                                let src = &xc[(iz * ph + iy) * pw + xk..];
                                let dst =
                                    &mut out[co * ostride_c + (z * oh + y) * ow..][..ow];
                                if sw == 1 {
                                    axpy(dst, &src[..ow], w);
                                } else {
                                    for (o, d) in dst.iter_mut().enumerate() {
                                        *d += w * src[o * sw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv3d_grad_bias<T: Element>(gout: &[T], dims: &ConvDims) -> Vec<T> {
    let n = dims.out[0] * dims.out[1] * dims.out[2];
    (0..dims.co)
        .map(|co| gout[co * n..(co + 1) * n].iter().copied().sum())
        .collect()
}

pub(crate) fn conv3d_grad_kernel<T: Element>(gout: &[T], x: &[T], dims: &ConvDims) -> Vec<T> {
    let [od, oh, ow] = dims.out;
    let [kd, kh, kw] = dims.kernel;
    let [sd, sh, sw] = dims.stride;
    let [pd, ph, pw] = dims.padded();
    let xp = pad_volume(x, dims.ci, dims.input, dims.pad);

    let ostride_c = od * oh * ow;
    let mut gk = vec![T::zero(); dims.co * dims.ci * kd * kh * kw];
    for co in 0..dims.co {
        let gc = &gout[co * ostride_c..(co + 1) * ostride_c];
        for ci in 0..dims.ci {
            let xc = &xp[ci * pd * ph * pw..(ci + 1) * pd * ph * pw];
            for zk in 0..kd {
                for yk in 0..kh {
                    for xk in 0..kw {
                        let mut acc = T::zero();
                        for z in 0..od {
                            let iz = z * sd + zk;
                            for y in 0..oh {
                                let iy = y * sh + yk;
                                let g = &gc[(z * oh + y) * ow..][..ow];
                                let src = &xc[(iz * ph + iy) * pw + xk..];
                                if sw == 1 {
                                    acc += dot4(g, &src[..ow]);
                                } else {
                                    for (o, &gv) in g.iter().enumerate() {
                                        acc += gv * src[o * sw];
                                    }
                                }
                            }
                        }
                        gk[(((co * dims.ci + ci) * kd + zk) * kh + yk) * kw + xk] = acc;
                    }
                }
            }
        }
    }
    gk
}

pub(crate) fn conv3d_grad_input<T: Element>(gout: &[T], kernel: &[T], dims: &ConvDims) -> Vec<T> {
    let [od, oh, ow] = dims.out;
    let [kd, kh, kw] = dims.kernel;
    let [sd, sh, sw] = dims.stride;
    let [pd, ph, pw] = dims.padded();

    let ostride_c = od * oh * ow;
    let mut gxp = vec![T::zero(); dims.ci * pd * ph * pw];
    for co in 0..dims.co {
        let gc = &gout[co * ostride_c..(co + 1) * ostride_c];
        for ci in 0..dims.ci {
            let gxc = &mut gxp[ci * pd * ph * pw..(ci + 1) * pd * ph * pw];
            for zk in 0..kd {
                for yk in 0..kh {
                    for xk in 0..kw {
                        let w = kernel[(((co * dims.ci + ci) * kd + zk) * kh + yk) * kw + xk];
                        for z in 0..od {
                            let iz = z * sd + zk;
                            for y in 0..oh {
                                let iy = y * sh + yk;
                                let g = &gc[(z * oh + y) * ow..][..ow];
                                let dst = &mut gxc[(iz * ph + iy) * pw + xk..];
                                if sw == 1 {
                                    axpy(&mut dst[..ow], g, w);
                                } else {
                                    for (o, &gv) in g.iter().enumerate() {
                                        dst[o * sw] += w * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    unpad_volume(&gxp, dims.ci, dims.input, dims.pad)
}

// ── Batch normalization ──────────────────────────────────────────────

/// Per-channel mean and biased variance over the spatial positions,
/// accumulated in f64 so large volumes do not lose digits.
pub(crate) fn channel_stats<T: Element>(x: &[T], channels: usize, n: usize) -> (Vec<T>, Vec<T>) {
    let mut means = Vec::with_capacity(channels);
    let mut vars = Vec::with_capacity(channels);
    for c in 0..channels {
        let xc = &x[c * n..(c + 1) * n];
        let mean = xc.iter().map(|v| v.to_f64c()).sum::<f64>() / n as f64;
        let var = xc
            .iter()
            .map(|v| {
                let d = v.to_f64c() - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        means.push(T::from_f64c(mean));
        vars.push(T::from_f64c(var));
    }
    (means, vars)
}

pub(crate) fn bn_forward<T: Element>(
    x: &[T],
    channels: usize,
    n: usize,
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for c in 0..channels {
        let (m, s, g, b) = (mean[c], invstd[c], gamma[c], beta[c]);
        for (o, &v) in out[c * n..(c + 1) * n].iter_mut().zip(&x[c * n..(c + 1) * n]) {
            *o = (v - m) * s * g + b;
        }
    }
    out
}

/// Train-mode batch-norm input/gamma/beta gradients. The batch statistics
/// depend on the input, which is what distinguishes this from the
/// inference-mode affine case.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_grad_train<T: Element>(
    x: &[T],
    gout: &[T],
    channels: usize,
    n: usize,
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut ggamma = vec![T::zero(); channels];
    let mut gbeta = vec![T::zero(); channels];
    let nf = 1.0 / n as f64;
    for c in 0..channels {
        let xc = &x[c * n..(c + 1) * n];
        let gc = &gout[c * n..(c + 1) * n];
        let (m, s) = (mean[c].to_f64c(), invstd[c].to_f64c());
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for (&g, &v) in gc.iter().zip(xc) {
            let xhat = (v.to_f64c() - m) * s;
            sum_g += g.to_f64c();
            sum_gx += g.to_f64c() * xhat;
        }
        ggamma[c] = T::from_f64c(sum_gx);
        gbeta[c] = T::from_f64c(sum_g);
        let gam = gamma[c].to_f64c();
        let mean_g = sum_g * nf;
        let mean_gx = sum_gx * nf;
        for ((o, &g), &v) in gx[c * n..(c + 1) * n].iter_mut().zip(gc).zip(xc) {
            let xhat = (v.to_f64c() - m) * s;
            *o = T::from_f64c(gam * s * (g.to_f64c() - mean_g - xhat * mean_gx));
        }
    }
    (gx, ggamma, gbeta)
}

/// Inference-mode batch norm is an affine map with constant statistics.
pub(crate) fn bn_grad_infer<T: Element>(
    x: &[T],
    gout: &[T],
    channels: usize,
    n: usize,
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut ggamma = vec![T::zero(); channels];
    let mut gbeta = vec![T::zero(); channels];
    for c in 0..channels {
        let xc = &x[c * n..(c + 1) * n];
        let gc = &gout[c * n..(c + 1) * n];
        let (m, s, gam) = (mean[c], invstd[c], gamma[c]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for ((o, &g), &v) in gx[c * n..(c + 1) * n].iter_mut().zip(gc).zip(xc) {
            sum_g += g;
            sum_gx += g * (v - m) * s;
            *o = gam * s * g;
        }
        ggamma[c] = sum_gx;
        gbeta[c] = sum_g;
    }
    (gx, ggamma, gbeta)
}

// ── Trilinear 2x upsampling ──────────────────────────────────────────

/// Output index `o` samples input coordinate (o+0.5)/2 - 0.5, clamped.
/// Returns (lower index, upper index, fractional weight toward upper).
fn upsample_axis_table<T: Element>(extent: usize) -> Vec<(usize, usize, T)> {
    (0..2 * extent)
        .map(|o| {
            let x = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (extent - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, T::from_f64c(x - i0 as f64))
        })
        .collect()
}

/// One separable pass: expand the last axis of a `[rows, extent]` view to
/// `2*extent` using `a + t*(b-a)`, which reproduces constants bit-exactly.
fn upsample_pass_last<T: Element>(x: &[T], rows: usize, extent: usize) -> Vec<T> {
    let table = upsample_axis_table::<T>(extent);
    let mut out = vec![T::zero(); rows * 2 * extent];
    for r in 0..rows {
        let src = &x[r * extent..(r + 1) * extent];
        let dst = &mut out[r * 2 * extent..(r + 1) * 2 * extent];
        for (o, &(i0, i1, t)) in table.iter().enumerate() {
            let a = src[i0];
            dst[o] = a + t * (src[i1] - a);
        }
    }
    out
}

/// Transpose a `[rows, cols]` view so another axis becomes the last one.
fn transpose2<T: Element>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(crate) fn upsample2x_forward<T: Element>(x: &[T], c: usize, d: [usize; 3]) -> Vec<T> {
    let [dd, dh, dw] = d;
    // Separable: expand W, then H, then D. Each non-last axis is brought to
    // the last position by a local transpose.
    let mut cur = upsample_pass_last(x, c * dd * dh, dw); // [C, D, H, 2W]
    // H axis: per (c, z) plane of [H, 2W], transpose to [2W, H], expand, transpose back.
    let mut out_h = vec![T::zero(); c * dd * 2 * dh * 2 * dw];
    for plane in 0..c * dd {
        let p = &cur[plane * dh * 2 * dw..(plane + 1) * dh * 2 * dw];
        let pt = transpose2(p, dh, 2 * dw); // [2W, H]
        let ph = upsample_pass_last(&pt, 2 * dw, dh); // [2W, 2H]
        let back = transpose2(&ph, 2 * dw, 2 * dh); // [2H, 2W]
        out_h[plane * 2 * dh * 2 * dw..(plane + 1) * 2 * dh * 2 * dw].copy_from_slice(&back);
    }
    cur = out_h; // [C, D, 2H, 2W]
    // D axis: per channel block of [D, 2H*2W].
    let hw = 2 * dh * 2 * dw;
    let mut out_d = vec![T::zero(); c * 2 * dd * hw];
    for ch in 0..c {
        let p = &cur[ch * dd * hw..(ch + 1) * dd * hw];
        let pt = transpose2(p, dd, hw); // [2H*2W, D]
        let pd = upsample_pass_last(&pt, hw, dd); // [2H*2W, 2D]
        let back = transpose2(&pd, hw, 2 * dd); // [2D, 2H*2W]
        out_d[ch * 2 * dd * hw..(ch + 1) * 2 * dd * hw].copy_from_slice(&back);
    }
    out_d
}

/// Adjoint of one last-axis pass: scatter (1-t) and t back to the sources.
fn upsample_pass_last_grad<T: Element>(g: &[T], rows: usize, extent: usize) -> Vec<T> {
    let table = upsample_axis_table::<T>(extent);
    let mut out = vec![T::zero(); rows * extent];
    for r in 0..rows {
        let gd = &g[r * 2 * extent..(r + 1) * 2 * extent];
        let dst = &mut out[r * extent..(r + 1) * extent];
        for (o, &(i0, i1, t)) in table.iter().enumerate() {
            dst[i0] += (T::one() - t) * gd[o];
            dst[i1] += t * gd[o];
        }
    }
    out
}

pub(crate) fn upsample2x_grad<T: Element>(gout: &[T], c: usize, d: [usize; 3]) -> Vec<T> {
    let [dd, dh, dw] = d;
    let hw = 2 * dh * 2 * dw;
    // Reverse of forward: D axis first, then H, then W.
    let mut cur = vec![T::zero(); c * dd * hw];
    for ch in 0..c {
        let p = &gout[ch * 2 * dd * hw..(ch + 1) * 2 * dd * hw];
        let pt = transpose2(p, 2 * dd, hw); // [2H*2W, 2D]
        let pg = upsample_pass_last_grad(&pt, hw, dd); // [2H*2W, D]
        let back = transpose2(&pg, hw, dd); // [D, 2H*2W]
        cur[ch * dd * hw..(ch + 1) * dd * hw].copy_from_slice(&back);
    }
    let mut cur_h = vec![T::zero(); c * dd * dh * 2 * dw];
    for plane in 0..c * dd {
        let p = &cur[plane * 2 * dh * 2 * dw..(plane + 1) * 2 * dh * 2 * dw];
        let pt = transpose2(p, 2 * dh, 2 * dw); // [2W, 2H]
        let pg = upsample_pass_last_grad(&pt, 2 * dw, dh); // [2W, H]
        let back = transpose2(&pg, 2 * dw, dh); // [H, 2W]
        cur_h[plane * dh * 2 * dw..(plane + 1) * dh * 2 * dw].copy_from_slice(&back);
    }
    upsample_pass_last_grad(&cur_h, c * dd * dh, dw)
}

// ── Softmax over channels ────────────────────────────────────────────

pub(crate) fn softmax_channels_forward<T: Element>(x: &[T], channels: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for v in 0..n {
        let mut max = x[v];
        for c in 1..channels {
            let val = x[c * n + v];
            if val > max {
                max = val;
            }
        }
        let mut sum = T::zero();
        for c in 0..channels {
            let e = (x[c * n + v] - max).exp();
            out[c * n + v] = e;
            sum += e;
        }
        let inv = T::one() / sum;
        for c in 0..channels {
            out[c * n + v] *= inv;
        }
    }
    out
}

/// d/dx of softmax given its output y: gx = y * (g - sum_c g*y).
pub(crate) fn softmax_channels_grad<T: Element>(
    y: &[T],
    gout: &[T],
    channels: usize,
    n: usize,
) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for v in 0..n {
        let mut dot = T::zero();
        for c in 0..channels {
            dot += gout[c * n + v] * y[c * n + v];
        }
        for c in 0..channels {
            gx[c * n + v] = y[c * n + v] * (gout[c * n + v] - dot);
        }
    }
    gx
}

// ── Cross entropy (fused, log-sum-exp form) ──────────────────────────

/// Mean over voxels of -log softmax(logits)[label]. Returns the loss and
/// the softmax probabilities saved for the backward pass.
pub(crate) fn cross_entropy_forward<T: Element>(
    logits: &[T],
    channels: usize,
    spatial: [usize; 3],
    labels: &[u16],
) -> Result<(T, Vec<T>)> {
    let n = spatial[0] * spatial[1] * spatial[2];
    if labels.len() != n {
        return Err(Error::Usage(format!(
            "cross_entropy: {} labels for {} voxels",
            labels.len(),
            n
        )));
    }
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = 0.0f64;
    for v in 0..n {
        let lab = labels[v] as usize;
        if lab >= channels {
            let (d, rem) = (v / (spatial[1] * spatial[2]), v % (spatial[1] * spatial[2]));
            let (h, w) = (rem / spatial[2], rem % spatial[2]);
            return Err(Error::Data(format!(
                "label {lab} out of range [0,{channels}) at voxel ({d},{h},{w})"
            )));
        }
        let mut max = logits[v];
        for c in 1..channels {
            let val = logits[c * n + v];
            if val > max {
                max = val;
            }
        }
        let mut sum = T::zero();
        for c in 0..channels {
            let e = (logits[c * n + v] - max).exp();
            probs[c * n + v] = e;
            sum += e;
        }
        let inv = T::one() / sum;
        for c in 0..channels {
            probs[c * n + v] *= inv;
        }
        // -log p[label] = logsumexp - z[label] = (max + ln sum) - z[label]
        let lse = max.to_f64c() + sum.to_f64c().ln();
        total += lse - logits[lab * n + v].to_f64c();
    }
    Ok((T::from_f64c(total / n as f64), probs))
}

pub(crate) fn cross_entropy_grad<T: Element>(
    probs: &[T],
    channels: usize,
    n: usize,
    labels: &[u16],
    gscalar: T,
) -> Vec<T> {
    let scale = gscalar * T::from_f64c(1.0 / n as f64);
    let mut gx = vec![T::zero(); probs.len()];
    for v in 0..n {
        let lab = labels[v] as usize;
        for c in 0..channels {
            let indicator = if c == lab { T::one() } else { T::zero() };
            gx[c * n + v] = (probs[c * n + v] - indicator) * scale;
        }
    }
    gx
}
