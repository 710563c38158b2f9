//! Independent reference implementations used only for verification.
//!
//! These deliberately take the slow, obvious route — per-voxel gather
//! loops, closed-form recurrences — and share no code with the production
//! kernels they check.

use crate::tensor::Element;

/// Direct-loop 3D cross-correlation with same padding.
///
/// Every output voxel is accumulated independently: start from the bias,
/// then add taps in (c_in, kd, kh, kw) order, counting positions outside
/// the input as zeros. That is the literal definition of the operation
/// (same padding = zeros outside bounds), and fixing the accumulation
/// order is what allows bit-exact comparison against the fast kernel.
pub fn conv3d_direct<T: Element>(
    input: &[T],
    ishape: [usize; 4],
    kernel: &[T],
    kshape: [usize; 5],
    bias: &[T],
    stride: [usize; 3],
) -> Vec<T> {
    let [ci, d, h, w] = ishape;
    let [co, kci, kd, kh, kw] = kshape;
    assert_eq!(ci, kci);
    let (sd, sh, sw) = (stride[0], stride[1], stride[2]);
    let (od, oh, ow) = (d.div_ceil(sd), h.div_ceil(sh), w.div_ceil(sw));
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);

    let mut out = vec![T::zero(); co * od * oh * ow];
    for c_out in 0..co {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[c_out];
                    for c_in in 0..ci {
                        for zk in 0..kd {
                            for yk in 0..kh {
                                for xk in 0..kw {
                                    let iz = (z * sd + zk) as isize - pd as isize;
                                    let iy = (y * sh + yk) as isize - ph as isize;
                                    let ix = (x * sw + xk) as isize - pw as isize;
                                    let tap = if iz < 0
                                        || iy < 0
                                        || ix < 0
                                        || iz >= d as isize
                                        || iy >= h as isize
                                        || ix >= w as isize
                                    {
                                        T::zero()
                                    } else {
                                        input[((c_in * d + iz as usize) * h + iy as usize) * w
                                            + ix as usize]
                                    };
                                    let wgt = kernel
                                        [(((c_out * ci + c_in) * kd + zk) * kh + yk) * kw + xk];
                                    acc += wgt * tap;
                                }
                            }
                        }
                    }
                    out[((c_out * od + z) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    out
}

/// Per-voxel trilinear interpolation oracle for the 2x upsampler: computes
/// each output voxel as an explicit 8-tap weighted sum from the coordinate
/// mapping, instead of the separable per-axis passes the kernel uses.
pub fn upsample2x_direct<T: Element>(input: &[T], c: usize, d: [usize; 3]) -> Vec<T> {
    let [dd, dh, dw] = d;
    let coord = |o: usize, e: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (e - 1) as f64);
        let i0 = x.floor() as usize;
        (i0, (i0 + 1).min(e - 1), x - i0 as f64)
    };
    let mut out = vec![T::zero(); c * 8 * dd * dh * dw];
    for ch in 0..c {
        for oz in 0..2 * dd {
            let (z0, z1, tz) = coord(oz, dd);
            for oy in 0..2 * dh {
                let (y0, y1, ty) = coord(oy, dh);
                for ox in 0..2 * dw {
                    let (x0, x1, tx) = coord(ox, dw);
                    let at = |z: usize, y: usize, x: usize| -> f64 {
                        input[((ch * dd + z) * dh + y) * dw + x].to_f64c()
                    };
                    let mut acc = 0.0;
                    for (z, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                        for (y, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                            for (x, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                                acc += wz * wy * wx * at(z, y, x);
                            }
                        }
                    }
                    out[((ch * 2 * dd + oz) * 2 * dh + oy) * 2 * dw + ox] = T::from_f64c(acc);
                }
            }
        }
    }
    out
}

/// Closed-form evaluation of `steps` bias-corrected Adam updates on a
/// single scalar with a constant gradient.
pub fn adam_scalar_closed_form(
    theta0: f64,
    grad: f64,
    steps: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> f64 {
    let mut theta = theta0;
    let mut m = 0.0;
    let mut v = 0.0;
    for t in 1..=steps {
        m = beta1 * m + (1.0 - beta1) * grad;
        v = beta2 * v + (1.0 - beta2) * grad * grad;
        let m_hat = m / (1.0 - beta1.powi(t as i32));
        let v_hat = v / (1.0 - beta2.powi(t as i32));
        theta -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    theta
}

/// Brute-force Dice over two integer label slices: nested counting loops,
/// no set machinery. Returns None when the label is absent from both.
pub fn dice_direct(pred: &[u16], target: &[u16], label: u16) -> Option<f64> {
    assert_eq!(pred.len(), target.len());
    let mut inter = 0u64;
    let mut pred_count = 0u64;
    let mut target_count = 0u64;
    for i in 0..pred.len() {
        let p = pred[i] == label;
        let t = target[i] == label;
        if p {
            pred_count += 1;
        }
        if t {
            target_count += 1;
        }
        if p && t {
            inter += 1;
        }
    }
    if pred_count + target_count == 0 {
        None
    } else {
        Some(2.0 * inter as f64 / (pred_count + target_count) as f64)
    }
}
