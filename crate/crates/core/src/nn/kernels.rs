//! Dense CHW tensor kernels: stride-1 2D convolution (cross-correlation,
//! size-preserving padding), 2x2 average pooling, nearest and bilinear 2x
//! upsampling, and per-channel batch normalization, each with its adjoint.
//!
//! All loops run over contiguous row slices in a fixed order, so results are
//! bit-reproducible run to run.

use ndarray::{Array1, Array3, ArrayD};

use super::Scalar;
use crate::imaging::bilinear2x_taps;

fn conv_dims<T>(w: &ArrayD<T>) -> (usize, usize, usize, usize) {
    let s = w.shape();
    assert_eq!(s.len(), 4, "conv weight must be (out, in, kh, kw)");
    (s[0], s[1], s[2], s[3])
}

/// Zero-pad a CHW tensor by `pad` on each spatial side into a flat buffer.
fn pad_input<T: Scalar>(x: &Array3<T>, pad: usize) -> (Vec<T>, usize, usize) {
    let (c, h, w) = x.dim();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); c * hp * wp];
    let xs = x.as_slice().expect("contiguous");
    for ch in 0..c {
        for y in 0..h {
            let src = &xs[ch * h * w + y * w..ch * h * w + (y + 1) * w];
            let dst_off = ch * hp * wp + (y + pad) * wp + pad;
            out[dst_off..dst_off + w].copy_from_slice(src);
        }
    }
    (out, hp, wp)
}

/// Stride-1 convolution with `pad = (k - 1) / 2`, preserving spatial size.
pub fn conv2d_forward<T: Scalar>(
    x: &Array3<T>,
    w: &ArrayD<T>,
    b: &ArrayD<T>,
    pad: usize,
) -> Array3<T> {
    let (ci, h, wd) = x.dim();
    let (co, ci_w, kh, kw) = conv_dims(w);
    assert_eq!(ci, ci_w, "input channels {ci} != kernel channels {ci_w}");
    assert_eq!(h + 2 * pad + 1, h + kh, "padding must preserve size");
    let (xp, _hp, wp) = pad_input(x, pad);
    let ws = w.as_slice().expect("contiguous");
    let bs = b.as_slice().expect("contiguous");
    let mut out = vec![T::zero(); co * h * wd];
    for o in 0..co {
        let out_plane = &mut out[o * h * wd..(o + 1) * h * wd];
        out_plane.fill(bs[o]);
        for i in 0..ci {
            let x_plane_off = i * (h + 2 * pad) * wp;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = ws[((o * ci + i) * kh + ky) * kw + kx];
                    for y in 0..h {
                        let src_off = x_plane_off + (y + ky) * wp + kx;
                        let src = &xp[src_off..src_off + wd];
                        let dst = &mut out_plane[y * wd..(y + 1) * wd];
                        for xi in 0..wd {
                            dst[xi] += wv * src[xi];
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((co, h, wd), out).expect("sized")
}

/// Adjoint of [`conv2d_forward`]: gradients for input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Array3<T>,
    w: &ArrayD<T>,
    pad: usize,
    dy: &Array3<T>,
) -> (Array3<T>, ArrayD<T>, ArrayD<T>) {
    let (ci, h, wd) = x.dim();
    let (co, _, kh, kw) = conv_dims(w);
    let (xp, hp, wp) = pad_input(x, pad);
    let ws = w.as_slice().expect("contiguous");
    let dys = dy.as_slice().expect("contiguous");

    let mut db = vec![T::zero(); co];
    let mut dw = vec![T::zero(); w.len()];
    let mut dxp = vec![T::zero(); ci * hp * wp];

    for o in 0..co {
        let dy_plane = &dys[o * h * wd..(o + 1) * h * wd];
        let mut acc = T::zero();
        for &v in dy_plane {
            acc += v;
        }
        db[o] = acc;
        for i in 0..ci {
            let x_plane_off = i * hp * wp;
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = T::zero();
                    for y in 0..h {
                        let src_off = x_plane_off + (y + ky) * wp + kx;
                        let src = &xp[src_off..src_off + wd];
                        let g = &dy_plane[y * wd..(y + 1) * wd];
                        for xi in 0..wd {
                            acc += g[xi] * src[xi];
                        }
                    }
                    dw[((o * ci + i) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    // Input gradient: scatter each tap back into the padded buffer, channels
    // outermost so accumulation order never depends on scheduling.
    for i in 0..ci {
        let dx_plane_off = i * hp * wp;
        for o in 0..co {
            let dy_plane = &dys[o * h * wd..(o + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = ws[((o * ci + i) * kh + ky) * kw + kx];
                    for y in 0..h {
                        let dst_off = dx_plane_off + (y + ky) * wp + kx;
                        let dst = &mut dxp[dst_off..dst_off + wd];
                        let g = &dy_plane[y * wd..(y + 1) * wd];
                        for xi in 0..wd {
                            dst[xi] += wv * g[xi];
                        }
                    }
                }
            }
        }
    }
    // Crop the padding back off.
    let mut dx = Array3::zeros((ci, h, wd));
    {
        let dxs = dx.as_slice_mut().expect("contiguous");
        for i in 0..ci {
            for y in 0..h {
                let src_off = i * hp * wp + (y + pad) * wp + pad;
                let dst_off = i * h * wd + y * wd;
                dxs[dst_off..dst_off + wd].copy_from_slice(&dxp[src_off..src_off + wd]);
            }
        }
    }
    (
        dx,
        ArrayD::from_shape_vec(w.shape().to_vec(), dw).expect("sized"),
        ArrayD::from_shape_vec(vec![co], db).expect("sized"),
    )
}

/// 2x2 average pooling with stride 2. Requires even spatial dimensions.
pub fn avg_pool2_forward<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg pool needs even dims");
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        for y in 0..oh {
            for x_ in 0..ow {
                let s = x[[ch, 2 * y, 2 * x_]]
                    + x[[ch, 2 * y, 2 * x_ + 1]]
                    + x[[ch, 2 * y + 1, 2 * x_]]
                    + x[[ch, 2 * y + 1, 2 * x_ + 1]];
                out[[ch, y, x_]] = s * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(dy: &Array3<T>, in_h: usize, in_w: usize) -> Array3<T> {
    let (c, oh, ow) = dy.dim();
    assert_eq!((oh * 2, ow * 2), (in_h, in_w));
    let quarter = T::from_f64(0.25);
    let mut dx = Array3::zeros((c, in_h, in_w));
    for ch in 0..c {
        for y in 0..oh {
            for x_ in 0..ow {
                let g = dy[[ch, y, x_]] * quarter;
                dx[[ch, 2 * y, 2 * x_]] = g;
                dx[[ch, 2 * y, 2 * x_ + 1]] = g;
                dx[[ch, 2 * y + 1, 2 * x_]] = g;
                dx[[ch, 2 * y + 1, 2 * x_ + 1]] = g;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling (each pixel becomes a 2x2 block).
pub fn up_nearest2_forward<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, 2 * h, 2 * w));
    for ch in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                let v = x[[ch, y, x_]];
                out[[ch, 2 * y, 2 * x_]] = v;
                out[[ch, 2 * y, 2 * x_ + 1]] = v;
                out[[ch, 2 * y + 1, 2 * x_]] = v;
                out[[ch, 2 * y + 1, 2 * x_ + 1]] = v;
            }
        }
    }
    out
}

pub fn up_nearest2_backward<T: Scalar>(dy: &Array3<T>) -> Array3<T> {
    let (c, oh, ow) = dy.dim();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                dx[[ch, y, x_]] = dy[[ch, 2 * y, 2 * x_]]
                    + dy[[ch, 2 * y, 2 * x_ + 1]]
                    + dy[[ch, 2 * y + 1, 2 * x_]]
                    + dy[[ch, 2 * y + 1, 2 * x_ + 1]];
            }
        }
    }
    dx
}

/// Bilinear 2x upsampling, half-pixel convention with clamped borders.
/// Matches `imaging::resize_double` tap for tap.
pub fn up_bilinear2_forward<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, 2 * h, 2 * w));
    for y in 0..2 * h {
        let (y0, y1, ty) = bilinear2x_taps(y, h);
        let ty = T::from_f64(ty);
        for xo in 0..2 * w {
            let (x0, x1, tx) = bilinear2x_taps(xo, w);
            let tx = T::from_f64(tx);
            for ch in 0..c {
                let v00 = x[[ch, y0, x0]];
                let v01 = x[[ch, y0, x1]];
                let v10 = x[[ch, y1, x0]];
                let v11 = x[[ch, y1, x1]];
                let top = v00 + tx * (v01 - v00);
                let bot = v10 + tx * (v11 - v10);
                out[[ch, y, xo]] = top + ty * (bot - top);
            }
        }
    }
    out
}

pub fn up_bilinear2_backward<T: Scalar>(dy: &Array3<T>, in_h: usize, in_w: usize) -> Array3<T> {
    let (c, oh, ow) = dy.dim();
    assert_eq!((oh, ow), (2 * in_h, 2 * in_w));
    let one = T::one();
    let mut dx = Array3::zeros((c, in_h, in_w));
    for y in 0..oh {
        let (y0, y1, ty) = bilinear2x_taps(y, in_h);
        let ty = T::from_f64(ty);
        for xo in 0..ow {
            let (x0, x1, tx) = bilinear2x_taps(xo, in_w);
            let tx = T::from_f64(tx);
            for ch in 0..c {
                let g = dy[[ch, y, xo]];
                dx[[ch, y0, x0]] += g * (one - ty) * (one - tx);
                dx[[ch, y0, x1]] += g * (one - ty) * tx;
                dx[[ch, y1, x0]] += g * ty * (one - tx);
                dx[[ch, y1, x1]] += g * ty * tx;
            }
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Saved forward context for the batch-norm adjoint.
#[derive(Debug, Clone)]
pub struct BnContext<T> {
    pub xhat: Array3<T>,
    pub inv_std: Array1<T>,
    pub train: bool,
}

/// Batch normalization over the spatial extent of each channel (batch size 1).
///
/// In train mode, statistics come from the batch and the returned
/// `(new_mean, new_var)` are the momentum-blended running statistics the
/// caller should store. In eval mode, running statistics are used directly.
#[allow(clippy::type_complexity)]
pub fn batch_norm_forward<T: Scalar>(
    x: &Array3<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    running_mean: &ArrayD<T>,
    running_var: &ArrayD<T>,
    train: bool,
) -> (Array3<T>, BnContext<T>, Option<(Array1<T>, Array1<T>)>) {
    let (c, h, w) = x.dim();
    let m = (h * w) as f64;
    let eps = T::from_f64(BN_EPS);
    let gamma = gamma.as_slice().expect("contiguous");
    let beta = beta.as_slice().expect("contiguous");
    let mut out = Array3::zeros((c, h, w));
    let mut xhat = Array3::zeros((c, h, w));
    let mut inv_std = Array1::zeros(c);
    let mut updates = if train {
        Some((Array1::zeros(c), Array1::zeros(c)))
    } else {
        None
    };
    for ch in 0..c {
        let (mean, var) = if train {
            let mut s = T::zero();
            for y in 0..h {
                for x_ in 0..w {
                    s += x[[ch, y, x_]];
                }
            }
            let mean = s / T::from_f64(m);
            let mut v = T::zero();
            for y in 0..h {
                for x_ in 0..w {
                    let d = x[[ch, y, x_]] - mean;
                    v += d * d;
                }
            }
            (mean, v / T::from_f64(m))
        } else {
            (
                running_mean.as_slice().expect("contiguous")[ch],
                running_var.as_slice().expect("contiguous")[ch],
            )
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std[ch] = istd;
        for y in 0..h {
            for x_ in 0..w {
                let xh = (x[[ch, y, x_]] - mean) * istd;
                xhat[[ch, y, x_]] = xh;
                out[[ch, y, x_]] = gamma[ch] * xh + beta[ch];
            }
        }
        if let Some((new_mean, new_var)) = updates.as_mut() {
            let mom = T::from_f64(BN_MOMENTUM);
            let keep = T::one() - mom;
            // Running variance uses the unbiased estimate, as is conventional.
            let unbias = if m > 1.0 {
                T::from_f64(m / (m - 1.0))
            } else {
                T::one()
            };
            new_mean[ch] = keep * running_mean.as_slice().expect("contiguous")[ch] + mom * mean;
            new_var[ch] =
                keep * running_var.as_slice().expect("contiguous")[ch] + mom * var * unbias;
        }
    }
    (
        out,
        BnContext {
            xhat,
            inv_std,
            train,
        },
        updates.map(|(m_, v_)| (m_, v_)),
    )
}

/// Adjoint of [`batch_norm_forward`]; returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    ctx: &BnContext<T>,
    gamma: &ArrayD<T>,
    dy: &Array3<T>,
) -> (Array3<T>, ArrayD<T>, ArrayD<T>) {
    let (c, h, w) = dy.dim();
    let m = T::from_f64((h * w) as f64);
    let gamma = gamma.as_slice().expect("contiguous");
    let mut dx = Array3::zeros((c, h, w));
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let istd = ctx.inv_std[ch];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for y in 0..h {
            for x_ in 0..w {
                let g = dy[[ch, y, x_]];
                sum_dy += g;
                sum_dy_xhat += g * ctx.xhat[[ch, y, x_]];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        if ctx.train {
            let scale = gamma[ch] * istd / m;
            for y in 0..h {
                for x_ in 0..w {
                    let g = dy[[ch, y, x_]];
                    dx[[ch, y, x_]] =
                        scale * (m * g - sum_dy - ctx.xhat[[ch, y, x_]] * sum_dy_xhat);
                }
            }
        } else {
            let scale = gamma[ch] * istd;
            for y in 0..h {
                for x_ in 0..w {
                    dx[[ch, y, x_]] = scale * dy[[ch, y, x_]];
                }
            }
        }
    }
    (
        dx,
        ArrayD::from_shape_vec(vec![c], dgamma).expect("sized"),
        ArrayD::from_shape_vec(vec![c], dbeta).expect("sized"),
    )
}
