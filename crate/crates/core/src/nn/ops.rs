//! Stateless tensor operations on `(B, H, W, C)` maps, each paired with an
//! explicit backward function.

use ndarray::{s, Array2, Array3, Array4, Axis};

use super::Scalar;
use crate::error::{Error, Result};

/// Elementwise `max(x, 0)`.
pub fn relu<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| v.maxv(F::zero()))
}

/// Gradient of [`relu`] given its output (derivative 0 at x <= 0).
pub fn relu_backward<F: Scalar>(gy: &Array4<F>, y: &Array4<F>) -> Array4<F> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &v| {
        if v <= F::zero() {
            *g = F::zero();
        }
    });
    gx
}

/// Elementwise logistic gate.
pub fn sigmoid<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(Scalar::sigmoid)
}

/// Gradient of [`sigmoid`] given its output: `gy * y * (1 - y)`.
pub fn sigmoid_backward<F: Scalar>(gy: &Array4<F>, y: &Array4<F>) -> Array4<F> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &v| *g *= v * (F::one() - v));
    gx
}

/// Per-channel global average pool: `(B,H,W,C) -> (B,C)`.
pub fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (b, h, w, c) = x.dim();
    let scale = F::from_f64(1.0 / (h as f64 * w as f64));
    let mut out = Array2::zeros((b, c));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    out[[bi, ch]] += x[[bi, i, j, ch]];
                }
            }
        }
    }
    out.mapv_inplace(|v| v * scale);
    out
}

/// Gradient of [`global_avg_pool`]: the pooled gradient spread evenly.
pub fn global_avg_pool_backward<F: Scalar>(g: &Array2<F>, h: usize, w: usize) -> Array4<F> {
    let (b, c) = g.dim();
    let scale = F::from_f64(1.0 / (h as f64 * w as f64));
    Array4::from_shape_fn((b, h, w, c), |(bi, _, _, ch)| g[[bi, ch]] * scale)
}

/// Channel-wise mean and max maps (each `(B,H,W,1)`) with the argmax
/// channel cached for the backward pass.
pub struct ChannelStats<F> {
    pub mean: Array4<F>,
    pub max: Array4<F>,
    pub argmax: Array3<usize>,
}

pub fn channel_stats<F: Scalar>(x: &Array4<F>) -> ChannelStats<F> {
    let (b, h, w, c) = x.dim();
    let inv_c = F::from_f64(1.0 / c as f64);
    let mut mean = Array4::zeros((b, h, w, 1));
    let mut max = Array4::zeros((b, h, w, 1));
    let mut argmax = Array3::zeros((b, h, w));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut sum = F::zero();
                let mut best = x[[bi, i, j, 0]];
                let mut best_c = 0;
                for ch in 0..c {
                    let v = x[[bi, i, j, ch]];
                    sum += v;
                    if v > best {
                        best = v;
                        best_c = ch;
                    }
                }
                mean[[bi, i, j, 0]] = sum * inv_c;
                max[[bi, i, j, 0]] = best;
                argmax[[bi, i, j]] = best_c;
            }
        }
    }
    ChannelStats { mean, max, argmax }
}

/// Routes mean gradient to every channel and max gradient to the argmax
/// channel only.
pub fn channel_stats_backward<F: Scalar>(
    gmean: &Array4<F>,
    gmax: &Array4<F>,
    argmax: &Array3<usize>,
    channels: usize,
) -> Array4<F> {
    let (b, h, w, _) = gmean.dim();
    let inv_c = F::from_f64(1.0 / channels as f64);
    let mut gx = Array4::zeros((b, h, w, channels));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let gm = gmean[[bi, i, j, 0]] * inv_c;
                for ch in 0..channels {
                    gx[[bi, i, j, ch]] = gm;
                }
                gx[[bi, i, j, argmax[[bi, i, j]]]] += gmax[[bi, i, j, 0]];
            }
        }
    }
    gx
}

/// Per-axis source indices and fractions for a bilinear resize with
/// half-pixel alignment (align_corners = false).
fn resize_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, p - i0 as f64)
        })
        .collect()
}

/// Bilinear interpolation `(B,H,W,C) -> (B,OH,OW,C)`, half-pixel aligned.
/// Resizing from a 1x1 map degenerates to a broadcast.
pub fn bilinear_resize<F: Scalar>(x: &Array4<F>, oh: usize, ow: usize) -> Array4<F> {
    let (b, h, w, c) = x.dim();
    let ys = resize_axis(h, oh);
    let xs = resize_axis(w, ow);
    let mut out = Array4::zeros((b, oh, ow, c));
    for bi in 0..b {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let w00 = F::from_f64((1.0 - fy) * (1.0 - fx));
                let w01 = F::from_f64((1.0 - fy) * fx);
                let w10 = F::from_f64(fy * (1.0 - fx));
                let w11 = F::from_f64(fy * fx);
                for ch in 0..c {
                    out[[bi, oy, ox, ch]] = x[[bi, y0, x0, ch]] * w00
                        + x[[bi, y0, x1, ch]] * w01
                        + x[[bi, y1, x0, ch]] * w10
                        + x[[bi, y1, x1, ch]] * w11;
                }
            }
        }
    }
    out
}

/// Gradient of [`bilinear_resize`]: scatter-adds each output gradient back
/// to its four source corners with the same weights.
pub fn bilinear_resize_backward<F: Scalar>(gy: &Array4<F>, h: usize, w: usize) -> Array4<F> {
    let (b, oh, ow, c) = gy.dim();
    let ys = resize_axis(h, oh);
    let xs = resize_axis(w, ow);
    let mut gx = Array4::zeros((b, h, w, c));
    for bi in 0..b {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let w00 = F::from_f64((1.0 - fy) * (1.0 - fx));
                let w01 = F::from_f64((1.0 - fy) * fx);
                let w10 = F::from_f64(fy * (1.0 - fx));
                let w11 = F::from_f64(fy * fx);
                for ch in 0..c {
                    let g = gy[[bi, oy, ox, ch]];
                    gx[[bi, y0, x0, ch]] += g * w00;
                    gx[[bi, y0, x1, ch]] += g * w01;
                    gx[[bi, y1, x0, ch]] += g * w10;
                    gx[[bi, y1, x1, ch]] += g * w11;
                }
            }
        }
    }
    gx
}

/// Concatenates maps along the channel axis.
pub fn concat_channels<F: Scalar>(parts: &[&Array4<F>]) -> Result<Array4<F>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let joined = ndarray::concatenate(Axis(3), &views)
        .map_err(|e| Error::Shape(format!("channel concat failed: {e}")))?;
    // Downstream kernels assume standard layout, which concatenate does
    // not guarantee.
    if joined.is_standard_layout() {
        Ok(joined)
    } else {
        let dim = joined.dim();
        let data: Vec<F> = joined.iter().copied().collect();
        Ok(Array4::from_shape_vec(dim, data).expect("concat preserves its own shape"))
    }
}

/// Splits a gradient back into the channel blocks that were concatenated.
pub fn split_channels<F: Scalar>(g: &Array4<F>, sizes: &[usize]) -> Result<Vec<Array4<F>>> {
    let total: usize = sizes.iter().sum();
    if g.dim().3 != total {
        return Err(Error::Shape(format!(
            "cannot split {} channels into blocks {sizes:?}",
            g.dim().3
        )));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &sz in sizes {
        out.push(g.slice(s![.., .., .., start..start + sz]).to_owned());
        start += sz;
    }
    Ok(out)
}

/// Numerically stable softmax over the channel axis.
pub fn softmax<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(3)) {
        let mut m = lane[0];
        for &v in lane.iter() {
            m = m.maxv(v);
        }
        let mut sum = F::zero();
        for v in lane.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Numerically stable log-softmax over the channel axis.
pub fn log_softmax<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(3)) {
        let mut m = lane[0];
        for &v in lane.iter() {
            m = m.maxv(v);
        }
        let mut sum = F::zero();
        for &v in lane.iter() {
            sum += (v - m).exp();
        }
        let log_z = m + sum.ln();
        for v in lane.iter_mut() {
            *v -= log_z;
        }
    }
    out
}
