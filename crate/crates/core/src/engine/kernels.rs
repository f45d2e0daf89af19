//! Non-convolution kernels: batch norm, bilinear resize, softmax and the
//! per-pixel cross-entropy. All take and return plain tensors; the tape wires
//! them into the computation record.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const IGNORE_INDEX: u16 = 255;

/// Saved state of a training-mode batch norm forward.
pub struct BnTrainOut<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
}

fn bn_check<T: Float>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<[usize; 4]> {
    let dims = x.dims4()?;
    for (t, _) in [(gamma, "gamma"), (beta, "beta")] {
        if t.shape() != [dims[1]] {
            return Err(Error::Dimension {
                op: "batchnorm2d",
                axis: "channels",
                expected: dims[1],
                got: t.shape().first().copied().unwrap_or(0),
            });
        }
    }
    Ok(dims)
}

/// Normalizes with batch statistics. Mean and variance are accumulated in
/// `f64` in a fixed order.
pub fn batch_norm_train<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<BnTrainOut<T>> {
    let [n, c, h, w] = bn_check(x, gamma, beta)?;
    let hw = h * w;
    let m = n * hw;
    if m < 2 {
        return Err(Error::config(format!(
            "training-mode batch norm needs batch*H*W >= 2, got {m}"
        )));
    }
    let xd = x.data();
    let stats: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut sum = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * hw;
                sum += xd[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / m as f64;
            let mut sq = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * hw;
                sq += xd[off..off + hw]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            (mean, sq / m as f64)
        })
        .collect();
    let mean: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let var: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let inv_std: Vec<T> = var
        .iter()
        .map(|v| T::from_f64_lossy(1.0 / (v + eps).sqrt()))
        .collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    xhat.par_chunks_mut(hw)
        .zip(y.par_chunks_mut(hw))
        .enumerate()
        .for_each(|(plane, (xh, yy))| {
            let ch = plane % c;
            let mu = T::from_f64_lossy(mean[ch]);
            let (g, b, is) = (gamma.data()[ch], beta.data()[ch], inv_std[ch]);
            let src = &xd[plane * hw..(plane + 1) * hw];
            for ((o, yv), &v) in xh.iter_mut().zip(yy.iter_mut()).zip(src) {
                *o = (v - mu) * is;
                *yv = g * *o + b;
            }
        });
    Ok(BnTrainOut {
        y: Tensor::new(x.shape().to_vec(), y)?,
        xhat: Tensor::new(x.shape().to_vec(), xhat)?,
        inv_std,
        mean,
        var,
    })
}

/// `(dx, dgamma, dbeta)` for a training-mode batch norm.
pub fn batch_norm_train_backward<T: Float>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    gamma: &Tensor<T>,
    inv_std: &[T],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = xhat.dims4()?;
    let hw = h * w;
    let m = T::from_usize(n * hw).unwrap();
    let (dyd, xd) = (dy.data(), xhat.data());
    let sums: Vec<(T, T)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let (mut sdy, mut sdyx) = (T::zero(), T::zero());
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    sdy += dyd[j];
                    sdyx += dyd[j] * xd[j];
                }
            }
            (sdy, sdyx)
        })
        .collect();
    let mut dx = vec![T::zero(); dyd.len()];
    dx.par_chunks_mut(hw).enumerate().for_each(|(plane, out)| {
        let ch = plane % c;
        let (sdy, sdyx) = sums[ch];
        let scale = gamma.data()[ch] * inv_std[ch] / m;
        let off = plane * hw;
        for (j, o) in out.iter_mut().enumerate() {
            *o = scale * (m * dyd[off + j] - sdy - xd[off + j] * sdyx);
        }
    });
    let dgamma = sums.iter().map(|s| s.1).collect();
    let dbeta = sums.iter().map(|s| s.0).collect();
    Ok((
        Tensor::new(dy.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Eval-mode batch norm as a per-channel affine map: `y = scale * x + shift`.
pub fn bn_eval_coeffs<T: Float>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::from_f64_lossy(1.0 / (v.as_f64() + eps).sqrt()))
        .collect();
    let scale: Vec<T> = gamma
        .data()
        .iter()
        .zip(&inv_std)
        .map(|(&g, &is)| g * is)
        .collect();
    let shift = beta
        .data()
        .iter()
        .zip(&scale)
        .zip(mean)
        .map(|((&b, &s), &mu)| b - s * mu)
        .collect();
    (scale, shift, inv_std)
}

pub fn channel_affine<T: Float>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Result<Tensor<T>> {
    let [_, c, h, w] = x.dims4()?;
    if scale.len() != c {
        return Err(Error::Dimension {
            op: "batchnorm2d",
            axis: "channels",
            expected: c,
            got: scale.len(),
        });
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    out.par_chunks_mut(hw).enumerate().for_each(|(plane, o)| {
        let ch = plane % c;
        for v in o {
            *v = scale[ch] * *v + shift[ch];
        }
    });
    Tensor::new(x.shape().to_vec(), out)
}

/// One axis of a half-pixel bilinear resampling: for each output index the
/// two source taps and the weight of the second.
#[derive(Clone, Debug)]
pub struct AxisTaps<T> {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub frac: Vec<T>,
}

/// Half-pixel centers: `src = (dst + 0.5) * in / out - 0.5`, clamped to the
/// valid range.
pub fn axis_taps<T: Float>(input: usize, output: usize) -> AxisTaps<T> {
    let ratio = input as f64 / output as f64;
    let mut taps = AxisTaps {
        i0: Vec::with_capacity(output),
        i1: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for d in 0..output {
        let src = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        taps.i0.push(i0);
        taps.i1.push(i1);
        taps.frac.push(T::from_f64_lossy(src - i0 as f64));
    }
    taps
}

pub fn resize_bilinear<T: Float>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("resize to an empty extent"));
    }
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let ty = axis_taps::<T>(h, out_h);
    let tx = axis_taps::<T>(w, out_w);
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    out.par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(plane, o)| {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..out_h {
                let (r0, r1, fy) = (ty.i0[oy] * w, ty.i1[oy] * w, ty.frac[oy]);
                let gy = T::one() - fy;
                for ox in 0..out_w {
                    let (c0, c1, fx) = (tx.i0[ox], tx.i1[ox], tx.frac[ox]);
                    let gx = T::one() - fx;
                    let top = src[r0 + c0] * gx + src[r0 + c1] * fx;
                    let bot = src[r1 + c0] * gx + src[r1 + c1] * fx;
                    o[oy * out_w + ox] = top * gy + bot * fy;
                }
            }
        });
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub fn resize_bilinear_backward<T: Float>(
    dy: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let [n, c, out_h, out_w] = dy.dims4()?;
    if out_h == in_h && out_w == in_w {
        return Ok(dy.clone());
    }
    let ty = axis_taps::<T>(in_h, out_h);
    let tx = axis_taps::<T>(in_w, out_w);
    let mut dx = vec![T::zero(); n * c * in_h * in_w];
    dx.par_chunks_mut(in_h * in_w)
        .enumerate()
        .for_each(|(plane, d)| {
            let g = &dy.data()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for oy in 0..out_h {
                let (r0, r1, fy) = (ty.i0[oy] * in_w, ty.i1[oy] * in_w, ty.frac[oy]);
                let gy = T::one() - fy;
                for ox in 0..out_w {
                    let (c0, c1, fx) = (tx.i0[ox], tx.i1[ox], tx.frac[ox]);
                    let gx = T::one() - fx;
                    let v = g[oy * out_w + ox];
                    d[r0 + c0] += v * gy * gx;
                    d[r0 + c1] += v * gy * fx;
                    d[r1 + c0] += v * fy * gx;
                    d[r1 + c1] += v * fy * fx;
                }
            }
        });
    Tensor::new(vec![n, c, in_h, in_w], dx)
}

/// Channel-wise softmax of `(N, K, H, W)` logits, max-subtracted.
pub fn softmax_channels<T: Float>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k, h, w] = logits.dims4()?;
    let hw = h * w;
    let mut out = vec![T::zero(); logits.numel()];
    out.par_chunks_mut(k * hw)
        .enumerate()
        .for_each(|(img, o)| {
            let src = &logits.data()[img * k * hw..(img + 1) * k * hw];
            for p in 0..hw {
                let mut mx = T::neg_infinity();
                for c in 0..k {
                    mx = mx.max(src[c * hw + p]);
                }
                let mut z = T::zero();
                for c in 0..k {
                    let e = (src[c * hw + p] - mx).exp();
                    o[c * hw + p] = e;
                    z += e;
                }
                for c in 0..k {
                    o[c * hw + p] /= z;
                }
            }
        });
    let _ = n;
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean per-pixel cross-entropy and the softmax probabilities it used.
/// Pixels labelled `ignore_index` contribute nothing.
pub fn softmax_cross_entropy<T: Float>(
    logits: &Tensor<T>,
    labels: &Tensor<u16>,
    ignore_index: u16,
) -> Result<(T, Tensor<T>, usize)> {
    let [n, k, h, w] = logits.dims4()?;
    if labels.shape() != [n, h, w] {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: vec![n, h, w],
            rhs: labels.shape().to_vec(),
        });
    }
    let hw = h * w;
    for (i, &l) in labels.data().iter().enumerate() {
        if l != ignore_index && l as usize >= k {
            return Err(Error::Data(format!(
                "label {l} at flat pixel {i} is outside [0, {k}) and not the ignore index"
            )));
        }
    }
    let probs = softmax_channels(logits)?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for img in 0..n {
        let src = &logits.data()[img * k * hw..(img + 1) * k * hw];
        for p in 0..hw {
            let l = labels.data()[img * hw + p];
            if l == ignore_index {
                continue;
            }
            // log-sum-exp in f64 for the loss value itself
            let mx = (0..k).map(|c| src[c * hw + p].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..k).map(|c| (src[c * hw + p].as_f64() - mx).exp()).sum::<f64>().ln();
            total += lse - src[l as usize * hw + p].as_f64();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok((T::from_f64_lossy(total / count as f64), probs, count))
}

/// Gradient of the mean cross-entropy w.r.t. the logits, scaled by `upstream`.
pub fn softmax_cross_entropy_backward<T: Float>(
    probs: &Tensor<T>,
    labels: &Tensor<u16>,
    ignore_index: u16,
    count: usize,
    upstream: T,
) -> Result<Tensor<T>> {
    let [n, k, h, w] = probs.dims4()?;
    let hw = h * w;
    let scale = upstream / T::from_usize(count).unwrap();
    let mut g = probs.data().to_vec();
    for img in 0..n {
        for p in 0..hw {
            let l = labels.data()[img * hw + p];
            for c in 0..k {
                let idx = (img * k + c) * hw + p;
                if l == ignore_index {
                    g[idx] = T::zero();
                } else {
                    let onehot = if c == l as usize { T::one() } else { T::zero() };
                    g[idx] = (g[idx] - onehot) * scale;
                }
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), g)
}

/// Concatenates `(N, C_i, H, W)` tensors along the channel axis.
pub fn concat_channels<T: Float>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::config("concat of zero tensors"))?;
    let [n, _, h, w] = first.dims4()?;
    let mut total = 0;
    for t in xs {
        let [vn, vc, vh, vw] = t.dims4()?;
        for (axis, want, got) in [("batch", n, vn), ("height", h, vh), ("width", w, vw)] {
            if want != got {
                return Err(Error::Dimension {
                    op: "concat_channels",
                    axis,
                    expected: want,
                    got,
                });
            }
        }
        total += vc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total * hw);
    for img in 0..n {
        for t in xs {
            let c = t.shape()[1];
            data.extend_from_slice(&t.data()[img * c * hw..(img + 1) * c * hw]);
        }
    }
    Tensor::new(vec![n, total, h, w], data)
}

/// Mirrors the last axis.
pub fn flip_horizontal<T: Copy>(x: &Tensor<T>) -> Tensor<T> {
    let w = *x.shape().last().expect("rank >= 1");
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Per-pixel argmax over the channel axis of `(N, K, H, W)`; returns `(N, H, W)`.
pub fn argmax_channels<T: Float>(x: &Tensor<T>) -> Result<Tensor<u16>> {
    let [n, k, h, w] = x.dims4()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for img in 0..n {
        let src = &x.data()[img * k * hw..(img + 1) * k * hw];
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if src[c * hw + p] > src[best * hw + p] {
                    best = c;
                }
            }
            out.push(best as u16);
        }
    }
    Tensor::new(vec![n, h, w], out)
}
