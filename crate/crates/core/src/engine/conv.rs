//! 2-D convolution kernels (cross-correlation, NCHW).
//!
//! Dense groups are lowered to GEMM: pointwise stride-1 convolutions multiply
//! the weight matrix against the input plane directly, everything else goes
//! through an im2col buffer of `cin/groups * k * k` rows. Depthwise
//! convolutions (`groups == cin == cout`) use a direct per-plane kernel and
//! need no workspace.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Dense convolution with "same" padding for odd kernels.
    pub fn dense(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding: kernel / 2,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn depthwise(channels: usize, stride: usize) -> Self {
        Self {
            in_channels: channels,
            out_channels: channels,
            kernel: 3,
            stride,
            padding: 1,
            groups: channels,
            has_bias: false,
        }
    }

    pub fn with_bias(mut self, on: bool) -> Self {
        self.has_bias = on;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::config(format!("conv with zero channels/groups: {self:?}")));
        }
        if !matches!(self.kernel, 1 | 3) {
            return Err(Error::config(format!("kernel {} not in {{1,3}}", self.kernel)));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::config(format!("stride {} not in {{1,2}}", self.stride)));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.in_channels == self.out_channels
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// Weights plus bias.
    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.has_bias { self.out_channels } else { 0 }
    }

    /// `floor((len + 2p - k) / s) + 1`, or an error when that would be < 1.
    pub fn out_extent(&self, len: usize) -> Result<usize> {
        let padded = len + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::config(format!(
                "conv output would be empty: extent {len}, kernel {}, padding {}",
                self.kernel, self.padding
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Elements of im2col scratch needed per image, zero when the kernel
    /// runs without one.
    pub fn workspace_len(&self, out_h: usize, out_w: usize) -> usize {
        if self.is_depthwise() || self.is_plain_pointwise() {
            0
        } else {
            (self.in_channels / self.groups) * self.kernel * self.kernel * out_h * out_w
        }
    }

    fn is_plain_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn geometry<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Geometry> {
    spec.validate()?;
    let [n, c, h, wd] = x.dims4()?;
    if c != spec.in_channels {
        return Err(Error::Dimension {
            op: "conv2d",
            axis: "input channels",
            expected: spec.in_channels,
            got: c,
        });
    }
    let want = spec.weight_shape();
    let got = w.shape();
    if got.len() != 4 {
        return Err(Error::Dimension {
            op: "conv2d",
            axis: "weight rank",
            expected: 4,
            got: got.len(),
        });
    }
    const AXES: [&str; 4] = [
        "weight out channels",
        "weight in channels per group",
        "weight kernel height",
        "weight kernel width",
    ];
    for i in 0..4 {
        if got[i] != want[i] {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: AXES[i],
                expected: want[i],
                got: got[i],
            });
        }
    }
    match (b, spec.has_bias) {
        (Some(b), true) => {
            if b.shape() != [spec.out_channels] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![spec.out_channels],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        (None, false) => {}
        (Some(_), false) => return Err(Error::config("bias supplied to bias-free conv")),
        (None, true) => return Err(Error::config("conv spec expects a bias")),
    }
    let ho = spec.out_extent(h)?;
    let wo = spec.out_extent(wd)?;
    Ok(Geometry {
        n,
        h,
        w: wd,
        ho,
        wo,
    })
}

/// Output-index range `[lo, hi)` for which `o * s + k - p` lands in `[0, len)`.
#[inline]
fn valid_range(len: usize, out: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    // o*s + k >= p  ->  o >= ceil((p - k) / s)
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    // o*s + k - p <= len - 1  ->  o <= (len - 1 + p - k) / s
    let hi = if len + p < k + 1 {
        0
    } else {
        ((len - 1 + p - k) / s + 1).min(out)
    };
    (lo.min(hi), hi)
}

fn im2col<T: Float>(plane: &[T], cin: usize, g: &Geometry, spec: &ConvSpec, col: &mut [T]) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let hw_out = g.ho * g.wo;
    for c in 0..cin {
        let src = &plane[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(g.h, g.ho, ky, s, p);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(g.w, g.wo, kx, s, p);
                let row = &mut col[((c * k + ky) * k + kx) * hw_out..][..hw_out];
                row.fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    let src_row = &src[iy * g.w..(iy + 1) * g.w];
                    if s == 1 {
                        let ix0 = ox_lo + kx - p;
                        dst[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src_row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], cin: usize, g: &Geometry, spec: &ConvSpec, plane: &mut [T]) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let hw_out = g.ho * g.wo;
    for c in 0..cin {
        let dst = &mut plane[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(g.h, g.ho, ky, s, p);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(g.w, g.wo, kx, s, p);
                let row = &col[((c * k + ky) * k + kx) * hw_out..][..hw_out];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    let dst_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                    for ox in ox_lo..ox_hi {
                        dst_row[ox * s + kx - p] += src[ox];
                    }
                }
            }
        }
    }
}

fn depthwise_plane_forward<T: Float>(
    src: &[T],
    wk: &[T],
    g: &Geometry,
    spec: &ConvSpec,
    out: &mut [T],
) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    for ky in 0..k {
        let (oy_lo, oy_hi) = valid_range(g.h, g.ho, ky, s, p);
        for kx in 0..k {
            let (ox_lo, ox_hi) = valid_range(g.w, g.wo, kx, s, p);
            let wv = wk[ky * k + kx];
            for oy in oy_lo..oy_hi {
                let iy = oy * s + ky - p;
                let src_row = &src[iy * g.w..(iy + 1) * g.w];
                let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                for ox in ox_lo..ox_hi {
                    dst[ox] += wv * src_row[ox * s + kx - p];
                }
            }
        }
    }
}

/// Forward convolution. Output is `(N, Cout, Ho, Wo)`.
pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry(x, w, b, spec)?;
    let (cin_g, cout_g) = (spec.in_channels / spec.groups, spec.out_channels / spec.groups);
    let in_img = spec.in_channels * g.h * g.w;
    let hw_out = g.ho * g.wo;
    let out_img = spec.out_channels * hw_out;
    let kk = spec.kernel * spec.kernel;
    let ws = spec.workspace_len(g.ho, g.wo);
    let mut out = vec![T::zero(); g.n * out_img];

    out.par_chunks_mut(out_img)
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x.data()[n * in_img..(n + 1) * in_img];
            if spec.is_depthwise() {
                for c in 0..spec.in_channels {
                    depthwise_plane_forward(
                        &x_n[c * g.h * g.w..(c + 1) * g.h * g.w],
                        &w.data()[c * kk..(c + 1) * kk],
                        &g,
                        spec,
                        &mut out_n[c * hw_out..(c + 1) * hw_out],
                    );
                }
            } else {
                let mut col = vec![T::zero(); ws];
                for grp in 0..spec.groups {
                    let x_g = &x_n[grp * cin_g * g.h * g.w..(grp + 1) * cin_g * g.h * g.w];
                    let w_g = &w.data()[grp * cout_g * cin_g * kk..(grp + 1) * cout_g * cin_g * kk];
                    let out_g = &mut out_n[grp * cout_g * hw_out..(grp + 1) * cout_g * hw_out];
                    let rhs = if ws == 0 {
                        MatRef::new(x_g, cin_g, hw_out)
                    } else {
                        im2col(x_g, cin_g, &g, spec, &mut col);
                        MatRef::new(&col, cin_g * kk, hw_out)
                    };
                    gemm(MatRef::new(w_g, cout_g, cin_g * kk), rhs, T::zero(), out_g);
                }
            }
            if let Some(b) = b {
                for (c, &bv) in b.data().iter().enumerate() {
                    for v in &mut out_n[c * hw_out..(c + 1) * hw_out] {
                        *v += bv;
                    }
                }
            }
        });
    Tensor::new(vec![g.n, spec.out_channels, g.ho, g.wo], out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

/// Gradients of a convolution given the upstream gradient `dy`.
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let bias = spec.has_bias.then(|| Tensor::zeros(vec![spec.out_channels]));
    let g = geometry(x, w, bias.as_ref(), spec)?;
    if dy.shape() != [g.n, spec.out_channels, g.ho, g.wo] {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            lhs: vec![g.n, spec.out_channels, g.ho, g.wo],
            rhs: dy.shape().to_vec(),
        });
    }
    let (cin_g, cout_g) = (spec.in_channels / spec.groups, spec.out_channels / spec.groups);
    let in_img = spec.in_channels * g.h * g.w;
    let hw_out = g.ho * g.wo;
    let out_img = spec.out_channels * hw_out;
    let kk = spec.kernel * spec.kernel;
    let ws = spec.workspace_len(g.ho, g.wo);
    let wlen = w.numel();
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);

    // Per-image weight-gradient partials, reduced in image order afterwards so
    // the result does not depend on scheduling.
    let per_image: Vec<(Vec<T>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x.data()[n * in_img..(n + 1) * in_img];
            let dy_n = &dy.data()[n * out_img..(n + 1) * out_img];
            let mut dw = vec![T::zero(); wlen];
            let mut dx = need_dx.then(|| vec![T::zero(); in_img]);
            if spec.is_depthwise() {
                for c in 0..spec.in_channels {
                    let src = &x_n[c * g.h * g.w..(c + 1) * g.h * g.w];
                    let dyp = &dy_n[c * hw_out..(c + 1) * hw_out];
                    let wk = &w.data()[c * kk..(c + 1) * kk];
                    let dwk = &mut dw[c * kk..(c + 1) * kk];
                    for ky in 0..k {
                        let (oy_lo, oy_hi) = valid_range(g.h, g.ho, ky, s, p);
                        for kx in 0..k {
                            let (ox_lo, ox_hi) = valid_range(g.w, g.wo, kx, s, p);
                            let mut acc = T::zero();
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - p;
                                let src_row = &src[iy * g.w..(iy + 1) * g.w];
                                let dyr = &dyp[oy * g.wo..(oy + 1) * g.wo];
                                for ox in ox_lo..ox_hi {
                                    acc += dyr[ox] * src_row[ox * s + kx - p];
                                }
                            }
                            dwk[ky * k + kx] = acc;
                            if let Some(dx) = dx.as_mut() {
                                let wv = wk[ky * k + kx];
                                let dxp = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * s + ky - p;
                                    let dyr = &dyp[oy * g.wo..(oy + 1) * g.wo];
                                    let dst = &mut dxp[iy * g.w..(iy + 1) * g.w];
                                    for ox in ox_lo..ox_hi {
                                        dst[ox * s + kx - p] += wv * dyr[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            } else {
                let mut col = vec![T::zero(); ws];
                for grp in 0..spec.groups {
                    let x_g = &x_n[grp * cin_g * g.h * g.w..(grp + 1) * cin_g * g.h * g.w];
                    let w_g = &w.data()[grp * cout_g * cin_g * kk..(grp + 1) * cout_g * cin_g * kk];
                    let dy_g = &dy_n[grp * cout_g * hw_out..(grp + 1) * cout_g * hw_out];
                    let dw_g = &mut dw[grp * cout_g * cin_g * kk..(grp + 1) * cout_g * cin_g * kk];
                    let lhs = MatRef::new(dy_g, cout_g, hw_out);
                    if ws == 0 {
                        gemm(lhs, MatRef::t(x_g, hw_out, cin_g), T::zero(), dw_g);
                    } else {
                        im2col(x_g, cin_g, &g, spec, &mut col);
                        gemm(lhs, MatRef::t(&col, hw_out, cin_g * kk), T::zero(), dw_g);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dx_g = &mut dx[grp * cin_g * g.h * g.w..(grp + 1) * cin_g * g.h * g.w];
                        let wt = MatRef::t(w_g, cin_g * kk, cout_g);
                        if ws == 0 {
                            gemm(wt, MatRef::new(dy_g, cout_g, hw_out), T::zero(), dx_g);
                        } else {
                            gemm(wt, MatRef::new(dy_g, cout_g, hw_out), T::zero(), &mut col);
                            col2im(&col, cin_g, &g, spec, dx_g);
                        }
                    }
                }
            }
            (dw, dx)
        })
        .collect();

    let mut dw = vec![T::zero(); wlen];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.n * in_img));
    for (pdw, pdx) in per_image {
        for (a, b) in dw.iter_mut().zip(pdw) {
            *a += b;
        }
        if let (Some(dx), Some(pdx)) = (dx.as_mut(), pdx) {
            dx.extend_from_slice(&pdx);
        }
    }
    let db = spec.has_bias.then(|| {
        let mut db = vec![T::zero(); spec.out_channels];
        for n in 0..g.n {
            for (c, acc) in db.iter_mut().enumerate() {
                let off = n * out_img + c * hw_out;
                *acc += dy.data()[off..off + hw_out].iter().copied().sum::<T>();
            }
        }
        db
    });
    Ok(ConvGrads {
        dx: dx
            .map(|d| Tensor::new(x.shape().to_vec(), d))
            .transpose()?,
        dw: Tensor::new(w.shape().to_vec(), dw)?,
        db: db.map(|d| Tensor::new(vec![spec.out_channels], d)).transpose()?,
    })
}
