//! Confusion matrix, IoU and multi-scale / flip inference.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{kernels, Mode, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Tensor;

/// `K x K` pixel counts, rows are ground truth and columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every non-ignored pixel. Nothing is counted if any id is out of
    /// range.
    pub fn update(&mut self, pred: &Tensor<u16>, truth: &Tensor<u16>) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(Error::ShapeMismatch {
                op: "confusion update",
                lhs: pred.shape().to_vec(),
                rhs: truth.shape().to_vec(),
            });
        }
        let k = self.k as u16;
        let locate = |i: usize| {
            let s = truth.shape();
            let mut rem = i;
            let mut idx = vec![0; s.len()];
            for d in (0..s.len()).rev() {
                idx[d] = rem % s[d];
                rem /= s[d];
            }
            idx
        };
        for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            if t >= k {
                return Err(Error::Data(format!("truth id {t} out of range at pixel {:?}", locate(i))));
            }
            if p >= k {
                return Err(Error::Data(format!("predicted id {p} out of range at pixel {:?}", locate(i))));
            }
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t != IGNORE_INDEX {
                self.counts[t as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::config(format!(
                "cannot merge {}-class and {}-class matrices",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// What to do with a class that has no true and no predicted pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClass {
    #[default]
    Exclude,
    CountAsOne,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    /// `None` for classes excluded from the mean.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn mean_iou(cm: &ConfusionMatrix, absent: AbsentClass) -> Result<IouReport> {
    let k = cm.k;
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        let tp = cm.get(c, c);
        let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
        let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
        let denom = tp + fp + fn_;
        if denom == 0 {
            per_class.push(match absent {
                AbsentClass::Exclude => None,
                AbsentClass::CountAsOne => Some(1.0),
            });
            continue;
        }
        let iou = tp as f64 / denom as f64;
        per_class.push(Some(iou));
        sum += iou;
        present += 1;
    }
    if present == 0 {
        return Err(Error::UndefinedMetric);
    }
    let counted = per_class.iter().flatten().count();
    let total: f64 = sum + (counted - present) as f64;
    Ok(IouReport {
        per_class,
        miou: total / counted as f64,
    })
}

/// Neumaier-compensated sum of `vals` after sorting, so the result does
/// not depend on the order the values arrive in.
pub fn order_invariant_mean(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in vals.iter() {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    (sum + comp) / vals.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub scales: Vec<f64>,
    pub flip: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.5, 1.0, 2.0],
            flip: true,
        }
    }
}

impl InferConfig {
    pub fn single() -> Self {
        Self {
            scales: vec![1.0],
            flip: false,
        }
    }
}

/// Eval-mode logits for any extents: zero-pads bottom/right up to the
/// network's divisor, runs the network and crops back.
pub fn forward_padded(net: &Network<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [n, _, h, w] = x.dims4()?;
    let d = net.config().divisor();
    let (ph, pw) = (h.div_ceil(d) * d, w.div_ceil(d) * d);
    if (ph, pw) == (h, w) {
        return net.forward(x, Mode::Eval);
    }
    let y = net.forward(&pad_nchw(x, ph, pw), Mode::Eval)?;
    Ok(crop_nchw(&y, n, y.shape()[1], h, w))
}

fn pad_nchw(x: &Tensor<f32>, ph: usize, pw: usize) -> Tensor<f32> {
    let [n, c, h, w] = x.dims4().expect("rank 4");
    let mut out = vec![0.0f32; n * c * ph * pw];
    for p in 0..n * c {
        for y in 0..h {
            let src = &x.data()[(p * h + y) * w..][..w];
            out[(p * ph + y) * pw..][..w].copy_from_slice(src);
        }
    }
    Tensor::new(vec![n, c, ph, pw], out).expect("positive extents")
}

fn crop_nchw(x: &Tensor<f32>, n: usize, c: usize, h: usize, w: usize) -> Tensor<f32> {
    let [_, _, ph, pw] = x.dims4().expect("rank 4");
    let mut out = Vec::with_capacity(n * c * h * w);
    for p in 0..n * c {
        for y in 0..h {
            out.extend_from_slice(&x.data()[(p * ph + y) * pw..][..w]);
        }
    }
    Tensor::new(vec![n, c, h, w], out).expect("positive extents")
}

/// Class probabilities `(N, K, H, W)` averaged over every scale (and its
/// mirror when `flip`), each resized back to the input extents.
pub fn multiscale_infer(net: &Network<f32>, x: &Tensor<f32>, cfg: &InferConfig) -> Result<Tensor<f32>> {
    let [n, _, h, w] = x.dims4()?;
    if cfg.scales.is_empty() {
        return Err(Error::config("multi-scale inference needs at least one scale"));
    }
    let mut maps: Vec<Tensor<f32>> = Vec::new();
    for &s in &cfg.scales {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::config(format!("scale {s} must be positive")));
        }
        let sh = (h as f64 * s).round() as usize;
        let sw = (w as f64 * s).round() as usize;
        if sh == 0 || sw == 0 {
            return Err(Error::config(format!("scale {s} shrinks {h}x{w} to nothing")));
        }
        let scaled = kernels::resize_bilinear(x, sh, sw)?;
        let flips: &[bool] = if cfg.flip { &[false, true] } else { &[false] };
        for &flip in flips {
            let inp = if flip { kernels::flip_horizontal(&scaled) } else { scaled.clone() };
            let logits = forward_padded(net, &inp)?;
            let logits = if flip { kernels::flip_horizontal(&logits) } else { logits };
            let probs = kernels::softmax_channels(&logits)?;
            maps.push(kernels::resize_bilinear(&probs, h, w)?);
        }
    }
    if maps.len() == 1 {
        return Ok(maps.pop().expect("one map"));
    }
    let k = maps[0].shape()[1];
    let mut buf = vec![0.0f64; maps.len()];
    let out = (0..n * k * h * w)
        .map(|i| {
            for (b, m) in buf.iter_mut().zip(&maps) {
                *b = m.data()[i] as f64;
            }
            order_invariant_mean(&mut buf) as f32
        })
        .collect();
    Tensor::new(vec![n, k, h, w], out)
}

/// Accumulates the confusion matrix of `net` over `ds`, `batch` images at a
/// time.
pub fn evaluate(net: &Network<f32>, ds: &Dataset, cfg: &InferConfig, batch: usize) -> Result<ConfusionMatrix> {
    let k = net.config().num_classes;
    if ds.num_classes() != k {
        return Err(Error::config(format!(
            "network predicts {k} classes but the dataset has {}",
            ds.num_classes()
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    for chunk in ds.samples.chunks(batch.max(1)) {
        let (x, y) = crate::data::collate(chunk)?;
        let probs = multiscale_infer(net, &x, cfg)?;
        cm.update(&kernels::argmax_channels(&probs)?, &y)?;
    }
    Ok(cm)
}
