//! Reverse-mode autodiff over a linear computation record.
//!
//! Every operation appends a node holding its value and whatever it needs for
//! the backward pass. [`Tape::backward`] walks the record in reverse from a
//! scalar and adds the resulting gradients into the per-node accumulators, so
//! calling it twice without [`Tape::zero_grad`] doubles every gradient.

use serde::{Deserialize, Serialize};

use super::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use super::kernels;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Handle to a value in a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training-mode updates folded in; zero means the statistics
    /// were never observed nor loaded.
    pub updates: u64,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            updates: 0,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    /// Exponential moving average; the variance folded in is the unbiased
    /// estimate over `count` elements.
    pub fn update(&mut self, mean: &[f64], biased_var: &[f64], count: usize, momentum: f64) {
        let unbias = count as f64 / (count as f64 - 1.0);
        for c in 0..self.mean.len() {
            let m = self.mean[c].as_f64();
            let v = self.var[c].as_f64();
            self.mean[c] = T::from_f64_lossy((1.0 - momentum) * m + momentum * mean[c]);
            self.var[c] = T::from_f64_lossy((1.0 - momentum) * v + momentum * biased_var[c] * unbias);
        }
        self.updates += 1;
    }

    pub fn cast<U: Float>(&self) -> RunningStats<U> {
        RunningStats {
            mean: self.mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            updates: self.updates,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnHyper {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnHyper {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BnTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BnEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        scale: Vec<T>,
    },
    Relu6(Var),
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Concat(Vec<Var>),
    Resize {
        x: Var,
        in_h: usize,
        in_w: usize,
    },
    SoftmaxCe {
        logits: Var,
        probs: Tensor<T>,
        labels: Tensor<u16>,
        ignore: u16,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    retain_grads: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            retain_grads: true,
        }
    }

    /// When off, only leaves keep their gradients after `backward`;
    /// intermediate buffers are dropped as soon as they have been propagated.
    pub fn set_retain_grads(&mut self, on: bool) {
        self.retain_grads = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &'static str) -> Var {
        if cfg!(debug_assertions) && !value.all_finite() {
            let inputs = op_inputs(&op);
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].value.all_finite());
            assert!(inputs.is_empty() || !inputs_finite, "{name} produced a non-finite value from finite inputs");
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let ng = self.ng(&ins);
        Ok(self.push(
            y,
            Op::Conv {
                x,
                w,
                b,
                spec: *spec,
            },
            ng,
            "conv2d",
        ))
    }

    /// Depthwise 3x3 convolution; `spec` must have `groups == channels`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        let c = self.value(x).dims4()?[1];
        if spec.groups != c || spec.in_channels != c || spec.out_channels != c {
            return Err(Error::config(format!(
                "depthwise conv needs groups == channels == {c}, got {spec:?}"
            )));
        }
        if spec.kernel != 3 {
            return Err(Error::config("depthwise conv kernel must be 3"));
        }
        self.conv2d(x, w, None, spec)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
        hyper: BnHyper,
        name: &str,
    ) -> Result<Var> {
        let ng = self.ng(&[x, gamma, beta]);
        match mode {
            Mode::Train => {
                let out = kernels::batch_norm_train(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    hyper.eps,
                )?;
                let [n, _, h, w] = self.value(x).dims4()?;
                stats.update(&out.mean, &out.var, n * h * w, hyper.momentum);
                Ok(self.push(
                    out.y,
                    Op::BnTrain {
                        x,
                        gamma,
                        beta,
                        xhat: out.xhat,
                        inv_std: out.inv_std,
                    },
                    ng,
                    "batchnorm2d",
                ))
            }
            Mode::Eval => {
                if !stats.is_initialized() {
                    return Err(Error::UninitializedStats(name.to_string()));
                }
                let (scale, shift, inv_std) = kernels::bn_eval_coeffs(
                    self.value(gamma),
                    self.value(beta),
                    &stats.mean,
                    &stats.var,
                    hyper.eps,
                );
                let y = kernels::channel_affine(self.value(x), &scale, &shift)?;
                Ok(self.push(
                    y,
                    Op::BnEval {
                        x,
                        gamma,
                        beta,
                        mean: stats.mean.clone(),
                        inv_std,
                        scale,
                    },
                    ng,
                    "batchnorm2d",
                ))
            }
        }
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let six = T::from_f64_lossy(6.0);
        let y = self.value(x).map(|v| v.max(T::zero()).min(six));
        let ng = self.ng(&[x]);
        self.push(y, Op::Relu6(x), ng, "relu6")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(&[x]);
        self.push(y, Op::Relu(x), ng, "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut y = va.clone();
        y.add_assign(vb);
        let ng = self.ng(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), ng, "add"))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), ng, "mul"))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).map(|v| v * factor);
        let ng = self.ng(&[x]);
        self.push(y, Op::Scale(x, factor), ng, "scale")
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = kernels::concat_channels(&values)?;
        let ng = self.ng(xs);
        Ok(self.push(y, Op::Concat(xs.to_vec()), ng, "concat_channels"))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [_, _, in_h, in_w] = self.value(x).dims4()?;
        let y = kernels::resize_bilinear(self.value(x), out_h, out_w)?;
        let ng = self.ng(&[x]);
        Ok(self.push(y, Op::Resize { x, in_h, in_w }, ng, "resize_bilinear"))
    }

    /// Mean per-pixel cross-entropy over non-ignored pixels.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &Tensor<u16>,
        ignore_index: u16,
    ) -> Result<Var> {
        let (loss, probs, count) =
            kernels::softmax_cross_entropy(self.value(logits), labels, ignore_index)?;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.clone(),
                ignore: ignore_index,
                count,
            },
            ng,
            "softmax_cross_entropy",
        ))
    }

    /// Backpropagates from a scalar and accumulates into every reachable
    /// node's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut local: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut local)?;
            let keep = self.retain_grads || matches!(self.nodes[i].op, Op::Leaf);
            if keep {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, local: &mut [Option<Tensor<T>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let grads = conv2d_backward(self.value(*x), self.value(*w), spec, g, needs(*x))?;
                if let Some(dx) = grads.dx {
                    accumulate(local, *x, dx);
                }
                if needs(*w) {
                    accumulate(local, *w, grads.dw);
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    if needs(*b) {
                        accumulate(local, *b, db);
                    }
                }
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dgamma, dbeta) =
                    kernels::batch_norm_train_backward(g, xhat, self.value(*gamma), inv_std)?;
                if needs(*x) {
                    accumulate(local, *x, dx);
                }
                if needs(*gamma) {
                    accumulate(local, *gamma, dgamma);
                }
                if needs(*beta) {
                    accumulate(local, *beta, dbeta);
                }
            }
            Op::BnEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                scale,
            } => {
                let xv = self.value(*x);
                let [n, c, h, w] = xv.dims4()?;
                let hw = h * w;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xv.numel()];
                for img in 0..n {
                    for ch in 0..c {
                        let off = (img * c + ch) * hw;
                        #[allow(clippy::needless_range_loop)]
                        for j in off..off + hw {
                            let gv = g.data()[j];
                            dbeta[ch] += gv;
                            dgamma[ch] += gv * (xv.data()[j] - mean[ch]) * inv_std[ch];
                            dx[j] = gv * scale[ch];
                        }
                    }
                }
                if needs(*x) {
                    accumulate(local, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if needs(*gamma) {
                    accumulate(local, *gamma, Tensor::new(vec![c], dgamma)?);
                }
                if needs(*beta) {
                    accumulate(local, *beta, Tensor::new(vec![c], dbeta)?);
                }
            }
            Op::Relu6(x) => {
                let six = T::from_f64_lossy(6.0);
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > T::zero() && v < six { gv } else { T::zero() })
                    .collect();
                accumulate(local, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(local, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(local, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(local, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(local, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if needs(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(local, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(x, f) => accumulate(local, *x, g.map(|v| v * *f)),
            Op::Sum(x) => {
                let gv = g.data()[0];
                accumulate(local, *x, Tensor::full(self.value(*x).shape().to_vec(), gv));
            }
            Op::Concat(xs) => {
                let [n, total, h, w] = g.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    if needs(v) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for img in 0..n {
                            let start = (img * total + offset) * hw;
                            d.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        accumulate(local, v, Tensor::new(vec![n, c, h, w], d)?);
                    }
                    offset += c;
                }
            }
            Op::Resize { x, in_h, in_w } => {
                accumulate(local, *x, kernels::resize_bilinear_backward(g, *in_h, *in_w)?);
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
                ignore,
                count,
            } => {
                let d = kernels::softmax_cross_entropy_backward(
                    probs,
                    labels,
                    *ignore,
                    *count,
                    g.data()[0],
                )?;
                accumulate(local, *logits, d);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Float>(local: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut local[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(*b);
            v
        }
        Op::BnTrain { x, gamma, beta, .. } | Op::BnEval { x, gamma, beta, .. } => {
            vec![*x, *gamma, *beta]
        }
        Op::Relu6(x) | Op::Relu(x) | Op::Scale(x, _) | Op::Sum(x) => vec![*x],
        Op::Resize { x, .. } => vec![*x],
        Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Concat(xs) => xs.clone(),
        Op::SoftmaxCe { logits, .. } => vec![*logits],
    }
}
