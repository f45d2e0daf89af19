//! Execution backends for block and network forward passes.
//!
//! Blocks are written once against [`Exec`]. [`Recorder`] runs them on a
//! [`Tape`] for training and gradient checks, [`Eager`] evaluates them on
//! plain tensors so intermediates are freed as soon as they go out of scope,
//! and the cost analyzer traces them symbolically.

use std::collections::HashMap;

use crate::engine::{conv2d_forward, kernels, BnHyper, ConvSpec, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

pub trait Exec<T: Float> {
    type Value: Clone;

    /// NCHW extents of a value.
    fn dims(&self, v: &Self::Value) -> [usize; 4];

    /// Convolution using `<prefix>/weight` (and `<prefix>/bias` if the spec
    /// has one).
    fn conv(&mut self, x: &Self::Value, prefix: &str, spec: &ConvSpec) -> Result<Self::Value>;

    /// Batch norm using `<prefix>/gamma`, `<prefix>/beta` and the running
    /// statistics stored under `prefix`.
    fn batch_norm(&mut self, x: &Self::Value, prefix: &str) -> Result<Self::Value>;

    fn relu6(&mut self, x: &Self::Value) -> Result<Self::Value>;

    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn concat_channels(&mut self, xs: &[Self::Value]) -> Result<Self::Value>;

    fn resize_bilinear(&mut self, x: &Self::Value, h: usize, w: usize) -> Result<Self::Value>;
}

/// Records a forward pass on a tape, binding each parameter to a leaf the
/// first time it is used.
pub struct Recorder<'a, T: Float> {
    pub tape: &'a mut Tape<T>,
    store: &'a mut ParamStore<T>,
    mode: Mode,
    bn: BnHyper,
    bound: HashMap<String, Var>,
    order: Vec<String>,
}

impl<'a, T: Float> Recorder<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            bn: BnHyper::default(),
            bound: HashMap::new(),
            order: Vec::new(),
        }
    }

    pub fn with_bn(mut self, bn: BnHyper) -> Self {
        self.bn = bn;
        self
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.tape.constant(x)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.tensor(name)?.clone();
        let v = self.tape.leaf(value);
        self.bound.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    /// Parameters touched by the forward pass, in first-use order.
    pub fn bindings(&self) -> Vec<(String, Var)> {
        self.order
            .iter()
            .map(|n| (n.clone(), self.bound[n]))
            .collect()
    }
}

impl<T: Float> Exec<T> for Recorder<'_, T> {
    type Value = Var;

    fn dims(&self, v: &Var) -> [usize; 4] {
        self.tape.value(*v).dims4().expect("rank-4 activation")
    }

    fn conv(&mut self, x: &Var, prefix: &str, spec: &ConvSpec) -> Result<Var> {
        let w = self.param(&format!("{prefix}/weight"))?;
        let b = if spec.has_bias {
            Some(self.param(&format!("{prefix}/bias"))?)
        } else {
            None
        };
        self.tape.conv2d(*x, w, b, spec)
    }

    fn batch_norm(&mut self, x: &Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}/gamma"))?;
        let beta = self.param(&format!("{prefix}/beta"))?;
        let stats = self.store.bn_stats_mut(prefix)?;
        self.tape
            .batch_norm2d(*x, gamma, beta, stats, self.mode, self.bn, prefix)
    }

    fn relu6(&mut self, x: &Var) -> Result<Var> {
        Ok(self.tape.relu6(*x))
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        Ok(self.tape.relu(*x))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        self.tape.concat_channels(xs)
    }

    fn resize_bilinear(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        self.tape.resize_bilinear(*x, h, w)
    }
}

/// Forward-only evaluation. In `Train` mode batch norm uses batch statistics
/// but leaves the running statistics untouched.
pub struct Eager<'a, T: Float> {
    store: &'a ParamStore<T>,
    mode: Mode,
    bn: BnHyper,
}

impl<'a, T: Float> Eager<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            store,
            mode,
            bn: BnHyper::default(),
        }
    }
}

impl<T: Float> Exec<T> for Eager<'_, T> {
    type Value = Tensor<T>;

    fn dims(&self, v: &Tensor<T>) -> [usize; 4] {
        v.dims4().expect("rank-4 activation")
    }

    fn conv(&mut self, x: &Tensor<T>, prefix: &str, spec: &ConvSpec) -> Result<Tensor<T>> {
        let w = self.store.tensor(&format!("{prefix}/weight"))?;
        let b = if spec.has_bias {
            Some(self.store.tensor(&format!("{prefix}/bias"))?)
        } else {
            None
        };
        conv2d_forward(x, w, b, spec)
    }

    fn batch_norm(&mut self, x: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
        let gamma = self.store.tensor(&format!("{prefix}/gamma"))?;
        let beta = self.store.tensor(&format!("{prefix}/beta"))?;
        match self.mode {
            Mode::Train => Ok(kernels::batch_norm_train(x, gamma, beta, self.bn.eps)?.y),
            Mode::Eval => {
                let stats = self.store.bn_stats(prefix)?;
                if !stats.is_initialized() {
                    return Err(Error::UninitializedStats(prefix.to_string()));
                }
                let (scale, shift, _) =
                    kernels::bn_eval_coeffs(gamma, beta, &stats.mean, &stats.var, self.bn.eps);
                kernels::channel_affine(x, &scale, &shift)
            }
        }
    }

    fn relu6(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let six = T::from_f64_lossy(6.0);
        Ok(x.map(|v| v.max(T::zero()).min(six)))
    }

    fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.map(|v| v.max(T::zero())))
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut y = a.clone();
        y.add_assign(b);
        Ok(y)
    }

    fn concat_channels(&mut self, xs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = xs.iter().collect();
        kernels::concat_channels(&refs)
    }

    fn resize_bilinear(&mut self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        kernels::resize_bilinear(x, h, w)
    }
}
