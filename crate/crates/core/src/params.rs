//! Named parameter storage shared by blocks, the network and the optimizer.
//!
//! Names follow `<branch>/<block-index>/<stage>/<tensor>`, for example
//! `enc1/0/expand/weight` or `dec0/2/project_bn/gamma`. Batch-norm running
//! statistics are kept beside the trainable tensors, keyed by the stage
//! prefix (`enc1/0/expand_bn`).

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::engine::RunningStats;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    /// Whether weight decay applies when normalization/bias exemption is on.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
    bn: IndexMap<String, RunningStats<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            bn: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) {
        self.params.insert(name.into(), Param { value, kind });
    }

    pub fn insert_bn_stats(&mut self, prefix: impl Into<String>, stats: RunningStats<T>) {
        self.bn.insert(prefix.into(), stats);
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn bn_stats(&self, prefix: &str) -> Result<&RunningStats<T>> {
        self.bn
            .get(prefix)
            .ok_or_else(|| Error::config(format!("unknown batch norm `{prefix}`")))
    }

    pub fn bn_stats_mut(&mut self, prefix: &str) -> Result<&mut RunningStats<T>> {
        self.bn
            .get_mut(prefix)
            .ok_or_else(|| Error::config(format!("unknown batch norm `{prefix}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn bn_iter(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.bn.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Running mean and variance scalars (not trainable).
    pub fn running_stat_count(&self) -> usize {
        self.bn.values().map(|s| s.mean.len() + s.var.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
            bn: self.bn.iter().map(|(k, s)| (k.clone(), s.cast())).collect(),
        }
    }

    /// Registers a bias-free (unless `bias`) conv with Kaiming-normal fan-in
    /// initialization.
    pub fn init_conv(
        &mut self,
        prefix: &str,
        spec: &crate::engine::ConvSpec,
        rng: &mut impl Rng,
    ) {
        let shape = spec.weight_shape();
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Tensor::from_fn(shape.to_vec(), |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64_lossy(z * std)
        });
        self.insert(format!("{prefix}/weight"), w, ParamKind::ConvWeight);
        if spec.has_bias {
            self.insert(
                format!("{prefix}/bias"),
                Tensor::zeros(vec![spec.out_channels]),
                ParamKind::ConvBias,
            );
        }
    }

    pub fn init_bn(&mut self, prefix: &str, channels: usize, gamma: f64) {
        self.insert(
            format!("{prefix}/gamma"),
            Tensor::full(vec![channels], T::from_f64_lossy(gamma)),
            ParamKind::BnGamma,
        );
        self.insert(
            format!("{prefix}/beta"),
            Tensor::zeros(vec![channels]),
            ParamKind::BnBeta,
        );
        self.insert_bn_stats(prefix, RunningStats::new(channels));
    }
}
