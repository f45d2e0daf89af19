//! Residual, MBConv and 3x3-MBConv blocks plus the stride-4 stem.
//!
//! MBConv: 1x1 expand -> BN -> ReLU6 -> 3x3 depthwise (stride s) -> BN ->
//! ReLU6 -> 1x1 project -> BN, with an identity shortcut when the block keeps
//! its shape. The MMBConv variant uses padded 3x3 kernels for the expand and
//! project convolutions; nothing else changes, so both variants produce the
//! same activation shapes.
//!
//! The projection has no activation (linear bottleneck). Stride-1 blocks
//! start with the last BN gamma at zero, which makes them exact identities at
//! initialization while keeping that gamma trainable.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::ConvSpec;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    Residual,
    MBConv,
    MMBConv,
}

/// Which of the two pointwise convolutions an MMBConv block widens to 3x3.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replace {
    #[default]
    Both,
    ExpandOnly,
    ProjectOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: BlockKind,
    /// Input channels.
    pub channels: usize,
    /// Output channels when they differ from the input (only legal together
    /// with stride 2, where there is no identity shortcut).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default = "default_expansion")]
    pub expansion: f64,
    pub stride: usize,
    #[serde(default)]
    pub replace: Replace,
}

fn default_expansion() -> f64 {
    6.0
}

impl BlockConfig {
    pub fn new(kind: BlockKind, channels: usize, stride: usize) -> Self {
        Self {
            kind,
            channels,
            out_channels: None,
            expansion: default_expansion(),
            stride,
            replace: Replace::Both,
        }
    }

    pub fn with_expansion(mut self, t: f64) -> Self {
        self.expansion = t;
        self
    }

    pub fn with_out_channels(mut self, c: usize) -> Self {
        self.out_channels = Some(c);
        self
    }

    pub fn with_replace(mut self, r: Replace) -> Self {
        self.replace = r;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels.unwrap_or(self.channels)
    }

    /// Width of the inverted-residual interior: `round(t * C)`.
    pub fn expanded(&self) -> usize {
        (self.expansion * self.channels as f64).round() as usize
    }

    pub fn has_shortcut(&self) -> bool {
        self.stride == 1 && self.channels == self.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.out_channels() == 0 {
            return Err(Error::config("block with zero channels"));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::config(format!("block stride {} not in {{1,2}}", self.stride)));
        }
        if self.stride == 1 && self.out_channels() != self.channels {
            return Err(Error::config(
                "a stride-1 block must keep its channel count (identity shortcut)",
            ));
        }
        if self.kind != BlockKind::Residual {
            if !(self.expansion.is_finite() && self.expansion > 0.0) {
                return Err(Error::config(format!("expansion {} must be positive", self.expansion)));
            }
            if self.expanded() < self.channels {
                return Err(Error::config(format!(
                    "expanded width {} is below the block width {}",
                    self.expanded(),
                    self.channels
                )));
            }
        }
        Ok(())
    }

    fn expand_kernel(&self) -> usize {
        match (self.kind, self.replace) {
            (BlockKind::MMBConv, Replace::Both | Replace::ExpandOnly) => 3,
            _ => 1,
        }
    }

    fn project_kernel(&self) -> usize {
        match (self.kind, self.replace) {
            (BlockKind::MMBConv, Replace::Both | Replace::ProjectOnly) => 3,
            _ => 1,
        }
    }

    /// Every convolution of the block as `(stage, spec)`.
    pub fn convs(&self) -> Vec<(&'static str, ConvSpec)> {
        let (cin, cout) = (self.channels, self.out_channels());
        match self.kind {
            BlockKind::Residual => {
                let mut v = vec![
                    ("conv1", ConvSpec::dense(cin, cout, 3, self.stride)),
                    ("conv2", ConvSpec::dense(cout, cout, 3, 1)),
                ];
                if !self.has_shortcut() {
                    v.push(("shortcut", ConvSpec::dense(cin, cout, 1, self.stride)));
                }
                v
            }
            BlockKind::MBConv | BlockKind::MMBConv => {
                let e = self.expanded();
                vec![
                    ("expand", ConvSpec::dense(cin, e, self.expand_kernel(), 1)),
                    ("dw", ConvSpec::depthwise(e, self.stride)),
                    ("project", ConvSpec::dense(e, cout, self.project_kernel(), 1)),
                ]
            }
        }
    }

    /// Every batch norm as `(stage, channels)`.
    pub fn norms(&self) -> Vec<(&'static str, usize)> {
        let cout = self.out_channels();
        match self.kind {
            BlockKind::Residual => {
                let mut v = vec![("bn1", cout), ("bn2", cout)];
                if !self.has_shortcut() {
                    v.push(("shortcut_bn", cout));
                }
                v
            }
            BlockKind::MBConv | BlockKind::MMBConv => {
                let e = self.expanded();
                vec![("expand_bn", e), ("dw_bn", e), ("project_bn", cout)]
            }
        }
    }

    /// Batch norm whose gamma starts at zero on identity-shortcut blocks.
    fn final_norm(&self) -> &'static str {
        match self.kind {
            BlockKind::Residual => "bn2",
            _ => "project_bn",
        }
    }

    /// Declared parameter shapes, derived from the configuration alone.
    pub fn param_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>, ParamKind)> {
        let mut out = Vec::new();
        for (stage, spec) in self.convs() {
            out.push((
                format!("{prefix}/{stage}/weight"),
                spec.weight_shape().to_vec(),
                ParamKind::ConvWeight,
            ));
        }
        for (stage, c) in self.norms() {
            out.push((format!("{prefix}/{stage}/gamma"), vec![c], ParamKind::BnGamma));
            out.push((format!("{prefix}/{stage}/beta"), vec![c], ParamKind::BnBeta));
        }
        out
    }

    /// Weights of the expand and project convolutions (zero for residual
    /// blocks).
    pub fn pointwise_weight_count(&self) -> usize {
        self.convs()
            .iter()
            .filter(|(s, _)| matches!(*s, "expand" | "project"))
            .map(|(_, c)| c.weight_count())
            .sum()
    }

    pub fn weight_count(&self) -> usize {
        self.convs().iter().map(|(_, c)| c.weight_count()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.norms().iter().map(|(_, c)| 2 * c).sum::<usize>()
    }
}

/// A block bound to its parameter prefix, e.g. `enc2/1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub cfg: BlockConfig,
    pub prefix: String,
}

impl Block {
    pub fn new(cfg: BlockConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prefix: prefix.into(),
        })
    }

    pub fn init_params<T: Float>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for (stage, spec) in self.cfg.convs() {
            store.init_conv(&format!("{}/{stage}", self.prefix), &spec, rng);
        }
        let zero_last = self.cfg.has_shortcut();
        for (stage, c) in self.cfg.norms() {
            let gamma = if zero_last && stage == self.cfg.final_norm() { 0.0 } else { 1.0 };
            store.init_bn(&format!("{}/{stage}", self.prefix), c, gamma);
        }
    }

    pub fn forward<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        match self.cfg.kind {
            BlockKind::Residual => residual_block_forward(e, x, &self.prefix, &self.cfg),
            BlockKind::MBConv => mbconv_forward(e, x, &self.prefix, &self.cfg),
            BlockKind::MMBConv => mmbconv_forward(e, x, &self.prefix, &self.cfg),
        }
    }
}

fn check_input<T: Float, E: Exec<T>>(e: &E, x: &E::Value, cfg: &BlockConfig) -> Result<()> {
    let c = e.dims(x)[1];
    if c != cfg.channels {
        return Err(Error::config(format!(
            "block expects {} input channels, got {c}",
            cfg.channels
        )));
    }
    cfg.validate()
}

fn inverted_residual<T: Float, E: Exec<T>>(
    e: &mut E,
    x: &E::Value,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<E::Value> {
    check_input(e, x, cfg)?;
    let convs = cfg.convs();
    let mut h = x.clone();
    for (i, (stage, spec)) in convs.iter().enumerate() {
        h = e.conv(&h, &format!("{prefix}/{stage}"), spec)?;
        h = e.batch_norm(&h, &format!("{prefix}/{stage}_bn"))?;
        if i + 1 < convs.len() {
            h = e.relu6(&h)?;
        }
    }
    if cfg.has_shortcut() {
        h = e.add(&h, x)?;
    }
    Ok(h)
}

pub fn mbconv_forward<T: Float, E: Exec<T>>(
    e: &mut E,
    x: &E::Value,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<E::Value> {
    if cfg.kind != BlockKind::MBConv {
        return Err(Error::config(format!("mbconv_forward given a {:?} block", cfg.kind)));
    }
    inverted_residual(e, x, prefix, cfg)
}

pub fn mmbconv_forward<T: Float, E: Exec<T>>(
    e: &mut E,
    x: &E::Value,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<E::Value> {
    if cfg.kind != BlockKind::MMBConv {
        return Err(Error::config(format!("mmbconv_forward given a {:?} block", cfg.kind)));
    }
    inverted_residual(e, x, prefix, cfg)
}

/// conv3x3 -> BN -> ReLU -> conv3x3 -> BN, plus the shortcut. There is no
/// activation after the sum, so a zero final gamma gives an exact identity.
/// The stride-2 variant projects the shortcut with a strided 1x1 conv + BN.
pub fn residual_block_forward<T: Float, E: Exec<T>>(
    e: &mut E,
    x: &E::Value,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<E::Value> {
    if cfg.kind != BlockKind::Residual {
        return Err(Error::config(format!(
            "residual_block_forward given a {:?} block",
            cfg.kind
        )));
    }
    check_input(e, x, cfg)?;
    let convs = cfg.convs();
    let mut h = e.conv(x, &format!("{prefix}/conv1"), &convs[0].1)?;
    h = e.batch_norm(&h, &format!("{prefix}/bn1"))?;
    h = e.relu(&h)?;
    h = e.conv(&h, &format!("{prefix}/conv2"), &convs[1].1)?;
    h = e.batch_norm(&h, &format!("{prefix}/bn2"))?;
    let skip = if cfg.has_shortcut() {
        x.clone()
    } else {
        let s = e.conv(x, &format!("{prefix}/shortcut"), &convs[2].1)?;
        e.batch_norm(&s, &format!("{prefix}/shortcut_bn"))?
    };
    e.add(&h, &skip)
}

/// Two 3x3 stride-2 conv + BN + ReLU6 stages: `(N, Cin, H, W)` to
/// `(N, C0, H/4, W/4)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Stem {
    pub in_channels: usize,
    pub channels: usize,
    pub prefix: String,
}

impl Stem {
    pub fn new(in_channels: usize, channels: usize) -> Self {
        Self {
            in_channels,
            channels,
            prefix: "stem/0".into(),
        }
    }

    pub fn convs(&self) -> [(&'static str, ConvSpec); 2] {
        [
            ("conv1", ConvSpec::dense(self.in_channels, self.channels, 3, 2)),
            ("conv2", ConvSpec::dense(self.channels, self.channels, 3, 2)),
        ]
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        let mut out = Vec::new();
        for (i, (stage, spec)) in self.convs().into_iter().enumerate() {
            out.push((
                format!("{}/{stage}/weight", self.prefix),
                spec.weight_shape().to_vec(),
                ParamKind::ConvWeight,
            ));
            for (t, kind) in [("gamma", ParamKind::BnGamma), ("beta", ParamKind::BnBeta)] {
                out.push((format!("{}/bn{}/{t}", self.prefix, i + 1), vec![self.channels], kind));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    pub fn init_params<T: Float>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for (i, (stage, spec)) in self.convs().into_iter().enumerate() {
            store.init_conv(&format!("{}/{stage}", self.prefix), &spec, rng);
            store.init_bn(&format!("{}/bn{}", self.prefix, i + 1), self.channels, 1.0);
        }
    }

    pub fn forward<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        stem_forward(e, x, self)
    }
}

pub fn stem_forward<T: Float, E: Exec<T>>(e: &mut E, x: &E::Value, stem: &Stem) -> Result<E::Value> {
    let [_, c, h, w] = e.dims(x);
    if c != stem.in_channels {
        return Err(Error::config(format!(
            "stem expects {} input channels, got {c}",
            stem.in_channels
        )));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::config(format!(
            "stem input {h}x{w} is not divisible by 4; pad first"
        )));
    }
    let mut y = x.clone();
    for (i, (stage, spec)) in stem.convs().into_iter().enumerate() {
        y = e.conv(&y, &format!("{}/{stage}", stem.prefix), &spec)?;
        y = e.batch_norm(&y, &format!("{}/bn{}", stem.prefix, i + 1))?;
        y = e.relu6(&y)?;
    }
    Ok(y)
}
