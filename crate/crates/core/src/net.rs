//! Multi-branch U-Net: a stride-4 stem, `S` encoder branches that each halve
//! the resolution of the previous one, a decoder that upsamples and merges
//! the matching encoder feature, and a classifier head that restores the
//! input resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Block, BlockConfig, BlockKind, Replace, Stem};
use crate::engine::{BnHyper, ConvSpec, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::exec::{Eager, Exec, Recorder};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMerge {
    /// Concatenate, then fuse back to the branch width with 1x1 conv + BN + ReLU6.
    #[default]
    Concat,
    /// Elementwise sum; needs equal widths on both sides.
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub scales: usize,
    pub channel_schedule: Vec<usize>,
    pub blocks_per_branch: Vec<usize>,
    pub block_kind: BlockKind,
    #[serde(default = "default_expansion")]
    pub expansion: f64,
    pub num_classes: usize,
    pub stem_channels: usize,
    #[serde(default)]
    pub skip_merge: SkipMerge,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Blocks after each decoder merge.
    #[serde(default = "default_decoder_blocks")]
    pub decoder_blocks: usize,
    /// Which pointwise convolutions MMBConv blocks widen.
    #[serde(default)]
    pub mmb_replace: Replace,
}

fn default_expansion() -> f64 {
    6.0
}
fn default_in_channels() -> usize {
    3
}
fn default_decoder_blocks() -> usize {
    1
}

pub const PRESETS: [&str; 5] = ["baseline", "uniform", "uniform-mbconv", "uniform-mmbconv", "tempered"];

impl NetConfig {
    /// Desk-scale presets. `uniform*` satisfy [`NetConfig::is_uniform`];
    /// `tempered` narrows monotonically towards the coarse branches.
    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        let (schedule, blocks, kind) = match name {
            "baseline" => (vec![32, 64, 128, 256], vec![2; 4], BlockKind::Residual),
            "uniform" => (vec![48; 4], vec![3; 4], BlockKind::Residual),
            "uniform-mbconv" => (vec![48; 4], vec![3; 4], BlockKind::MBConv),
            "uniform-mmbconv" => (vec![48; 4], vec![3; 4], BlockKind::MMBConv),
            "tempered" => (vec![56, 48, 40, 32], vec![3; 4], BlockKind::MMBConv),
            _ => {
                return Err(Error::config(format!(
                    "unknown preset `{name}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            scales: schedule.len(),
            stem_channels: schedule[0],
            channel_schedule: schedule,
            blocks_per_branch: blocks,
            block_kind: kind,
            expansion: default_expansion(),
            num_classes,
            skip_merge: SkipMerge::Concat,
            in_channels: 3,
            decoder_blocks: 1,
            mmb_replace: Replace::Both,
        })
    }

    pub fn with_kind(mut self, kind: BlockKind) -> Self {
        self.block_kind = kind;
        self
    }

    /// Equal width and equal depth on every branch.
    pub fn is_uniform(&self) -> bool {
        let same = |v: &[usize]| v.windows(2).all(|w| w[0] == w[1]);
        same(&self.channel_schedule) && same(&self.blocks_per_branch)
    }

    /// Input extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.scales + 1)
    }

    /// Every violated constraint, in field order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.scales < 2 {
            out.push(format!("scales must be at least 2, got {}", self.scales));
        }
        if self.channel_schedule.len() != self.scales {
            out.push(format!(
                "channel_schedule has {} entries, scales is {}",
                self.channel_schedule.len(),
                self.scales
            ));
        }
        if self.blocks_per_branch.len() != self.scales {
            out.push(format!(
                "blocks_per_branch has {} entries, scales is {}",
                self.blocks_per_branch.len(),
                self.scales
            ));
        }
        if self.channel_schedule.contains(&0) {
            out.push("channel_schedule entries must be positive".into());
        }
        if self.blocks_per_branch.contains(&0) {
            out.push("blocks_per_branch entries must be positive".into());
        }
        if !(self.expansion.is_finite() && self.expansion > 0.0) {
            out.push(format!("expansion must be positive, got {}", self.expansion));
        } else if self.block_kind != BlockKind::Residual {
            for &c in &self.channel_schedule {
                if c > 0 && ((self.expansion * c as f64).round() as usize) < c {
                    out.push(format!("expansion {} shrinks width {c}", self.expansion));
                    break;
                }
            }
        }
        if self.num_classes < 2 {
            out.push(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.num_classes > crate::engine::IGNORE_INDEX as usize {
            out.push(format!("num_classes {} collides with the ignore index", self.num_classes));
        }
        if self.stem_channels == 0 {
            out.push("stem_channels must be positive".into());
        }
        if self.in_channels == 0 {
            out.push("in_channels must be positive".into());
        }
        if self.skip_merge == SkipMerge::Add
            && self.channel_schedule.windows(2).any(|w| w[0] != w[1])
        {
            out.push("skip_merge `add` needs equal widths on every branch".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::config(p.join("; ")))
        }
    }

    fn block(&self, channels: usize, stride: usize) -> BlockConfig {
        BlockConfig::new(self.block_kind, channels, stride)
            .with_expansion(self.expansion)
            .with_replace(self.mmb_replace)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Fuse {
    prefix: String,
    spec: ConvSpec,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderStage {
    fuse: Option<Fuse>,
    blocks: Vec<Block>,
}

/// The layer graph implied by a [`NetConfig`], independent of parameter
/// values and precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    cfg: NetConfig,
    stem: Stem,
    entry: Option<ConvSpec>,
    encoder: Vec<Vec<Block>>,
    /// `decoder[i]` merges into branch `i`; there is none for the coarsest.
    decoder: Vec<DecoderStage>,
    head: ConvSpec,
}

const ENTRY: &str = "stem/1/proj";
const HEAD_BN: &str = "head/0/bn";
const HEAD_CONV: &str = "head/0/conv";

impl Architecture {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let c = &cfg.channel_schedule;
        let stem = Stem::new(cfg.in_channels, cfg.stem_channels);
        let entry = (cfg.stem_channels != c[0]).then(|| ConvSpec::dense(cfg.stem_channels, c[0], 1, 1));
        let mut encoder = Vec::new();
        for (i, &n) in cfg.blocks_per_branch.iter().enumerate() {
            let mut branch = Vec::new();
            for j in 0..n {
                let bc = if i > 0 && j == 0 {
                    cfg.block(c[i - 1], 2).with_out_channels(c[i])
                } else {
                    cfg.block(c[i], 1)
                };
                branch.push(Block::new(bc, format!("enc{i}/{j}"))?);
            }
            encoder.push(branch);
        }
        let mut decoder = Vec::new();
        for i in 0..cfg.scales - 1 {
            let fuse = match cfg.skip_merge {
                SkipMerge::Concat => Some(Fuse {
                    prefix: format!("dec{i}/0/fuse"),
                    spec: ConvSpec::dense(c[i] + c[i + 1], c[i], 1, 1),
                }),
                SkipMerge::Add => None,
            };
            let blocks = (0..cfg.decoder_blocks)
                .map(|j| Block::new(cfg.block(c[i], 1), format!("dec{i}/{}", j + 1)))
                .collect::<Result<_>>()?;
            decoder.push(DecoderStage { fuse, blocks });
        }
        let head = ConvSpec::dense(c[0], cfg.num_classes, 1, 1).with_bias(true);
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            entry,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &[Vec<Block>] {
        &self.encoder
    }

    /// Every block of the network in execution order.
    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.encoder
            .iter()
            .flatten()
            .chain(self.decoder.iter().rev().flat_map(|d| d.blocks.iter()))
    }

    /// Every trainable tensor the forward pass reads, with its shape.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        let mut out = self.stem.param_shapes();
        let conv_bn = |out: &mut Vec<_>, prefix: &str, bn: &str, spec: &ConvSpec| {
            out.push((format!("{prefix}/weight"), spec.weight_shape().to_vec(), ParamKind::ConvWeight));
            out.push((format!("{bn}/gamma"), vec![spec.out_channels], ParamKind::BnGamma));
            out.push((format!("{bn}/beta"), vec![spec.out_channels], ParamKind::BnBeta));
        };
        if let Some(spec) = &self.entry {
            conv_bn(&mut out, ENTRY, &format!("{ENTRY}_bn"), spec);
        }
        for b in self.encoder.iter().flatten() {
            out.extend(b.cfg.param_shapes(&b.prefix));
        }
        for d in self.decoder.iter().rev() {
            if let Some(f) = &d.fuse {
                conv_bn(&mut out, &f.prefix, &format!("{}_bn", f.prefix), &f.spec);
            }
            for b in &d.blocks {
                out.extend(b.cfg.param_shapes(&b.prefix));
            }
        }
        let c0 = self.head.in_channels;
        out.push((format!("{HEAD_BN}/gamma"), vec![c0], ParamKind::BnGamma));
        out.push((format!("{HEAD_BN}/beta"), vec![c0], ParamKind::BnBeta));
        out.push((format!("{HEAD_CONV}/weight"), self.head.weight_shape().to_vec(), ParamKind::ConvWeight));
        out.push((format!("{HEAD_CONV}/bias"), vec![self.cfg.num_classes], ParamKind::ConvBias));
        out
    }

    /// Batch-norm prefixes with their channel counts.
    pub fn norm_shapes(&self) -> Vec<(String, usize)> {
        self.param_shapes()
            .into_iter()
            .filter_map(|(name, shape, kind)| {
                (kind == ParamKind::BnGamma).then(|| (name.trim_end_matches("/gamma").to_string(), shape[0]))
            })
            .collect()
    }

    pub fn init_params<T: Float>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.stem.init_params(&mut store, &mut rng);
        if let Some(spec) = &self.entry {
            store.init_conv(ENTRY, spec, &mut rng);
            store.init_bn(&format!("{ENTRY}_bn"), spec.out_channels, 1.0);
        }
        for b in self.encoder.iter().flatten() {
            b.init_params(&mut store, &mut rng);
        }
        for d in self.decoder.iter().rev() {
            if let Some(f) = &d.fuse {
                store.init_conv(&f.prefix, &f.spec, &mut rng);
                store.init_bn(&format!("{}_bn", f.prefix), f.spec.out_channels, 1.0);
            }
            for b in &d.blocks {
                b.init_params(&mut store, &mut rng);
            }
        }
        store.init_bn(HEAD_BN, self.head.in_channels, 1.0);
        store.init_conv(HEAD_CONV, &self.head, &mut rng);
        store
    }

    /// Rejects inputs the network cannot process before any compute.
    pub fn check_input(&self, dims: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = dims;
        if c != self.cfg.in_channels {
            return Err(Error::Dimension {
                op: "network input",
                axis: "channels",
                expected: self.cfg.in_channels,
                got: c,
            });
        }
        let f = self.cfg.divisor();
        for (axis, v) in [("height", h), ("width", w)] {
            if v % f != 0 {
                return Err(Error::Divisibility {
                    op: "network input",
                    axis,
                    factor: f,
                    got: v,
                });
            }
        }
        Ok(())
    }

    pub fn forward<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let dims = e.dims(x);
        self.check_input(dims)?;
        let mut h = self.stem.forward(e, x)?;
        if let Some(spec) = &self.entry {
            h = e.conv(&h, ENTRY, spec)?;
            h = e.batch_norm(&h, &format!("{ENTRY}_bn"))?;
            h = e.relu6(&h)?;
        }
        let mut feats: Vec<E::Value> = Vec::with_capacity(self.encoder.len());
        for branch in &self.encoder {
            let mut cur: Option<E::Value> = None;
            for b in branch {
                let inp = cur.as_ref().or(feats.last()).unwrap_or(&h);
                cur = Some(b.forward(e, inp)?);
            }
            feats.push(cur.expect("branches have at least one block"));
        }
        drop(h);
        let mut h = feats.pop().expect("at least two branches");
        for (i, stage) in self.decoder.iter().enumerate().rev() {
            let skip = feats.pop().expect("one skip per decoder stage");
            let [_, _, sh, sw] = e.dims(&skip);
            let up = e.resize_bilinear(&h, sh, sw)?;
            h = match &stage.fuse {
                Some(f) => {
                    let cat = e.concat_channels(&[skip, up])?;
                    let y = e.conv(&cat, &f.prefix, &f.spec)?;
                    let y = e.batch_norm(&y, &format!("{}_bn", f.prefix))?;
                    e.relu6(&y)?
                }
                None => e.add(&skip, &up)?,
            };
            for b in &stage.blocks {
                h = b.forward(e, &h)?;
            }
            debug_assert_eq!(e.dims(&h)[1], self.cfg.channel_schedule[i]);
        }
        let h = e.batch_norm(&h, HEAD_BN)?;
        let h = e.relu6(&h)?;
        let h = e.conv(&h, HEAD_CONV, &self.head)?;
        e.resize_bilinear(&h, dims[2], dims[3])
    }
}

/// One row of [`Network::describe`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BranchRow {
    pub name: String,
    /// Resolution divisor relative to the input.
    pub divisor: usize,
    pub channels: usize,
    pub blocks: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub arch: Architecture,
    pub seed: u64,
    pub store: ParamStore<T>,
}

impl<T: Float> Network<T> {
    pub fn config(&self) -> &NetConfig {
        self.arch.config()
    }

    /// Output logits `(N, K, H, W)` without recording gradients.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.arch.forward(&mut Eager::new(&self.store, mode), x)
    }

    /// Records a forward pass on `tape`; returns the logits and the parameter
    /// leaves in first-use order.
    pub fn record(
        &mut self,
        tape: &mut Tape<T>,
        x: Tensor<T>,
        mode: Mode,
    ) -> Result<(Var, Vec<(String, Var)>)> {
        let mut rec = Recorder::new(tape, &mut self.store, mode);
        let xv = rec.input(x);
        let y = self.arch.forward(&mut rec, &xv)?;
        Ok((y, rec.bindings()))
    }

    /// Sets every running statistic to the batch statistics of `x`, so an
    /// untrained network can be evaluated in eval mode.
    pub fn calibrate_bn(&mut self, x: &Tensor<T>) -> Result<()> {
        let mut tape = Tape::new();
        let mut rec = Recorder::new(&mut tape, &mut self.store, Mode::Train).with_bn(BnHyper {
            momentum: 1.0,
            ..BnHyper::default()
        });
        let xv = rec.input(x.clone());
        self.arch.forward(&mut rec, &xv)?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Per-branch summary. Rows are the stem, each branch (encoder and
    /// decoder parts together) and the head, so the params column sums to
    /// the trainable total.
    pub fn describe(&self) -> Vec<BranchRow> {
        let cfg = self.config();
        let mut rows = vec![BranchRow {
            name: "stem".into(),
            divisor: 4,
            channels: cfg.stem_channels,
            blocks: 0,
            params: self.store.count_with_prefix("stem/"),
        }];
        for i in 0..cfg.scales {
            let dec_blocks = if i + 1 < cfg.scales { cfg.decoder_blocks } else { 0 };
            rows.push(BranchRow {
                name: format!("branch{i}"),
                divisor: 4 << i,
                channels: cfg.channel_schedule[i],
                blocks: cfg.blocks_per_branch[i] + dec_blocks,
                params: self.store.count_with_prefix(&format!("enc{i}/"))
                    + self.store.count_with_prefix(&format!("dec{i}/")),
            });
        }
        rows.push(BranchRow {
            name: "head".into(),
            divisor: 1,
            channels: cfg.num_classes,
            blocks: 0,
            params: self.store.count_with_prefix("head/"),
        });
        rows
    }

    pub fn cast<U: Float>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            seed: self.seed,
            store: self.store.cast(),
        }
    }

    /// Checks that `store` holds exactly the tensors the architecture reads.
    pub fn audit(&self) -> Result<()> {
        audit_store(&self.arch, &self.store)
    }
}

pub fn audit_store<T: Float>(arch: &Architecture, store: &ParamStore<T>) -> Result<()> {
    use crate::error::CheckpointError;
    let expected = arch.param_shapes();
    for (name, shape, _) in &expected {
        let p = store
            .get(name)
            .map_err(|_| CheckpointError::MissingTensor(name.clone()))?;
        if p.value.shape() != shape.as_slice() {
            return Err(CheckpointError::TensorShape {
                name: name.clone(),
                expected: shape.clone(),
                found: p.value.shape().to_vec(),
            }
            .into());
        }
    }
    if store.len() != expected.len() {
        let extra: Vec<_> = store
            .names()
            .filter(|n| !expected.iter().any(|(e, _, _)| e == n))
            .collect();
        return Err(Error::Contract(format!("unexpected parameters {extra:?}")));
    }
    for (prefix, c) in arch.norm_shapes() {
        let s = store
            .bn_stats(&prefix)
            .map_err(|_| CheckpointError::MissingTensor(format!("{prefix}/running_mean")))?;
        if s.mean.len() != c || s.var.len() != c {
            return Err(CheckpointError::TensorShape {
                name: format!("{prefix}/running_mean"),
                expected: vec![c],
                found: vec![s.mean.len()],
            }
            .into());
        }
    }
    Ok(())
}

/// Deterministic construction: the same `(cfg, seed)` gives bit-identical
/// parameters.
pub fn build_network<T: Float>(cfg: &NetConfig, seed: u64) -> Result<Network<T>> {
    let arch = Architecture::new(cfg)?;
    let store = arch.init_params(seed);
    Ok(Network { arch, seed, store })
}
