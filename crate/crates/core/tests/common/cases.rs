//! Gradient-check cases: every differentiable op on random small shapes,
//! every block kind, the stem and a full three-branch network.

use mmbseg::blocks::{Block, BlockConfig, BlockKind, Replace, Stem};
use mmbseg::engine::{BnHyper, ConvSpec, Mode, RunningStats, Tape, Var, IGNORE_INDEX};
use mmbseg::net::{Architecture, NetConfig, SkipMerge};
use mmbseg::params::ParamKind;
use mmbseg::{Float, Result, Tensor};
use rand::Rng;

use super::{random_store, rng, run_model, uniform, GradCase};

pub enum Op {
    Conv(ConvSpec),
    Depthwise(ConvSpec),
    BnTrain,
    BnEval(Tensor<f64>, Tensor<f64>),
    Relu6,
    Relu,
    Add,
    Mul,
    Scale(f64),
    Mean,
    Concat,
    Resize(usize, usize),
    SoftmaxCe(Tensor<u16>),
}

pub struct OpCase {
    pub op: Op,
    pub inputs: Vec<(String, Tensor<f64>)>,
}

impl GradCase for OpCase {
    fn inputs(&self) -> Vec<(String, Tensor<f64>)> {
        self.inputs.clone()
    }

    fn run<T: Float>(&self, tape: &mut Tape<T>, values: &[Tensor<T>]) -> Result<(Var, Vec<Var>)> {
        let v: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = match &self.op {
            Op::Conv(spec) => tape.conv2d(v[0], v[1], v.get(2).copied(), spec)?,
            Op::Depthwise(spec) => tape.depthwise_conv2d(v[0], v[1], spec)?,
            Op::BnTrain => {
                let mut stats = RunningStats::new(values[1].numel());
                tape.batch_norm2d(v[0], v[1], v[2], &mut stats, Mode::Train, BnHyper::default(), "bn")?
            }
            Op::BnEval(mean, var) => {
                let mut stats = RunningStats {
                    mean: mean.cast::<T>().into_data(),
                    var: var.cast::<T>().into_data(),
                    updates: 1,
                };
                tape.batch_norm2d(v[0], v[1], v[2], &mut stats, Mode::Eval, BnHyper::default(), "bn")?
            }
            Op::Relu6 => tape.relu6(v[0]),
            Op::Relu => tape.relu(v[0]),
            Op::Add => tape.add(v[0], v[1])?,
            Op::Mul => tape.mul(v[0], v[1])?,
            Op::Scale(f) => tape.scale(v[0], T::from_f64_lossy(*f)),
            Op::Mean => tape.mean(v[0]),
            Op::Concat => tape.concat_channels(&v)?,
            Op::Resize(h, w) => tape.resize_bilinear(v[0], *h, *w)?,
            Op::SoftmaxCe(labels) => tape.softmax_cross_entropy(v[0], labels, IGNORE_INDEX)?,
        };
        Ok((y, v))
    }
}

pub fn op_cases(seed: u64) -> Vec<(&'static str, OpCase)> {
    let mut r = rng(seed);
    let mut t = |shape: &[usize], lo: f64, hi: f64| uniform(&mut r, shape, lo, hi);
    let mut r2 = rng(seed + 1000);
    let n = r2.gen_range(1..3);
    let c = r2.gen_range(1..5);
    let (h, w) = (r2.gen_range(3..7), r2.gen_range(3..7));
    let x = |t: &mut dyn FnMut(&[usize], f64, f64) -> Tensor<f64>| t(&[n, c, h, w], -2.0, 2.0);
    let named = |pairs: Vec<(&str, Tensor<f64>)>| pairs.into_iter().map(|(a, b)| (a.to_string(), b)).collect();

    let k = if r2.gen_bool(0.5) { 3 } else { 1 };
    let stride = r2.gen_range(1..3);
    let groups = if r2.gen_bool(0.5) { 1 } else { c };
    let cout = groups * r2.gen_range(1..3);
    let bias = r2.gen_bool(0.5);
    let spec = ConvSpec::dense(c, cout, k, stride).with_groups(groups).with_bias(bias);
    let mut conv_in = vec![("x", x(&mut t)), ("w", t(&spec.weight_shape(), -1.0, 1.0))];
    if bias {
        conv_in.push(("b", t(&[cout], -1.0, 1.0)));
    }
    let dw = ConvSpec::depthwise(c, stride);
    let (oh, ow) = (r2.gen_range(1..9), r2.gen_range(1..9));
    let labels = Tensor::from_fn(vec![n, h, w], |_| {
        if r2.gen_bool(0.15) {
            IGNORE_INDEX
        } else {
            r2.gen_range(0..c as u16 + 1)
        }
    });
    let mut labels = labels;
    labels.data_mut()[0] = 0;

    vec![
        ("conv2d", OpCase { op: Op::Conv(spec), inputs: named(conv_in) }),
        (
            "depthwise_conv2d",
            OpCase { op: Op::Depthwise(dw), inputs: named(vec![("x", x(&mut t)), ("w", t(&dw.weight_shape(), -1.0, 1.0))]) },
        ),
        (
            "batch_norm2d(train)",
            OpCase {
                op: Op::BnTrain,
                inputs: named(vec![("x", t(&[2, c, h, w], -2.0, 2.0)), ("gamma", t(&[c], 0.5, 1.5)), ("beta", t(&[c], -0.5, 0.5))]),
            },
        ),
        (
            "batch_norm2d(eval)",
            OpCase {
                op: Op::BnEval(t(&[c], -0.5, 0.5), t(&[c], 0.5, 2.0)),
                inputs: named(vec![("x", x(&mut t)), ("gamma", t(&[c], 0.5, 1.5)), ("beta", t(&[c], -0.5, 0.5))]),
            },
        ),
        ("relu6", OpCase { op: Op::Relu6, inputs: named(vec![("x", t(&[n, c, h, w], -3.0, 9.0))]) }),
        ("relu", OpCase { op: Op::Relu, inputs: named(vec![("x", x(&mut t))]) }),
        ("add", OpCase { op: Op::Add, inputs: named(vec![("a", x(&mut t)), ("b", x(&mut t))]) }),
        ("mul", OpCase { op: Op::Mul, inputs: named(vec![("a", x(&mut t)), ("b", x(&mut t))]) }),
        ("scale", OpCase { op: Op::Scale(-1.75), inputs: named(vec![("x", x(&mut t))]) }),
        ("mean", OpCase { op: Op::Mean, inputs: named(vec![("x", x(&mut t))]) }),
        (
            "concat_channels",
            OpCase { op: Op::Concat, inputs: named(vec![("a", x(&mut t)), ("b", t(&[n, c + 1, h, w], -2.0, 2.0))]) },
        ),
        ("resize_bilinear", OpCase { op: Op::Resize(oh, ow), inputs: named(vec![("x", x(&mut t))]) }),
        (
            "softmax_cross_entropy",
            OpCase { op: Op::SoftmaxCe(labels), inputs: named(vec![("logits", t(&[n, c + 1, h, w], -3.0, 3.0))]) },
        ),
    ]
}

pub enum Model {
    Block(Block),
    Stem(Stem),
    Net(Architecture),
}

pub struct ModelCase {
    model: Model,
    names: Vec<String>,
    values: Vec<Tensor<f64>>,
    norms: Vec<(String, usize)>,
}

impl ModelCase {
    pub fn new(model: Model, x_shape: &[usize], seed: u64) -> Self {
        let shapes = match &model {
            Model::Block(b) => b.cfg.param_shapes(&b.prefix),
            Model::Stem(s) => s.param_shapes(),
            Model::Net(a) => a.param_shapes(),
        };
        let norms = shapes
            .iter()
            .filter(|(_, _, k)| *k == ParamKind::BnGamma)
            .map(|(n, s, _)| (n.trim_end_matches("/gamma").to_string(), s[0]))
            .collect();
        let mut r = rng(seed);
        let x = uniform(&mut r, x_shape, -1.0, 1.0);
        let params = random_store(&shapes, &mut r);
        let mut names = vec!["x".to_string()];
        let mut values = vec![x];
        for (n, v) in params {
            names.push(n);
            values.push(v);
        }
        Self { model, names, values, norms }
    }
}

impl GradCase for ModelCase {
    fn inputs(&self) -> Vec<(String, Tensor<f64>)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    fn run<T: Float>(&self, tape: &mut Tape<T>, values: &[Tensor<T>]) -> Result<(Var, Vec<Var>)> {
        run_model(tape, &self.names, values, &self.norms, |rec, x| match &self.model {
            Model::Block(b) => b.forward(rec, x),
            Model::Stem(s) => s.forward(rec, x),
            Model::Net(a) => a.forward(rec, x),
        })
    }
}

pub fn model_cases(i: u64) -> Vec<(&'static str, ModelCase)> {
    let mut r = rng(i + 77);
    let c = [4, 6, 8][r.gen_range(0..3)];
    let stride = r.gen_range(1..3);
    let t = [1.0, 2.0, 4.0][r.gen_range(0..3)];
    let replace = [Replace::Both, Replace::ExpandOnly, Replace::ProjectOnly][r.gen_range(0..3)];
    let out = if stride == 2 && r.gen_bool(0.5) { c + 2 } else { c };
    let block = |kind| {
        let cfg = BlockConfig::new(kind, c, stride)
            .with_expansion(t)
            .with_out_channels(out)
            .with_replace(replace);
        Model::Block(Block::new(cfg, "enc0/0").unwrap())
    };
    let kind = [BlockKind::Residual, BlockKind::MBConv, BlockKind::MMBConv][i as usize % 3];
    let add = i % 4 >= 2;
    let net = NetConfig {
        scales: 3,
        channel_schedule: if add { vec![6, 6, 6] } else { vec![6, 6, 8] },
        blocks_per_branch: vec![1, 1, 1],
        block_kind: kind,
        expansion: 2.0,
        num_classes: 3,
        stem_channels: if i.is_multiple_of(2) { 6 } else { 4 },
        skip_merge: if add { SkipMerge::Add } else { SkipMerge::Concat },
        in_channels: 3,
        decoder_blocks: 1,
        mmb_replace: Replace::Both,
    };
    let bx = [2, c, 6, 6];
    vec![
        ("residual block", ModelCase::new(block(BlockKind::Residual), &bx, i)),
        ("MBConv block", ModelCase::new(block(BlockKind::MBConv), &bx, i)),
        ("MMBConv block", ModelCase::new(block(BlockKind::MMBConv), &bx, i)),
        ("stem", ModelCase::new(Model::Stem(Stem::new(3, 6)), &[2, 3, 8, 8], i)),
        ("S=3 network", ModelCase::new(Model::Net(Architecture::new(&net).unwrap()), &[2, 3, 32, 32], i)),
    ]
}
