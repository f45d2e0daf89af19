//! Static cost model: parameters, multiply-accumulates and activation memory,
//! obtained by tracing the forward pass symbolically.
//!
//! Memory is modelled, not measured: every op allocates a fresh f32 output,
//! convolutions that lower to a patch matrix also hold that workspace while
//! they run, and a value is freed right after its last consumer (greedy
//! liveness over the sequential schedule). The training figure keeps every
//! activation alive for the backward pass.

use std::time::Instant;

use serde::Serialize;

use crate::blocks::{BlockConfig, BlockKind};
use crate::engine::{ConvSpec, Mode};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::net::{build_network, Architecture, NetConfig};
use crate::tensor::Tensor;

const F32: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sym {
    id: usize,
    dims: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub op: &'static str,
    pub out_shape: [usize; 4],
    pub params: usize,
    /// Running mean/variance scalars (not trainable).
    pub running: usize,
    pub macs: u64,
    pub workspace_bytes: usize,
}

struct Step {
    inputs: Vec<usize>,
    output: usize,
    bytes: usize,
    workspace: usize,
}

/// Symbolic [`Exec`] backend that records costs instead of computing.
#[derive(Default)]
pub struct Tracer {
    pub layers: Vec<LayerCost>,
    steps: Vec<Step>,
    sizes: Vec<usize>,
}

impl Tracer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, dims: [usize; 4]) -> Sym {
        self.alloc(dims)
    }

    fn alloc(&mut self, dims: [usize; 4]) -> Sym {
        self.sizes.push(dims.iter().product::<usize>() * F32);
        Sym {
            id: self.sizes.len() - 1,
            dims,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        name: &str,
        op: &'static str,
        inputs: &[&Sym],
        dims: [usize; 4],
        params: usize,
        running: usize,
        macs: u64,
        workspace: usize,
    ) -> Sym {
        let out = self.alloc(dims);
        self.steps.push(Step {
            inputs: inputs.iter().map(|s| s.id).collect(),
            output: out.id,
            bytes: self.sizes[out.id],
            workspace,
        });
        self.layers.push(LayerCost {
            name: name.to_string(),
            op,
            out_shape: dims,
            params,
            running,
            macs,
            workspace_bytes: workspace,
        });
        out
    }

    /// Peak bytes under free-after-last-use. `input` and `output` stay live
    /// for the whole schedule.
    pub fn peak_bytes(&self, input: &Sym, output: &Sym) -> usize {
        let mut last_use = vec![usize::MAX; self.sizes.len()];
        for (i, s) in self.steps.iter().enumerate() {
            for &v in &s.inputs {
                last_use[v] = i;
            }
        }
        let mut live = self.sizes[input.id];
        let mut peak = live;
        let mut freed = vec![false; self.sizes.len()];
        for (i, s) in self.steps.iter().enumerate() {
            live += s.bytes;
            peak = peak.max(live + s.workspace);
            for &v in &s.inputs {
                if last_use[v] == i && v != input.id && v != output.id && !freed[v] {
                    freed[v] = true;
                    live -= self.sizes[v];
                }
            }
            // outputs nobody reads are released immediately
            if last_use[s.output] == usize::MAX && s.output != output.id {
                freed[s.output] = true;
                live -= self.sizes[s.output];
            }
        }
        peak
    }

    /// Bytes of every activation kept for the backward pass.
    pub fn retained_bytes(&self, input: &Sym) -> usize {
        self.sizes[input.id] + self.steps.iter().map(|s| s.bytes).sum::<usize>()
    }
}

fn same(op: &'static str, a: &Sym, b: &Sym) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.dims.to_vec(),
            rhs: b.dims.to_vec(),
        });
    }
    Ok(())
}

impl Exec<f32> for Tracer {
    type Value = Sym;

    fn dims(&self, v: &Sym) -> [usize; 4] {
        v.dims
    }

    fn conv(&mut self, x: &Sym, prefix: &str, spec: &ConvSpec) -> Result<Sym> {
        spec.validate()?;
        let [n, c, h, w] = x.dims;
        if c != spec.in_channels {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "input channels",
                expected: spec.in_channels,
                got: c,
            });
        }
        let (ho, wo) = (spec.out_extent(h)?, spec.out_extent(w)?);
        let macs = (spec.weight_count() * ho * wo * n) as u64;
        let ws = spec.workspace_len(ho, wo) * F32;
        Ok(self.record(
            prefix,
            "conv",
            &[x],
            [n, spec.out_channels, ho, wo],
            spec.param_count(),
            0,
            macs,
            ws,
        ))
    }

    fn batch_norm(&mut self, x: &Sym, prefix: &str) -> Result<Sym> {
        let c = x.dims[1];
        Ok(self.record(prefix, "batch_norm", &[x], x.dims, 2 * c, 2 * c, 0, 0))
    }

    fn relu6(&mut self, x: &Sym) -> Result<Sym> {
        Ok(self.record("", "relu6", &[x], x.dims, 0, 0, 0, 0))
    }

    fn relu(&mut self, x: &Sym) -> Result<Sym> {
        Ok(self.record("", "relu", &[x], x.dims, 0, 0, 0, 0))
    }

    fn add(&mut self, a: &Sym, b: &Sym) -> Result<Sym> {
        same("add", a, b)?;
        Ok(self.record("", "add", &[a, b], a.dims, 0, 0, 0, 0))
    }

    fn concat_channels(&mut self, xs: &[Sym]) -> Result<Sym> {
        let first = xs.first().ok_or_else(|| Error::config("concat of nothing"))?;
        let mut c = 0;
        for x in xs {
            for (axis, i) in [("batch", 0), ("height", 2), ("width", 3)] {
                if x.dims[i] != first.dims[i] {
                    return Err(Error::Dimension {
                        op: "concat_channels",
                        axis,
                        expected: first.dims[i],
                        got: x.dims[i],
                    });
                }
            }
            c += x.dims[1];
        }
        let refs: Vec<&Sym> = xs.iter().collect();
        let [n, _, h, w] = first.dims;
        Ok(self.record("", "concat", &refs, [n, c, h, w], 0, 0, 0, 0))
    }

    fn resize_bilinear(&mut self, x: &Sym, h: usize, w: usize) -> Result<Sym> {
        let [n, c, _, _] = x.dims;
        Ok(self.record("", "resize", &[x], [n, c, h, w], 0, 0, 0, 0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub input: [usize; 4],
    pub layers: Vec<LayerCost>,
    pub params: usize,
    pub running: usize,
    pub macs: u64,
    /// Inference peak under free-after-last-use, f32 bytes.
    pub peak_activation_bytes: usize,
    /// Every activation retained, as a training step needs.
    pub train_activation_bytes: usize,
    /// Expand + project weights over all inverted-residual blocks.
    pub pointwise_weights: usize,
}

/// Traces `arch` on an `input = [N, C, H, W]` tensor.
pub fn analyze(arch: &Architecture, input: [usize; 4]) -> Result<CostReport> {
    let mut t = Tracer::new();
    let x = t.input(input);
    let y = arch.forward(&mut t, &x)?;
    let peak = t.peak_bytes(&x, &y);
    let train = t.retained_bytes(&x);
    let layers = t.layers;
    Ok(CostReport {
        input,
        params: layers.iter().map(|l| l.params).sum(),
        running: layers.iter().map(|l| l.running).sum(),
        macs: layers.iter().map(|l| l.macs).sum(),
        peak_activation_bytes: peak,
        train_activation_bytes: train,
        pointwise_weights: arch.blocks().map(|b| b.cfg.pointwise_weight_count()).sum(),
        layers,
    })
}

pub fn count_params(cfg: &NetConfig) -> Result<usize> {
    let arch = Architecture::new(cfg)?;
    Ok(arch
        .param_shapes()
        .iter()
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum())
}

pub fn count_macs(cfg: &NetConfig, input: [usize; 4]) -> Result<u64> {
    Ok(analyze(&Architecture::new(cfg)?, input)?.macs)
}

pub fn peak_activation_bytes(cfg: &NetConfig, input: [usize; 4]) -> Result<usize> {
    Ok(analyze(&Architecture::new(cfg)?, input)?.peak_activation_bytes)
}

/// Block-level weight comparison of MBConv and MMBConv at `(c, t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NineFold {
    pub channels: usize,
    pub expansion: f64,
    pub mb_pointwise: usize,
    pub mmb_pointwise: usize,
    pub mb_block: usize,
    pub mmb_block: usize,
}

impl NineFold {
    pub fn new(channels: usize, expansion: f64) -> Self {
        let mb = BlockConfig::new(BlockKind::MBConv, channels, 1).with_expansion(expansion);
        let mmb = BlockConfig::new(BlockKind::MMBConv, channels, 1).with_expansion(expansion);
        Self {
            channels,
            expansion,
            mb_pointwise: mb.pointwise_weight_count(),
            mmb_pointwise: mmb.pointwise_weight_count(),
            mb_block: mb.weight_count(),
            mmb_block: mmb.weight_count(),
        }
    }

    pub fn pointwise_ratio(&self) -> f64 {
        self.mmb_pointwise as f64 / self.mb_pointwise as f64
    }

    pub fn block_ratio(&self) -> f64 {
        self.mmb_block as f64 / self.mb_block as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub warmup: usize,
    pub runs: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Self { warmup: 3, runs: 21 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantRow {
    pub name: String,
    pub config: NetConfig,
    pub report: CostReport,
    /// Median single-thread forward time in milliseconds.
    pub median_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub input: [usize; 3],
    pub rows: Vec<VariantRow>,
}

/// Median wall time of single-threaded forwards of a freshly built network.
pub fn time_forward(cfg: &NetConfig, input: [usize; 4], timing: Timing) -> Result<f64> {
    if timing.runs == 0 {
        return Err(Error::config("timing needs at least one run"));
    }
    let net = build_network::<f32>(cfg, 0)?;
    let x = Tensor::from_fn(input.to_vec(), |i| ((i * 2654435761) % 1000) as f32 / 1000.0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    pool.install(|| {
        for _ in 0..timing.warmup {
            net.forward(&x, Mode::Train)?;
        }
        let mut ms = Vec::with_capacity(timing.runs);
        for _ in 0..timing.runs {
            let t0 = Instant::now();
            let y = net.forward(&x, Mode::Train)?;
            ms.push(t0.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(y);
        }
        ms.sort_by(f64::total_cmp);
        Ok(ms[ms.len() / 2])
    })
}

/// One row per configuration at batch size 1; timing is optional.
pub fn compare_variants(
    cfgs: &[(String, NetConfig)],
    input: [usize; 3],
    timing: Option<Timing>,
) -> Result<Comparison> {
    if cfgs.is_empty() {
        return Err(Error::config("nothing to compare"));
    }
    let dims = [1, input[0], input[1], input[2]];
    let rows = cfgs
        .iter()
        .map(|(name, cfg)| {
            let report = analyze(&Architecture::new(cfg)?, dims)?;
            let median_ms = timing.map(|t| time_forward(cfg, dims, t)).transpose()?;
            Ok(VariantRow {
                name: name.clone(),
                config: cfg.clone(),
                report,
                median_ms,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { input, rows })
}

fn ratio(a: f64, b: f64) -> String {
    if b == 0.0 {
        "-".into()
    } else {
        format!("{:.2}", a / b)
    }
}

impl Comparison {
    fn table(&self) -> (Vec<&'static str>, Vec<Vec<String>>) {
        let ratios = self.rows.len() > 1;
        let mut head = vec!["variant", "params", "pointwise", "macs", "peak_bytes", "train_bytes", "median_ms"];
        if ratios {
            head.extend(["params_x", "pointwise_x", "macs_x", "peak_x", "time_x"]);
        }
        let base = &self.rows[0];
        let body = self
            .rows
            .iter()
            .map(|r| {
                let p = &r.report;
                let mut row = vec![
                    r.name.clone(),
                    p.params.to_string(),
                    p.pointwise_weights.to_string(),
                    p.macs.to_string(),
                    p.peak_activation_bytes.to_string(),
                    p.train_activation_bytes.to_string(),
                    r.median_ms.map_or("-".into(), |m| format!("{m:.3}")),
                ];
                if ratios {
                    let b = &base.report;
                    row.push(ratio(p.params as f64, b.params as f64));
                    row.push(ratio(p.pointwise_weights as f64, b.pointwise_weights as f64));
                    row.push(ratio(p.macs as f64, b.macs as f64));
                    row.push(ratio(p.peak_activation_bytes as f64, b.peak_activation_bytes as f64));
                    row.push(match (r.median_ms, base.median_ms) {
                        (Some(a), Some(b)) => ratio(a, b),
                        _ => "-".into(),
                    });
                }
                row
            })
            .collect();
        (head, body)
    }

    pub fn to_csv(&self) -> String {
        let (head, body) = self.table();
        let mut s = head.join(",");
        s.push('\n');
        for row in body {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_pretty(&self) -> String {
        let (head, body) = self.table();
        let mut widths: Vec<usize> = head.iter().map(|h| h.len()).collect();
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: Vec<String>| -> String {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let [c, h, w] = self.input;
        let mut s = format!("input {c}x{h}x{w}, batch 1\n");
        s.push_str(&line(head.iter().map(|h| h.to_string()).collect()));
        s.push('\n');
        for row in body {
            s.push_str(&line(row));
            s.push('\n');
        }
        s
    }
}
