//! Training runs: augment -> forward -> cross-entropy -> backward ->
//! Lookahead(RAdam) under a poly schedule, with a metrics CSV, periodic
//! checkpoints and exact resume.
//!
//! Every random draw of step `s` comes from streams keyed by `(seed, s)`, and
//! the batch order of an epoch from `(seed, epoch)`, so a run resumed from a
//! checkpoint replays the unbroken run bit for bit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{augment, batch_indices, collate, derive_rng, AugmentConfig, Dataset, Sample};
use crate::engine::{Mode, Tape, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, mean_iou, AbsentClass, InferConfig};
use crate::net::{build_network, NetConfig, Network};
use crate::optim::{OptimConfig, OptimState};
use crate::tensor::Tensor;

const DOMAIN_AUGMENT: u64 = 0x4155_4745;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,lr,loss,val_miou";
pub const CONFIG_ECHO: &str = "run.json";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub net: NetConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    pub train_data: PathBuf,
    #[serde(default)]
    pub val_data: Option<PathBuf>,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub steps: u64,
    /// Validate every this many steps (0 = only at the end).
    #[serde(default)]
    pub eval_interval: u64,
    #[serde(default = "InferConfig::single")]
    pub eval_infer: InferConfig,
    /// Checkpoint every this many steps (0 = only at the end).
    #[serde(default)]
    pub checkpoint_interval: u64,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn default_batch() -> usize {
    16
}

impl RunConfig {
    pub fn new(net: NetConfig, train_data: PathBuf, steps: u64, out_dir: PathBuf) -> Self {
        Self {
            net,
            optim: OptimConfig::default(),
            train_data,
            val_data: None,
            augment: AugmentConfig::default(),
            batch_size: default_batch(),
            steps,
            eval_interval: 0,
            eval_infer: InferConfig::single(),
            checkpoint_interval: 0,
            seed: 0,
            out_dir,
        }
    }

    /// Every schema violation, so they can be reported together.
    pub fn problems(&self) -> Vec<String> {
        let mut p: Vec<String> = self.net.problems().into_iter().map(|s| format!("net: {s}")).collect();
        p.extend(self.optim.problems().into_iter().map(|s| format!("optim: {s}")));
        p.extend(self.augment.problems().into_iter().map(|s| format!("augment: {s}")));
        if self.batch_size == 0 {
            p.push("batch_size must be positive".into());
        }
        if self.steps == 0 {
            p.push("steps must be positive".into());
        }
        if self.eval_infer.scales.is_empty() {
            p.push("eval_infer.scales must not be empty".into());
        }
        let d = self.net.divisor();
        if self.net.scales >= 2 && self.augment.crop.iter().any(|c| c % d != 0) {
            p.push(format!("augment.crop {:?} must be multiples of {d}", self.augment.crop));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::config(p.join("; ")))
        }
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f32,
    pub val_miou: Option<f64>,
}

impl StepRecord {
    pub fn csv(&self) -> String {
        let miou = self.val_miou.map_or(String::new(), |m| m.to_string());
        format!("{},{},{},{}", self.step, self.lr, self.loss, miou)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Completed,
    Interrupted,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub outcome: Outcome,
    pub start_step: u64,
    pub end_step: u64,
    pub records: Vec<StepRecord>,
    pub checkpoint: PathBuf,
}

/// Augmented batch for step `s` (0-based).
pub fn step_batch(
    ds: &Dataset,
    cfg: &RunConfig,
    s: u64,
) -> Result<(Tensor<f32>, Tensor<u16>)> {
    let per_epoch = ds.len().div_ceil(cfg.batch_size) as u64;
    let epoch = s / per_epoch;
    let pos = (s % per_epoch) as usize;
    let idx = batch_indices(ds.len(), cfg.batch_size, cfg.seed, epoch)?.swap_remove(pos);
    let samples: Vec<Sample> = idx
        .par_iter()
        .enumerate()
        .map(|(slot, &i)| {
            let mut rng = derive_rng(cfg.seed, DOMAIN_AUGMENT, s, slot as u64);
            augment(&ds.samples[i], &mut rng, &cfg.augment)
        })
        .collect::<Result<_>>()?;
    collate(&samples)
}

/// Forward, loss and backward for one batch; returns the loss and the
/// gradient of every parameter.
pub fn loss_and_grads(
    net: &mut Network<f32>,
    x: Tensor<f32>,
    y: &Tensor<u16>,
) -> Result<(f32, IndexMap<String, Tensor<f32>>)> {
    let mut tape = Tape::new();
    let (logits, bindings) = net.record(&mut tape, x, Mode::Train)?;
    let loss = tape.softmax_cross_entropy(logits, y, IGNORE_INDEX)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss ({value})")));
    }
    tape.backward(loss)?;
    let mut grads = IndexMap::with_capacity(bindings.len());
    for (name, var) in bindings {
        let g = tape
            .grad(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape().to_vec()));
        grads.insert(name, g);
    }
    for (name, p) in net.store.iter() {
        if !grads.contains_key(name) {
            grads.insert(name.to_string(), Tensor::zeros(p.value.shape().to_vec()));
        }
    }
    Ok((value, grads))
}

/// Keeps the header and rows up to `step`, or starts a fresh file.
fn prepare_metrics(path: &Path, keep_until: u64) -> Result<fs::File> {
    let mut kept = vec![METRICS_HEADER.to_string()];
    if keep_until > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            for line in text.lines().skip(1) {
                let step: u64 = line
                    .split(',')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Data(format!("{}: malformed row `{line}`", path.display())))?;
                if step <= keep_until {
                    kept.push(line.to_string());
                }
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::path(path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::path(path, e))?;
    }
    Ok(f)
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    let path = cfg.out_dir.join(CONFIG_ECHO);
    let doc = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::path(&path, e))
}

fn load_split(path: &Path) -> Result<Dataset> {
    if !path.is_dir() {
        return Err(Error::path(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    Dataset::load(path)
}

/// Runs (or resumes) training. When `stop` becomes true the current step
/// finishes, `last.ckpt` is written and the run returns
/// [`Outcome::Interrupted`].
pub fn train(cfg: &RunConfig, resume: Option<&Path>, stop: Option<&AtomicBool>) -> Result<TrainSummary> {
    cfg.validate()?;
    let train_ds = load_split(&cfg.train_data)?;
    let val_ds = cfg.val_data.as_deref().map(load_split).transpose()?;
    for ds in std::iter::once(&train_ds).chain(val_ds.as_ref()) {
        if ds.num_classes() != cfg.net.num_classes {
            return Err(Error::config(format!(
                "{}: dataset has {} classes, network predicts {}",
                ds.root.display(),
                ds.num_classes(),
                cfg.net.num_classes
            )));
        }
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::path(&cfg.out_dir, e))?;
    echo_config(cfg)?;

    let (mut net, mut optim, start) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.net.config() != &cfg.net {
                return Err(Error::config(format!(
                    "{}: checkpoint network config differs from the run config",
                    path.display()
                )));
            }
            let optim = ck.optim.ok_or_else(|| {
                Error::config(format!("{}: checkpoint has no optimizer state", path.display()))
            })?;
            (ck.net, optim, ck.step)
        }
        None => {
            let net = build_network::<f32>(&cfg.net, cfg.seed)?;
            let optim = OptimState::new(cfg.optim.clone(), &net.store)?;
            (net, optim, 0)
        }
    };
    if start > cfg.steps {
        return Err(Error::config(format!(
            "checkpoint is at step {start}, past the configured {} steps",
            cfg.steps
        )));
    }
    let run_meta = serde_json::to_value(cfg)?;
    let mut csv = prepare_metrics(&cfg.out_dir.join(METRICS_FILE), start)?;
    let mut records = Vec::new();
    let last = cfg.out_dir.join(LAST_CKPT);
    let mut outcome = Outcome::Completed;
    let mut step = start;
    while step < cfg.steps {
        let lr = optim.lr_at(step, cfg.steps);
        let (x, y) = step_batch(&train_ds, cfg, step)?;
        let (loss, grads) = loss_and_grads(&mut net, x, &y).map_err(|e| {
            log::error!("step {}: {e}; last good checkpoint kept", step + 1);
            e
        })?;
        optim.step(&mut net.store, &grads, lr)?;
        step += 1;
        let due = |every: u64| (every > 0 && step % every == 0) || step == cfg.steps;
        let val_miou = match &val_ds {
            Some(v) if due(cfg.eval_interval) => {
                let cm = evaluate(&net, v, &cfg.eval_infer, 8)?;
                Some(mean_iou(&cm, AbsentClass::Exclude)?.miou)
            }
            _ => None,
        };
        let rec = StepRecord { step, lr, loss, val_miou };
        writeln!(csv, "{}", rec.csv()).map_err(Error::Io)?;
        log::info!("{}", rec.csv());
        records.push(rec);
        if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
            save_checkpoint(&last, &net, Some(&optim), step, Some(run_meta.clone()))?;
            let numbered = cfg.out_dir.join(format!("step{step:06}.ckpt"));
            fs::copy(&last, &numbered).map_err(|e| Error::path(&numbered, e))?;
        }
        if stop.is_some_and(|s| s.load(Ordering::SeqCst)) && step < cfg.steps {
            outcome = Outcome::Interrupted;
            break;
        }
    }
    csv.flush().map_err(Error::Io)?;
    let checkpoint = match outcome {
        Outcome::Completed => cfg.out_dir.join(FINAL_CKPT),
        Outcome::Interrupted => last,
    };
    save_checkpoint(&checkpoint, &net, Some(&optim), step, Some(run_meta))?;
    Ok(TrainSummary {
        outcome,
        start_step: start,
        end_step: step,
        records,
        checkpoint,
    })
}
