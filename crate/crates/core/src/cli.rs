//! Command-line front end: `gen-data`, `train`, `eval`, `analyze`, `infer`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
//! `MMB_THREADS` caps the worker pool. Flags given on the command line
//! override the matching fields of a JSON config file.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::load_checkpoint;
use crate::cost::{compare_variants, Timing};
use crate::data::{generate_split, Dataset, SceneSpec};
use crate::engine::kernels;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, mean_iou, multiscale_infer, AbsentClass, InferConfig};
use crate::net::{NetConfig, PRESETS};
use crate::tensor::{read_ten, write_ten, AnyTensor};
use crate::train::{train, Outcome, RunConfig};

pub const THREADS_ENV: &str = "MMB_THREADS";

#[derive(Parser, Debug)]
#[command(name = "mmbseg", version, about = "Multi-branch segmentation engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic shapes split.
    GenData {
        /// Scene spec JSON (defaults apply to missing fields).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class IoU and mIoU of a checkpoint on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        scales: Vec<f64>,
        #[arg(long)]
        flip: bool,
        #[arg(long, value_enum, default_value_t = Absent::Exclude)]
        absent: Absent,
        #[arg(long)]
        json: bool,
    },
    /// Parameter, MAC, memory and timing comparison of network configs.
    Analyze {
        /// Comma-separated preset names or NetConfig JSON files.
        #[arg(long, value_delimiter = ',', required = true)]
        configs: Vec<String>,
        /// Input extents as CxHxW.
        #[arg(long, default_value = "3x128x128")]
        input: String,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        csv: bool,
        /// Skip the wall-time measurement.
        #[arg(long)]
        no_time: bool,
        #[arg(long, default_value_t = 21)]
        runs: usize,
    },
    /// Label map (and optionally class probabilities) for one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// `(3, H, W)` image, u8 or f32.
        #[arg(long)]
        image: PathBuf,
        /// `(H, W)` u16 label map.
        #[arg(long)]
        out: PathBuf,
        /// `(K, H, W)` f32 probabilities.
        #[arg(long)]
        probs: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        scales: Vec<f64>,
        #[arg(long)]
        flip: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Absent {
    Exclude,
    One,
}

/// Usage/validation failures map to 2, everything else to 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Path { .. } => 2,
        _ => 1,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

pub fn parse_input(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<_> = s.split('x').map(str::parse::<usize>).collect();
    match parts.as_slice() {
        [Ok(c), Ok(h), Ok(w)] if *c > 0 && *h > 0 && *w > 0 => Ok([*c, *h, *w]),
        _ => Err(Error::config(format!("input `{s}` is not CxHxW with positive extents"))),
    }
}

/// A preset name or a NetConfig JSON path.
pub fn resolve_config(s: &str) -> Result<(String, NetConfig)> {
    if PRESETS.contains(&s) {
        return Ok((s.to_string(), NetConfig::preset(s, SceneSpec::default().num_classes())?));
    }
    let path = Path::new(s);
    let cfg: NetConfig = read_json(path)?;
    cfg.validate()?;
    let name = path.file_stem().map_or(s.to_string(), |n| n.to_string_lossy().into_owned());
    Ok((name, cfg))
}

fn image_f32(path: &Path) -> Result<crate::tensor::Tensor<f32>> {
    let t = read_ten(path)?;
    let scale = if matches!(t, AnyTensor::U8(_)) { 1.0 / 255.0 } else { 1.0 };
    let img = t.to_f32().map(|v| v * scale);
    match *img.shape() {
        [c, h, w] => Ok(img.reshape(vec![1, c, h, w])?),
        _ => Err(Error::config(format!("{}: expected a (C, H, W) image", path.display()))),
    }
}

fn execute(cmd: Command, stop: Arc<AtomicBool>) -> Result<()> {
    match cmd {
        Command::GenData { spec, out, n, seed } => {
            if n == 0 {
                return Err(Error::config("--n must be at least 1"));
            }
            let spec: SceneSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SceneSpec::default(),
            };
            let index = generate_split(&spec, n, seed, &out)?;
            println!("wrote {} samples ({} classes) to {}", index.samples.len(), index.num_classes, out.display());
        }
        Command::Train { config, resume, steps, seed, out } => {
            let mut cfg: RunConfig = read_json(&config)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let problems = cfg.problems();
            if !problems.is_empty() {
                for p in &problems {
                    eprintln!("config error: {p}");
                }
                return Err(Error::config(format!("{} problem(s) in {}", problems.len(), config.display())));
            }
            let summary = train(&cfg, resume.as_deref(), Some(&stop))?;
            let last = summary.records.last();
            println!(
                "{} at step {} (loss {}), checkpoint {}",
                match summary.outcome {
                    Outcome::Completed => "finished",
                    Outcome::Interrupted => "interrupted",
                },
                summary.end_step,
                last.map_or("-".into(), |r| r.loss.to_string()),
                summary.checkpoint.display()
            );
        }
        Command::Eval { ckpt, data, scales, flip, absent, json } => {
            let ck = load_checkpoint(&ckpt)?;
            if !data.is_dir() {
                return Err(Error::path(
                    &data,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
                ));
            }
            let ds = Dataset::load(&data)?;
            let cm = evaluate(&ck.net, &ds, &InferConfig { scales, flip }, 8)?;
            let policy = match absent {
                Absent::Exclude => AbsentClass::Exclude,
                Absent::One => AbsentClass::CountAsOne,
            };
            let report = mean_iou(&cm, policy)?;
            if json {
                let doc = serde_json::json!({
                    "classes": ds.index.class_names,
                    "per_class_iou": report.per_class,
                    "miou": report.miou,
                    "pixels": cm.total(),
                });
                println!("{}", serde_json::to_string_pretty(&doc)?);
            } else {
                let width = ds.index.class_names.iter().map(String::len).max().unwrap_or(5).max(5);
                println!("{:<width$}  iou", "class");
                for (name, iou) in ds.index.class_names.iter().zip(&report.per_class) {
                    let v = iou.map_or("-".into(), |v| format!("{v:.4}"));
                    println!("{name:<width$}  {v}");
                }
                println!("{:<width$}  {:.4}", "mIoU", report.miou);
            }
        }
        Command::Analyze { configs, input, json, csv, no_time, runs } => {
            let input = parse_input(&input)?;
            let cfgs = configs.iter().map(|s| resolve_config(s)).collect::<Result<Vec<_>>>()?;
            let timing = (!no_time).then_some(Timing { warmup: 3, runs: runs.max(1) });
            let cmp = compare_variants(&cfgs, input, timing)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&cmp)?);
            } else if csv {
                print!("{}", cmp.to_csv());
            } else {
                print!("{}", cmp.to_pretty());
            }
        }
        Command::Infer { ckpt, image, out, probs, scales, flip } => {
            let ck = load_checkpoint(&ckpt)?;
            let x = image_f32(&image)?;
            let p = multiscale_infer(&ck.net, &x, &InferConfig { scales, flip })?;
            let labels = kernels::argmax_channels(&p)?;
            let [_, k, h, w] = p.dims4()?;
            write_ten(&out, &labels.reshape(vec![h, w])?)?;
            if let Some(pp) = probs {
                write_ten(&pp, &p.reshape(vec![k, h, w])?)?;
            }
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV}={v} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stop = Arc::new(AtomicBool::new(false));
    if matches!(cli.command, Command::Train { .. }) {
        let flag = stop.clone();
        let _ = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst));
    }
    match init_threads().and_then(|_| execute(cli.command, stop)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
