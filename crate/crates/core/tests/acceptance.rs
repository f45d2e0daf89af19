//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `cargo test --test acceptance` runs criteria 1-4, 7 and 8 and reports the
//! archived results of the two training criteria. Pass `--full` (ideally with
//! `--release`) to rerun criteria 5 and 6 and refresh the archive:
//!
//! ```text
//! cargo test --release --test acceptance -- --full
//! ```

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use common::cases::{model_cases, op_cases};
use common::*;
use mmbseg::blocks::{BlockKind, Replace};
use mmbseg::checkpoint::load_checkpoint;
use mmbseg::cost::{compare_variants, NineFold, Timing};
use mmbseg::data::{generate_split, Dataset, SceneSpec};
use mmbseg::engine::{ConvSpec, IGNORE_INDEX};
use mmbseg::metrics::{evaluate, mean_iou, AbsentClass, ConfusionMatrix, InferConfig};
use mmbseg::net::{NetConfig, SkipMerge};
use mmbseg::train::{train, Outcome, RunConfig, METRICS_FILE};
use mmbseg::{Result, Tensor};
use rand::Rng;
use serde_json::json;

const GRAD_TOL: f64 = 1e-3;
const GRAD_INSTANCES: u64 = 20;
const GRAD_BUDGET_S: f64 = 300.0;
const CONV_TOL: f64 = 1e-4;
const CONV_SPECS: u64 = 100;
const CONV_BUDGET_S: f64 = 60.0;
const NINE_BUDGET_S: f64 = 1.0;
const COST_BUDGET_S: f64 = 300.0;
const MIOU_TOL: f64 = 1e-12;
const MIOU_PAIRS: u64 = 50;
const DESK_STEPS: u64 = 2000;
const DESK_TARGET: f64 = 0.80;
const ABLATION_STEPS: u64 = 400;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
const NOISE_BAND: f64 = 0.005;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Result<Verdict> {
    let start = Instant::now();
    let mut worst: Vec<(String, f64, String)> = Vec::new();
    let mut kinks = 0;
    let mut note = |name: &str, rep: GradReport| {
        kinks += rep.kinks;
        match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) if rep.worst > w.1 => *w = (name.to_string(), rep.worst, rep.worst_input),
        Some(_) => {}
        None => worst.push((name.to_string(), rep.worst, rep.worst_input)),
        }
    };
    for i in 0..GRAD_INSTANCES {
        for (name, case) in op_cases(i) {
            note(name, check_gradients::<f32, _>(&case, i, 16)?);
        }
        for (name, case) in model_cases(i) {
            note(name, check_gradients::<f32, _>(&case, i, 3)?);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<_> = worst.iter().filter(|w| w.1.is_nan() || w.1 >= GRAD_TOL).collect();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = if failing.is_empty() {
        format!("{} cases x {GRAD_INSTANCES} instances, worst rel err {max:.2e} < {GRAD_TOL:.0e}, {kinks} kink coords redrawn, {secs:.1}s", worst.len())
    } else {
        format!("over tolerance: {failing:?}")
    };
    Ok(verdict(failing.is_empty() && secs < GRAD_BUDGET_S, detail))
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Result<Verdict> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..CONV_SPECS {
        let mut r = rng(5000 + i);
        let cin = r.gen_range(1..9);
        let k = if r.gen_bool(0.5) { 1 } else { 3 };
        let stride = r.gen_range(1..3);
        let groups = if r.gen_bool(0.5) { 1 } else { cin };
        let cout = if groups == 1 { r.gen_range(1..9) } else { cin * r.gen_range(1..3) };
        let padding = r.gen_range(0..k / 2 + 1);
        let bias = r.gen_bool(0.5);
        let spec = ConvSpec::dense(cin, cout, k, stride)
            .with_groups(groups)
            .with_padding(padding)
            .with_bias(bias);
        let n = r.gen_range(1..3);
        let (h, w) = (r.gen_range(3..14), r.gen_range(3..14));
        let x = f32_exact(&uniform(&mut r, &[n, cin, h, w], -1.0, 1.0));
        let wt = f32_exact(&uniform(&mut r, &spec.weight_shape(), -1.0, 1.0));
        let b = bias.then(|| f32_exact(&uniform(&mut r, &[cout], -1.0, 1.0)));
        let fast = mmbseg::engine::conv2d_forward(&x.cast::<f32>(), &wt.cast(), b.as_ref().map(|b| b.cast()).as_ref(), &spec)?;
        let slow = conv_direct(&x, &wt, b.as_ref(), &spec);
        assert_eq!(fast.shape(), slow.shape());
        let scale = slow.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        worst = worst.max(fast.cast::<f64>().max_abs_diff(&slow) / scale);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        worst < CONV_TOL && secs < CONV_BUDGET_S,
        format!("{CONV_SPECS} specs, worst rel err {worst:.2e} < {CONV_TOL:.0e}, {secs:.2}s"),
    ))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Result<Verdict> {
    let start = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();
    for c in [8usize, 16, 24, 32] {
        for t in [1.0, 4.0, 6.0] {
            let nf = NineFold::new(c, t);
            let e = (c as f64 * t).round() as usize;
            // Closed form: 1x1 expand/project c*e each, 3x3 versions 9x that,
            // depthwise 9*e in both.
            let mb = 2 * c * e + 9 * e;
            let mmb = 18 * c * e + 9 * e;
            ok &= nf.mmb_pointwise == 9 * nf.mb_pointwise;
            ok &= nf.mb_block == mb && nf.mmb_block == mmb;
            let oracle = mmb as f64 / mb as f64;
            ok &= (nf.block_ratio() - oracle).abs() < 1e-12;
            if t >= 4.0 {
                ok &= (6.0..9.0).contains(&nf.block_ratio());
            }
            if c == 16 && t == 6.0 {
                notes.push(format!("C=16,t=6 block ratio {:.4}", nf.block_ratio()));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    notes.push(format!("{secs:.4}s"));
    Ok(verdict(ok && secs < NINE_BUDGET_S, format!("12 configs, expand+project exactly 9x; {}", notes.join(", "))))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Result<Verdict> {
    let start = Instant::now();
    let k = SceneSpec::default().num_classes();
    let mb = NetConfig::preset("uniform-mbconv", k)?;
    let mmb = NetConfig::preset("uniform-mmbconv", k)?;
    let cmp = compare_variants(
        &[("mbconv".into(), mb), ("mmbconv".into(), mmb)],
        [3, 128, 128],
        Some(Timing::default()),
    )?;
    let (a, b) = (&cmp.rows[0], &cmp.rows[1]);
    let (pa, pb) = (a.report.peak_activation_bytes as f64, b.report.peak_activation_bytes as f64);
    let (ta, tb) = (a.median_ms.unwrap(), b.median_ms.unwrap());
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        pb > pa && tb > ta && secs < COST_BUDGET_S,
        format!(
            "peak {:.0} -> {:.0} bytes (+{:.1}%), median forward {ta:.1} -> {tb:.1} ms (+{:.1}%), {secs:.1}s",
            pa,
            pb,
            100.0 * (pb / pa - 1.0),
            100.0 * (tb / ta - 1.0)
        ),
    ))
}

// ---------------------------------------------------------------- criterion 7

fn tiny_net() -> NetConfig {
    NetConfig {
        scales: 2,
        channel_schedule: vec![8, 8],
        blocks_per_branch: vec![1, 1],
        block_kind: BlockKind::MMBConv,
        expansion: 2.0,
        num_classes: 7,
        stem_channels: 8,
        skip_merge: SkipMerge::Concat,
        in_channels: 3,
        decoder_blocks: 1,
        mmb_replace: Replace::Both,
    }
}

fn tiny_run(data: &Path, out: PathBuf) -> RunConfig {
    let mut cfg = RunConfig::new(tiny_net(), data.join("train"), 12, out);
    cfg.val_data = Some(data.join("val"));
    cfg.batch_size = 4;
    cfg.augment.crop = [32, 32];
    cfg.eval_interval = 4;
    cfg.checkpoint_interval = 6;
    cfg.seed = 9;
    cfg
}

fn tiny_data(root: &Path) -> Result<()> {
    let spec = SceneSpec {
        height: 48,
        width: 48,
        min_size: 4.0,
        ..SceneSpec::default()
    };
    generate_split(&spec, 16, 3, &root.join("train"))?;
    generate_split(&spec, 4, 4, &root.join("val"))?;
    Ok(())
}

fn same_params(a: &Path, b: &Path) -> Result<bool> {
    let (a, b) = (load_checkpoint(a)?, load_checkpoint(b)?);
    Ok(a.net.store == b.net.store && a.step == b.step && a.optim.map(|o| o.m) == b.optim.map(|o| o.m))
}

fn criterion_7() -> Result<Verdict> {
    let tmp = tempfile::tempdir().map_err(mmbseg::Error::Io)?;
    let root = tmp.path();
    tiny_data(&root.join("data"))?;
    let data = root.join("data");
    let csv = |d: &Path| fs::read(d.join(METRICS_FILE)).map_err(mmbseg::Error::Io);

    let a = tiny_run(&data, root.join("a"));
    let b = tiny_run(&data, root.join("b"));
    train(&a, None, None)?;
    train(&b, None, None)?;
    let repro = csv(&a.out_dir)? == csv(&b.out_dir)? && same_params(&a.out_dir.join("final.ckpt"), &b.out_dir.join("final.ckpt"))?;

    // Resume from the mid-run checkpoint inside a copy of the run directory.
    let c = tiny_run(&data, root.join("c"));
    fs::create_dir_all(&c.out_dir).map_err(mmbseg::Error::Io)?;
    fs::copy(a.out_dir.join(METRICS_FILE), c.out_dir.join(METRICS_FILE)).map_err(mmbseg::Error::Io)?;
    train(&c, Some(&a.out_dir.join("step000006.ckpt")), None)?;
    let resumed = csv(&c.out_dir)? == csv(&a.out_dir)? && same_params(&a.out_dir.join("final.ckpt"), &c.out_dir.join("final.ckpt"))?;

    // Interrupt after the first step, then resume from last.ckpt.
    let d = tiny_run(&data, root.join("d"));
    let stop = AtomicBool::new(true);
    let first = train(&d, None, Some(&stop))?;
    stop.store(false, Ordering::SeqCst);
    let interrupted = first.outcome == Outcome::Interrupted;
    train(&d, Some(&first.checkpoint), None)?;
    let after_stop = interrupted && csv(&d.out_dir)? == csv(&a.out_dir)?;

    Ok(verdict(
        repro && resumed && after_stop,
        format!("repeat run identical: {repro}; resume at step 6 identical: {resumed}; resume after interrupt at step {} identical: {after_stop}", first.end_step),
    ))
}

// ---------------------------------------------------------------- criterion 8

fn brute_miou(pred: &[u16], truth: &[u16], k: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..k as u16 {
        let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_INDEX {
                continue;
            }
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                _ => {}
            }
        }
        if tp + fp + fne > 0 {
            ious.push(tp as f64 / (tp + fp + fne) as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

fn criterion_8() -> Result<Verdict> {
    let mut worst = 0.0f64;
    for i in 0..MIOU_PAIRS {
        let mut r = rng(9000 + i);
        let k = r.gen_range(2..7);
        let (h, w) = (r.gen_range(1..9), r.gen_range(1..9));
        let truth = Tensor::from_fn(vec![h, w], |_| if r.gen_bool(0.1) { IGNORE_INDEX } else { r.gen_range(0..k as u16) });
        let pred = Tensor::from_fn(vec![h, w], |_| r.gen_range(0..k as u16));
        let mut truth = truth;
        truth.data_mut()[0] = 0;
        let mut cm = ConfusionMatrix::new(k);
        cm.update(&pred, &truth)?;
        let got = mean_iou(&cm, AbsentClass::Exclude)?.miou;
        worst = worst.max((got - brute_miou(pred.data(), truth.data(), k)).abs());
    }
    Ok(verdict(worst <= MIOU_TOL, format!("{MIOU_PAIRS} pairs, max |diff| {worst:.1e} <= {MIOU_TOL:.0e}")))
}

// ------------------------------------------------------- criteria 5 and 6

fn archive_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("acceptance")
}

fn work_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

/// The default split: 512 training and 64 validation scenes.
fn desk_data() -> Result<PathBuf> {
    let root = work_dir().join("data");
    let spec = SceneSpec::default();
    for (name, n, seed) in [("train", 512, 101), ("val", 64, 202)] {
        let dir = root.join(name);
        if Dataset::load(&dir).map(|d| d.len() == n).unwrap_or(false) {
            continue;
        }
        generate_split(&spec, n, seed, &dir)?;
    }
    Ok(root)
}

fn desk_run(preset: &str, steps: u64, seed: u64, tag: &str) -> Result<(f64, usize, f64)> {
    let data = desk_data()?;
    let k = SceneSpec::default().num_classes();
    let mut cfg = RunConfig::new(NetConfig::preset(preset, k)?, data.join("train"), steps, work_dir().join(tag));
    cfg.val_data = Some(data.join("val"));
    cfg.seed = seed;
    cfg.checkpoint_interval = 250;
    let _ = fs::remove_dir_all(&cfg.out_dir);
    let start = Instant::now();
    let summary = train(&cfg, None, None)?;
    let ck = load_checkpoint(&summary.checkpoint)?;
    let val = Dataset::load(&data.join("val"))?;
    let cm = evaluate(&ck.net, &val, &InferConfig::default(), 4)?;
    let miou = mean_iou(&cm, AbsentClass::Exclude)?.miou;
    Ok((miou, ck.net.param_count(), start.elapsed().as_secs_f64()))
}

fn write_archive(name: &str, value: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(archive_dir()).map_err(mmbseg::Error::Io)?;
    let path = archive_dir().join(name);
    fs::write(&path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| mmbseg::Error::path(&path, e))
}

fn read_archive(name: &str) -> Option<serde_json::Value> {
    serde_json::from_str(&fs::read_to_string(archive_dir().join(name)).ok()?).ok()
}

fn criterion_5() -> Result<Verdict> {
    let (miou, params, secs) = desk_run("uniform-mmbconv", DESK_STEPS, 0, "desk")?;
    let pass = miou >= DESK_TARGET;
    let detail = format!(
        "uniform-mmbconv, {DESK_STEPS} steps x 16, multi-scale+flip val mIoU {miou:.4} (target {DESK_TARGET}), {params} params, {:.0} min",
        secs / 60.0
    );
    write_archive("criterion5.json", &json!({"pass": pass, "miou": miou, "params": params, "seconds": secs, "steps": DESK_STEPS, "detail": detail}))?;
    Ok(verdict(pass, detail))
}

fn criterion_6() -> Result<Verdict> {
    let variants = ["baseline", "uniform", "uniform-mbconv", "uniform-mmbconv"];
    let mut rows = Vec::new();
    for v in variants {
        let mut scores = Vec::new();
        let mut params = 0;
        for s in ABLATION_SEEDS {
            let (m, p, _) = desk_run(v, ABLATION_STEPS, s, &format!("ablation-{v}-s{s}"))?;
            scores.push(m);
            params = p;
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        rows.push((v, params, mean, scores));
    }
    let get = |name: &str| rows.iter().find(|r| r.0 == name).unwrap().2;
    let gap_branch = get("baseline") - get("uniform");
    let gap_block = get("uniform-mbconv") - get("uniform-mmbconv");
    let pass = gap_branch <= NOISE_BAND && gap_block <= NOISE_BAND;

    let mut table = String::from("| Method | Params | mIoU (mean of 3 seeds) | per seed |\n|---|---:|---:|---|\n");
    for (v, p, m, s) in &rows {
        let per: Vec<String> = s.iter().map(|x| format!("{x:.4}")).collect();
        table += &format!("| {v} | {:.2}M | {m:.4} | {} |\n", *p as f64 / 1e6, per.join(", "));
    }
    fs::create_dir_all(archive_dir()).map_err(mmbseg::Error::Io)?;
    fs::write(archive_dir().join("ablation.md"), &table).map_err(mmbseg::Error::Io)?;
    let detail = format!(
        "{ABLATION_STEPS} steps/run, baseline-uniform {gap_branch:+.4}, mbconv-mmbconv {gap_block:+.4} (band {NOISE_BAND})"
    );
    write_archive(
        "criterion6.json",
        &json!({"pass": pass, "steps": ABLATION_STEPS, "seeds": ABLATION_SEEDS, "rows": rows.iter().map(|r| json!({"variant": r.0, "params": r.1, "miou": r.2, "per_seed": r.3})).collect::<Vec<_>>(), "detail": detail}),
    )?;
    Ok(verdict(pass, detail))
}

fn archived(name: &str) -> Verdict {
    match read_archive(name) {
        Some(v) => verdict(
            v["pass"].as_bool().unwrap_or(false),
            format!("archived: {} (rerun with --full)", v["detail"].as_str().unwrap_or("?")),
        ),
        None => verdict(false, "no archived result; run with --full"),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let full = args.iter().any(|a| a == "--full");
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let mut failed = 0;
    // Archived results are reported but only criteria run now gate the exit.
    let mut report = |n: u32, r: Result<Verdict>, gating: bool| {
        let (pass, detail) = match r {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += u32::from(!pass && gating);
        println!("criterion {n}: {} - {detail}", if pass { "PASS" } else { "FAIL" });
    };
    report(1, criterion_1(), true);
    report(2, criterion_2(), true);
    report(3, criterion_3(), true);
    report(4, criterion_4(), true);
    report(5, if full { criterion_5() } else { Ok(archived("criterion5.json")) }, full);
    report(6, if full { criterion_6() } else { Ok(archived("criterion6.json")) }, full);
    report(7, criterion_7(), true);
    report(8, criterion_8(), true);
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
