//! Evaluates a checkpoint with single-scale and multi-scale + flip inference
//! and prints per-class IoU.
//!
//! cargo run --release --example evaluate_multiscale -- <ckpt> <data_dir>
//! (run the train_and_resume example first for a checkpoint and data)

use std::path::PathBuf;

use mmbseg::checkpoint::load_checkpoint;
use mmbseg::data::Dataset;
use mmbseg::metrics::{evaluate, mean_iou, AbsentClass, InferConfig};

fn main() -> mmbseg::Result<()> {
    let root = std::env::temp_dir().join("mmbseg-train-example");
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let ckpt = args.next().unwrap_or_else(|| root.join("whole/final.ckpt"));
    let data = args.next().unwrap_or_else(|| root.join("val"));

    let ck = load_checkpoint(&ckpt)?;
    let ds = Dataset::load(&data)?;
    println!("{} parameters, trained {} steps, {} scenes", ck.net.param_count(), ck.step, ds.len());

    let modes = [("single", InferConfig::single()), ("0.5,1,2+flip", InferConfig::default())];
    let reports = modes
        .iter()
        .map(|(_, cfg)| mean_iou(&evaluate(&ck.net, &ds, cfg, 4)?, AbsentClass::Exclude))
        .collect::<mmbseg::Result<Vec<_>>>()?;
    println!("{:<12} {:>8} {:>13}", "class", modes[0].0, modes[1].0);
    for (c, name) in ds.index.class_names.iter().enumerate() {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{name:<12} {:>8} {:>13}", cell(reports[0].per_class[c]), cell(reports[1].per_class[c]));
    }
    println!("{:<12} {:>8.4} {:>13.4}", "mIoU", reports[0].miou, reports[1].miou);
    Ok(())
}
