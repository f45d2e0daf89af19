//! Trains a two-scale network on a generated split, interrupts it half way,
//! resumes from the checkpoint and confirms the metrics match an unbroken run.
//!
//! cargo run --release --example train_and_resume

use std::sync::atomic::AtomicBool;

use mmbseg::data::{generate_split, AugmentConfig, SceneSpec};
use mmbseg::net::NetConfig;
use mmbseg::train::{train, RunConfig, LAST_CKPT, METRICS_FILE};

fn main() -> mmbseg::Result<()> {
    let root = std::env::temp_dir().join("mmbseg-train-example");
    let spec = SceneSpec {
        height: 48,
        width: 48,
        min_size: 4.0,
        size_ratio: 10.0,
        ..SceneSpec::default()
    };
    generate_split(&spec, 24, 1, &root.join("train"))?;
    generate_split(&spec, 6, 2, &root.join("val"))?;

    let net = NetConfig {
        channel_schedule: vec![16, 16, 16],
        blocks_per_branch: vec![1, 1, 1],
        scales: 3,
        stem_channels: 16,
        ..NetConfig::preset("uniform-mmbconv", spec.num_classes())?
    };
    let run = |dir: &str| {
        let mut cfg = RunConfig::new(net.clone(), root.join("train"), 150, root.join(dir));
        cfg.val_data = Some(root.join("val"));
        cfg.batch_size = 6;
        cfg.eval_interval = 50;
        cfg.checkpoint_interval = 50;
        cfg.optim.lr0 = 5e-3;
        cfg.augment = AugmentConfig {
            crop: [32, 32],
            ..AugmentConfig::default()
        };
        let _ = std::fs::remove_dir_all(&cfg.out_dir);
        cfg
    };

    let whole = run("whole");
    let summary = train(&whole, None, None)?;
    for r in summary.records.iter().filter(|r| r.val_miou.is_some()) {
        println!("step {:>2}  loss {:.4}  val mIoU {:.4}", r.step, r.loss, r.val_miou.unwrap_or(0.0));
    }

    // A preset stop flag ends the run after its first step.
    let split = run("split");
    let stopped = train(&split, None, Some(&AtomicBool::new(true)))?;
    println!("interrupted at step {}", stopped.end_step);
    let resumed = train(&split, Some(&split.out_dir.join(LAST_CKPT)), None)?;
    println!("resumed from step {} to {}", resumed.start_step, resumed.end_step);

    let a = std::fs::read_to_string(whole.out_dir.join(METRICS_FILE)).map_err(mmbseg::Error::Io)?;
    let b = std::fs::read_to_string(split.out_dir.join(METRICS_FILE)).map_err(mmbseg::Error::Io)?;
    println!("metrics identical: {}", a == b);
    println!("final checkpoint: {}", resumed.checkpoint.display());
    Ok(())
}
