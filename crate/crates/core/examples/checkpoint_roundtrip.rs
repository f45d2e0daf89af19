//! Saves a network with optimizer state, reloads it and checks that the
//! restored network computes the same logits.

use mmbseg::checkpoint::{load_checkpoint, save_checkpoint};
use mmbseg::engine::Mode;
use mmbseg::net::{build_network, NetConfig};
use mmbseg::optim::{OptimConfig, OptimState};
use mmbseg::Tensor;

fn main() -> mmbseg::Result<()> {
    let cfg = NetConfig::preset("tempered", 7)?;
    let mut net = build_network::<f32>(&cfg, 42)?;
    let x = Tensor::from_fn(vec![2, 3, 64, 64], |i| ((i * 31 % 97) as f32) / 97.0);
    net.calibrate_bn(&x)?;
    let optim = OptimState::new(OptimConfig::default(), &net.store)?;
    let path = std::env::temp_dir().join("mmbseg-example.ckpt");
    save_checkpoint(&path, &net, Some(&optim), 0, Some(serde_json::json!({"note": "example"})))?;
    let bytes = std::fs::metadata(&path).map_err(mmbseg::Error::Io)?.len();

    let back = load_checkpoint(&path)?;
    let (a, b) = (net.forward(&x, Mode::Eval)?, back.net.forward(&x, Mode::Eval)?);
    println!("{}: {bytes} bytes, {} parameters", path.display(), back.net.param_count());
    println!("config round-trips: {}", back.net.config() == &cfg);
    println!("optimizer state present: {}", back.optim.is_some());
    println!("logits identical: {}", a == b);
    Ok(())
}
