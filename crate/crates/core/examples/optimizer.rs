//! Lookahead over RAdam with decoupled weight decay and the poly schedule,
//! minimizing an ill-conditioned quadratic. The rectification term keeps
//! early steps short, much like a warmup.

use indexmap::IndexMap;
use mmbseg::optim::{poly_lr, OptimConfig, OptimState};
use mmbseg::params::{ParamKind, ParamStore};
use mmbseg::Tensor;

fn main() -> mmbseg::Result<()> {
    // f(x) = 0.5 * sum_i a_i (x_i - 1)^2
    let a = [1.0, 4.0, 16.0];
    let mut store = ParamStore::<f64>::new();
    store.insert("q/weight", Tensor::zeros(vec![3]), ParamKind::ConvWeight);
    let cfg = OptimConfig {
        lr0: 0.05,
        ..OptimConfig::default()
    };
    let steps = 2000;
    let mut opt = OptimState::new(cfg, &store)?;
    for s in 0..steps {
        let x = store.tensor("q/weight").expect("inserted").clone();
        let f: f64 = x.data().iter().zip(a).map(|(v, ai)| 0.5 * ai * (v - 1.0).powi(2)).sum();
        let g = Tensor::from_fn(vec![3], |i| a[i] * (x.data()[i] - 1.0));
        let grads: IndexMap<String, Tensor<f64>> = [("q/weight".to_string(), g)].into_iter().collect();
        let lr = opt.lr_at(s, steps);
        if s % 250 == 0 || s + 1 == steps {
            println!("step {s:>3}  lr {lr:.5}  f {f:.3e}  x {:.4?}", x.data());
        }
        opt.step(&mut store, &grads, lr)?;
    }
    println!("\npoly schedule, lr0 1e-3, power 0.9, 2000 steps:");
    for s in [0, 500, 1000, 1500, 1999, 2000] {
        println!("  step {s:>4}: {:.3e}", poly_lr(s, 2000, 1e-3, 0.9));
    }
    Ok(())
}
