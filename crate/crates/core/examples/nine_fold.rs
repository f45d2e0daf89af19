//! Pointwise cost of MBConv against its multi-branch variant, from the closed
//! form and from the declared parameter shapes of real blocks.

use mmbseg::blocks::{BlockConfig, BlockKind};
use mmbseg::cost::NineFold;

fn main() {
    println!("{:>4} {:>4} {:>10} {:>10} {:>6} {:>7}", "C", "t", "mb_pw", "mmb_pw", "pw_x", "block_x");
    for c in [16, 32, 64] {
        for t in [1.0, 4.0, 6.0] {
            let n = NineFold::new(c, t);
            println!(
                "{c:>4} {t:>4} {:>10} {:>10} {:>6.2} {:>7.3}",
                n.mb_pointwise,
                n.mmb_pointwise,
                n.pointwise_ratio(),
                n.block_ratio()
            );
        }
    }

    println!("\nper-tensor shapes, C=16 t=6 stride 1:");
    for kind in [BlockKind::MBConv, BlockKind::MMBConv] {
        let cfg = BlockConfig::new(kind, 16, 1).with_expansion(6.0);
        println!("{kind:?}: {} parameters", cfg.param_count());
        for (name, shape, _) in cfg.param_shapes("enc0/0") {
            println!("  {name:<28} {shape:?}");
        }
    }
}
