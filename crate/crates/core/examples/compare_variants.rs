//! Parameters, multiply-accumulates, activation memory and (optionally)
//! forward latency of every preset at one input size.
//!
//! cargo run --release --example compare_variants -- [CxHxW] [--time]

use mmbseg::cli::parse_input;
use mmbseg::cost::{compare_variants, Timing};
use mmbseg::net::{build_network, NetConfig, PRESETS};

fn main() -> mmbseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let input = parse_input(args.iter().find(|a| !a.starts_with("--")).map_or("3x128x128", String::as_str))?;
    let timing = args.iter().any(|a| a == "--time").then(Timing::default);

    let cfgs = PRESETS
        .iter()
        .map(|&p| Ok((p.to_string(), NetConfig::preset(p, 7)?)))
        .collect::<mmbseg::Result<Vec<_>>>()?;
    print!("{}", compare_variants(&cfgs, input, timing)?.to_pretty());

    println!("\nbranch breakdown of uniform-mmbconv:");
    let net = build_network::<f32>(&NetConfig::preset("uniform-mmbconv", 7)?, 0)?;
    for row in net.describe() {
        println!(
            "  {:<8} 1/{:<3} {:>4} ch {:>2} blocks {:>9} params",
            row.name, row.divisor, row.channels, row.blocks, row.params
        );
    }
    Ok(())
}
