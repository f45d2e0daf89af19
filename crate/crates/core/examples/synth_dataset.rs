//! Generates a train/val split of synthetic shape scenes and summarizes it.
//!
//! cargo run --release --example synth_dataset -- [out_dir] [n_train]

use std::path::PathBuf;

use mmbseg::data::{generate_split, Dataset, SceneSpec};

fn main() -> mmbseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("mmbseg-shapes"), PathBuf::from);
    let n: usize = args.next().map_or(64, |s| s.parse().expect("n_train is a count"));
    let spec = SceneSpec::default();

    let index = generate_split(&spec, n, 1, &out.join("train"))?;
    generate_split(&spec, (n / 8).max(1), 2, &out.join("val"))?;

    let ds = Dataset::load(&out.join("train"))?;
    let mut pixels = vec![0u64; ds.num_classes()];
    for s in &ds.samples {
        for &v in s.label.data() {
            pixels[v as usize] += 1;
        }
    }
    let total: u64 = pixels.iter().sum();
    println!("{} scenes of {}x{} in {}", ds.len(), spec.height, spec.width, out.display());
    println!("{:<10} {:>8} {:>8} {:>7} {:>7}", "class", "min", "max", "ratio", "pixels");
    let ranges = index.size_ranges();
    for (c, name) in index.class_names.iter().enumerate() {
        let share = 100.0 * pixels[c] as f64 / total as f64;
        match ranges.get(c.wrapping_sub(1)).copied().flatten() {
            Some((lo, hi)) if c > 0 => {
                println!("{name:<10} {lo:>8.1} {hi:>8.1} {:>6.1}x {share:>6.1}%", hi / lo)
            }
            _ => println!("{name:<10} {:>8} {:>8} {:>7} {share:>6.1}%", "-", "-", "-"),
        }
    }
    Ok(())
}
