//! Build the four per-source networks of the full-size configuration, report
//! their parameter counts and time one forward pass on a 256-frame patch.
//!
//! A forward pass takes minutes on one CPU core; pass `--count-only` to skip it.

use std::time::Instant;

use d3net::blocks::{builtin, Model};
use d3net::Tensor;

fn main() -> d3net::Result<()> {
    let count_only = std::env::args().any(|a| a == "--count-only");
    for name in ["vocals-table1", "drums-table1", "bass-table1", "other-table1"] {
        let config = builtin::builtin(name).expect("shipped config");
        let model = Model::build(&config, 0)?;
        let (lo, hi) = model.modeled_range();
        print!("{name:<14} {:>9} parameters, bins [{lo}, {hi})", model.param_count());
        for band in model.bands() {
            print!("  {}={:?}", band.name, band.bins);
        }
        println!();
        if !count_only {
            let x = Tensor::full(&[1, 2, 256, config.input_bins], 0.5);
            let start = Instant::now();
            let y = model.infer(&x)?;
            println!(
                "  forward {:?} -> {:?} in {:.1} s",
                x.shape(),
                y.shape(),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
