//! Train the three tiny variants (no dilation, standard dilation,
//! multidilation) with identical data and seeds and print one SDR table.
//!
//! cargo run --release --example ablation -- [epochs]

use d3net::blocks::builtin;
use d3net::separation::experiment::{run_ablation, SyntheticSplit};
use d3net::separation::TrainConfig;
use d3net::spectral::StftConfig;

fn main() -> d3net::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let variants: Vec<_> = ["tiny-no-dilation", "tiny-standard-dilation", "tiny"]
        .iter()
        .map(|n| (n.to_string(), builtin::builtin(n).expect("shipped config")))
        .collect();
    let bins = variants[0].1.modeled_range().1;
    let split = SyntheticSplit::generate(0, 32, 8)?;
    let cfg = TrainConfig {
        patch_frames: 64,
        patches_per_scene: 2,
        ..TrainConfig::default()
    }
    .with_epochs(epochs);
    let (report, _) = run_ablation(&variants, &split, bins, StftConfig::default(), &cfg, 0, |v, s, e| {
        if e.epoch + 1 == epochs {
            eprintln!("{v} / {s}: final loss {:.5}", e.mean_loss);
        }
    })?;
    print!("{}", report.to_csv());
    Ok(())
}
