//! Train standard-dilation and multidilation tiny networks briefly and compare
//! the per-skip weight norms of the last layer of their first D3 block.
//!
//! cargo run --release --example weight_norms -- [epochs]

use d3net::blocks::{builtin, Model};
use d3net::separation::experiment::SyntheticSplit;
use d3net::separation::{train, weight_norm_report, LayerSelector, TrainConfig, TrainingSet};
use d3net::spectral::StftConfig;

fn main() -> d3net::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let split = SyntheticSplit::generate(0, 16, 1)?;
    let cfg = TrainConfig {
        patch_frames: 64,
        patches_per_scene: 2,
        ..TrainConfig::default()
    }
    .with_epochs(epochs);
    for name in ["tiny-standard-dilation", "tiny"] {
        let config = builtin::builtin(name).expect("shipped config");
        let data = TrainingSet::from_synthetic(&split.train, config.modeled_range().1, StftConfig::default())?;
        let mut model = Model::build(&config, 0)?;
        train(&mut model, &data, "tonal", &cfg, |_| {})?;
        println!("{name}");
        print!("{}", weight_norm_report(&model, &LayerSelector::default())?.to_csv());
        println!();
    }
    Ok(())
}
