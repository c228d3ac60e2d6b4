//! Train the tiny multidilated network on synthetic scenes and compare the
//! separated stems against the mixture-as-estimate baseline.
//!
//! cargo run --release --example train_tiny -- [epochs] [train_scenes] [test_scenes]

use std::time::Instant;

use d3net::blocks::builtin;
use d3net::separation::experiment::{models, train_sources, SyntheticSplit};
use d3net::separation::{evaluate_scenes, TrainConfig, TrainingSet};
use d3net::spectral::StftConfig;

fn main() -> d3net::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let epochs = args.first().copied().unwrap_or(20);
    let n_train = args.get(1).copied().unwrap_or(32);
    let n_test = args.get(2).copied().unwrap_or(8);

    let network = builtin::builtin("tiny").expect("shipped config");
    let split = SyntheticSplit::generate(0, n_train, n_test)?;
    let data = TrainingSet::from_synthetic(&split.train, network.modeled_range().1, StftConfig::default())?;
    let cfg = TrainConfig {
        patch_frames: 64,
        patches_per_scene: 2,
        ..TrainConfig::default()
    }
    .with_epochs(epochs);

    let start = Instant::now();
    let trained = train_sources(&network, &data, &cfg, 0, |src, e| {
        println!(
            "{src:>10} epoch {:>3} lr {:.0e} loss {:.5} ({:.0} s)",
            e.epoch,
            e.lr,
            e.mean_loss,
            start.elapsed().as_secs_f64()
        );
    })?;
    let eval = evaluate_scenes(&models(&trained), &split.test, StftConfig::default())?;
    println!("\nsource       estimate  mixture  gain (dB, median over {n_test} held-out scenes)");
    for src in &data.sources {
        let (e, m) = (
            eval.median(src, "estimate").unwrap(),
            eval.median(src, "mixture").unwrap(),
        );
        println!("{src:<12} {e:>8.2} {m:>8.2} {:>6.2}", e - m);
    }
    println!("total time {:.0} s", start.elapsed().as_secs_f64());
    Ok(())
}
