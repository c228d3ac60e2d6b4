//! Build a D2 and a D3 block, print their channel bookkeeping and the
//! dilation every layer applies to every skip connection.

use d3net::blocks::{BatchNormConfig, D2Block, D2BlockConfig, D3Block, D3BlockConfig, DilationScheme};
use d3net::layers::{Forward, Mode, ParamStore};
use d3net::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> d3net::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let d2cfg = D2BlockConfig::new(4, 4);
    for scheme in [DilationScheme::Multi, DilationScheme::Naive] {
        println!("{scheme} dilation, per layer (skip 0 = block input):");
        for l in 1..=d2cfg.layers {
            println!("  layer {l}: {:?}", d2cfg.layer_dilations(l, scheme));
        }
    }

    let d2 = D2Block::new(
        &mut store,
        "d2",
        8,
        &d2cfg,
        DilationScheme::Multi,
        BatchNormConfig::default(),
        &mut rng,
    );
    let d3cfg = D3BlockConfig::new("d3", 4, 3, 2);
    let d3 = D3Block::new(
        &mut store,
        "d3",
        8,
        &d3cfg,
        DilationScheme::Multi,
        BatchNormConfig::default(),
        &mut rng,
    );

    let tape = Tape::new();
    let fw = Forward::new(&tape, &store, Mode::Train);
    let x = Var::constant(Tensor::uniform(&[2, 8, 16, 16], -1.0, 1.0, &mut rng));
    let y2 = d2.forward(&fw, &x)?;
    let y3 = d3.forward(&fw, &x)?;
    println!(
        "\nD2 (k=4, L=4) on 8 channels -> {:?}, out_channels() = {}",
        y2.shape(),
        d2.out_channels()
    );
    println!(
        "D3 (k=4, L=3, M=2) on 8 channels -> {:?}, out_channels() = {}",
        y3.shape(),
        d3.out_channels()
    );
    println!("parameters in the store: {}", store.trainable_count());
    Ok(())
}
