//! A multidilated convolution is a sum of ordinary dilated convolutions, one
//! per input group. With every dilation set to 1 it is a plain convolution
//! over the concatenated input.

use d3net::layers::Axis;
use d3net::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> d3net::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tape = Tape::no_grad();
    let x0 = tape.leaf(Tensor::uniform(&[1, 2, 9, 9], -1.0, 1.0, &mut rng));
    let x1 = tape.leaf(Tensor::uniform(&[1, 3, 9, 9], -1.0, 1.0, &mut rng));
    let k0 = tape.leaf(Tensor::uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut rng));
    let k1 = tape.leaf(Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng));

    let multi = tape.multidilated_conv(&[&x0, &x1], &[&k0, &k1], &[(1, 1), (2, 2)], None)?;
    let by_hand = tape.add(
        &tape.conv2d(&x0, &k0, None, (1, 1))?,
        &tape.conv2d(&x1, &k1, None, (2, 2))?,
    )?;
    println!(
        "dilations (1, 2): max |multi - sum of convs| = {:.2e}",
        multi.value().max_abs_diff(by_hand.value())
    );

    let flat = tape.multidilated_conv(&[&x0, &x1], &[&k0, &k1], &[(1, 1), (1, 1)], None)?;
    let x = tape.concat(&[&x0, &x1], Axis::Channel)?;
    let k = tape.concat(&[&k0, &k1], Axis::Channel)?;
    let plain = tape.conv2d(&x, &k, None, (1, 1))?;
    println!(
        "dilations (1, 1): max |multi - plain conv| = {:.2e}",
        flat.value().max_abs_diff(plain.value())
    );
    Ok(())
}
