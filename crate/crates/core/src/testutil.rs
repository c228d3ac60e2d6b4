//! Helpers shared by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Direct evaluation of the dilated "same" convolution definition.
pub(crate) fn naive_conv(x: &Tensor, w: &Tensor, (dt, df): (usize, usize)) -> Tensor {
    let [n, c, t, f] = x.dims4().unwrap();
    let [o, _, kt, kf] = w.dims4().unwrap();
    Tensor::from_fn(&[n, o, t, f], |idx| {
        let fi = idx % f;
        let ti = (idx / f) % t;
        let oi = (idx / (f * t)) % o;
        let ni = idx / (f * t * o);
        let mut acc = 0.0;
        for ci in 0..c {
            for a in 0..kt {
                for b in 0..kf {
                    let tt = ti as isize + (a as isize - (kt / 2) as isize) * dt as isize;
                    let ff = fi as isize + (b as isize - (kf / 2) as isize) * df as isize;
                    if tt < 0 || ff < 0 || tt >= t as isize || ff >= f as isize {
                        continue;
                    }
                    acc += x.data()[((ni * c + ci) * t + tt as usize) * f + ff as usize]
                        * w.data()[((oi * c + ci) * kt + a) * kf + b];
                }
            }
        }
        acc
    })
}
