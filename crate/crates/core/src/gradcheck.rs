//! Finite-difference gradient checks for every layer type and whole networks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check_many, Tape, Var};
use crate::blocks::{BatchNormConfig, D2Block, D2BlockConfig, D3Block, D3BlockConfig, DilationScheme, Model};
use crate::error::Result;
use crate::layers::{Axis, BatchNormMode, Forward, Mode, ParamStore};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Largest `|analytic - numeric| / max(1, |analytic|)` observed.
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Coordinates left out because every probe crossed a rectifier kink.
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random linear functional of `y`, so every output coordinate matters.
fn project(tape: &Tape, y: &Var, seed: u64) -> Result<Var> {
    let w = Var::constant(rand_t(y.shape(), seed ^ 0x9e37_79b9));
    Ok(tape.sum(&tape.mul(y, &w)?))
}

fn check<F>(name: &str, inputs: Vec<Tensor>, step: f64, f: F) -> Result<CheckResult>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let coordinates = inputs.iter().map(Tensor::numel).sum();
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: finite_diff_check_many(f, &inputs, step)?,
        coordinates,
        skipped: 0,
    })
}

/// Check every differentiable primitive and both dense block types on small shapes.
pub fn check_layers(seed: u64, step: f64) -> Result<Vec<CheckResult>> {
    let s = seed;
    let mut out = vec![
        check(
            "elementwise",
            vec![rand_t(&[3, 4], s), rand_t(&[3, 4], s + 1)],
            step,
            |t, v| {
                let y = t.mul(&t.sub(&v[0], &v[1])?, &t.add(&v[0], &t.sigmoid(&v[1]))?)?;
                project(t, &t.relu(&t.add_scalar(&y, 0.1)), s)
            },
        )?,
        check(
            "conv2d",
            vec![
                rand_t(&[2, 3, 8, 8], s),
                rand_t(&[4, 3, 3, 3], s + 1),
                rand_t(&[4], s + 2),
            ],
            step,
            |t, v| project(t, &t.conv2d(&v[0], &v[1], Some(&v[2]), (2, 1))?, s),
        )?,
        check(
            "multidilated_conv",
            vec![
                rand_t(&[2, 2, 8, 8], s),
                rand_t(&[2, 1, 8, 8], s + 1),
                rand_t(&[2, 1, 8, 8], s + 2),
                rand_t(&[3, 2, 3, 3], s + 3),
                rand_t(&[3, 1, 3, 3], s + 4),
                rand_t(&[3, 1, 3, 3], s + 5),
            ],
            step,
            |t, v| {
                let y = t.multidilated_conv(
                    &[&v[0], &v[1], &v[2]],
                    &[&v[3], &v[4], &v[5]],
                    &[(1, 1), (2, 2), (4, 4)],
                    None,
                )?;
                project(t, &y, s)
            },
        )?,
    ];
    let bn_inputs = vec![
        rand_t(&[2, 3, 4, 4], s),
        Tensor::uniform(&[3], 0.5, 1.5, &mut ChaCha8Rng::seed_from_u64(s + 1)),
        rand_t(&[3], s + 2),
    ];
    out.push(check("batch_norm_train", bn_inputs.clone(), step, |t, v| {
        let (y, _) = t.batch_norm(&v[0], &v[1], &v[2], BatchNormMode::Train { eps: 1e-5 })?;
        project(t, &y, s)
    })?);
    out.push(check("batch_norm_eval", bn_inputs.clone(), step, |t, v| {
        let mode = BatchNormMode::Eval {
            running_mean: &[0.1, -0.2, 0.3],
            running_var: &[0.5, 1.0, 2.0],
            eps: 1e-5,
        };
        project(t, &t.batch_norm(&v[0], &v[1], &v[2], mode)?.0, s)
    })?);
    out.push(check("psi", bn_inputs, step, |t, v| {
        let (y, _) = t.batch_norm(&v[0], &v[1], &v[2], BatchNormMode::Train { eps: 1e-5 })?;
        project(t, &t.relu(&y), s)
    })?);
    out.push(check("avg_pool_2x2", vec![rand_t(&[2, 2, 5, 7], s)], step, |t, v| {
        project(t, &t.avg_pool_2x2(&t.pad_edge_to_even(&v[0])?)?, s)
    })?);
    out.push(check(
        "transposed_conv_2x2",
        vec![rand_t(&[2, 3, 4, 4], s), rand_t(&[3, 2, 2, 2], s + 1)],
        step,
        |t, v| project(t, &t.transposed_conv_2x2(&v[0], &v[1])?, s),
    )?);
    out.push(check(
        "concat_narrow_pad",
        vec![
            rand_t(&[2, 2, 3, 4], s),
            rand_t(&[2, 3, 3, 4], s + 1),
            rand_t(&[5], s + 2),
        ],
        step,
        |t, v| {
            let c = t.concat(&[&v[0], &v[1]], Axis::Channel)?;
            let c = t.add_channel_bias(&c, &v[2])?;
            let n = t.narrow(&c, Axis::Frequency, 1, 2)?;
            let p = t.pad_zeros(&n, Axis::Time, 1, 2)?;
            project(t, &t.concat(&[&p, &p], Axis::Frequency)?, s)
        },
    )?);
    out.push(check_d2(seed, step)?);
    out.push(check_d3(seed, step)?);
    Ok(out)
}

/// Gradient of a block's output w.r.t. its input and all trainable parameters.
fn check_block<B>(name: &str, store: &ParamStore, x: Tensor, seed: u64, step: f64, forward: B) -> Result<CheckResult>
where
    B: Fn(&Forward<'_>, &Var) -> Result<Var>,
{
    let ids = store.trainable_ids();
    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    check(name, inputs, step, |tape, v| {
        let fw = Forward::with_vars(
            tape,
            store,
            Mode::Train,
            ids.iter().copied().zip(v[1..].iter().cloned()),
        );
        project(tape, &forward(&fw, &v[0])?, seed)
    })
}

fn check_d2(seed: u64, step: f64) -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = D2Block::new(
        &mut store,
        "d2",
        2,
        &D2BlockConfig::new(2, 3),
        DilationScheme::Multi,
        BatchNormConfig::default(),
        &mut rng,
    );
    check_block(
        "d2_block",
        &store,
        rand_t(&[2, 2, 8, 8], seed + 1),
        seed,
        step,
        |fw, x| block.forward(fw, x),
    )
}

fn check_d3(seed: u64, step: f64) -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = D3BlockConfig::new("d3", 2, 2, 2);
    cfg.reduce = Some(1);
    let block = D3Block::new(
        &mut store,
        "d3",
        2,
        &cfg,
        DilationScheme::Multi,
        BatchNormConfig::default(),
        &mut rng,
    );
    check_block(
        "d3_block",
        &store,
        rand_t(&[2, 2, 6, 6], seed + 1),
        seed,
        step,
        |fw, x| block.forward(fw, x),
    )
}

/// End-to-end check of a whole network in training mode.
///
/// The analytic gradient is computed for the input and every trainable
/// tensor; central differences are evaluated on `per_tensor` randomly chosen
/// coordinates of each (all coordinates when a tensor is smaller).
///
/// A network of this size has many rectifiers sitting close to zero, and a
/// probe that moves one of them across the kink measures a different linear
/// piece. Such probes are detected through [`Tape::relu_signature`] and
/// repeated with a step ten and a hundred times smaller; coordinates that
/// still straddle a kink are skipped and counted in `skipped`.
pub fn check_model(model: &Model, frames: usize, per_tensor: usize, seed: u64, step: f64) -> Result<CheckResult> {
    let (_, hi) = model.modeled_range();
    let x = Tensor::uniform(&[2, 2, frames, hi], 0.1, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let store = model.store();

    let tape = Tape::new();
    let fw = Forward::new(&tape, store, Mode::Train);
    let xv = tape.leaf(x.clone());
    let loss = project(&tape, &model.forward(&fw, &xv)?, seed)?;
    let grads = tape.backward(&loss)?;
    let base_signature = tape.relu_signature();
    let mut analytic = vec![grads.wrt(&xv)];
    analytic.extend(fw.param_grads(&grads).into_iter().map(|(_, g)| g));
    drop(grads);
    let ids = store.trainable_ids();

    let eval = |st: &ParamStore, x: &Tensor| -> Result<(f64, u64)> {
        let tape = Tape::no_grad();
        let fw = Forward::new(&tape, st, Mode::Train);
        let loss = project(&tape, &model.forward(&fw, &Var::constant(x.clone()))?, seed)?;
        Ok((loss.value().item(), tape.relu_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut probe_store = store.clone();
    let mut probe_x = x;
    let mut worst = 0.0_f64;
    let (mut coordinates, mut skipped) = (0, 0);
    for (slot, g) in analytic.iter().enumerate() {
        let n = g.numel();
        let picks = if n <= per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_tensor).into_vec()
        };
        for i in picks {
            let mut at = |delta: f64| -> Result<(f64, u64)> {
                let target = if slot == 0 {
                    &mut probe_x
                } else {
                    probe_store.get_mut(ids[slot - 1])
                };
                let orig = target.data()[i];
                target.data_mut()[i] = orig + delta;
                let r = eval(&probe_store, &probe_x);
                let target = if slot == 0 {
                    &mut probe_x
                } else {
                    probe_store.get_mut(ids[slot - 1])
                };
                target.data_mut()[i] = orig;
                r
            };
            let mut h = step;
            let mut numeric = None;
            for _ in 0..3 {
                let (plus, sp) = at(h)?;
                let (minus, sm) = at(-h)?;
                if sp == base_signature && sm == base_signature {
                    numeric = Some((plus - minus) / (2.0 * h));
                    break;
                }
                h /= 10.0;
            }
            let Some(numeric) = numeric else {
                skipped += 1;
                continue;
            };
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            coordinates += 1;
        }
    }
    Ok(CheckResult {
        name: format!("model:{}", model.config().name),
        max_rel_error: worst,
        coordinates,
        skipped,
    })
}
