use super::*;
use crate::autodiff::{Tape, Var};
use crate::layers::{Forward, Mode, ParamStore};
use crate::tensor::Tensor;
use crate::testutil::{naive_conv, rand_t, rng};

fn concat_channels(xs: &[Tensor]) -> Tensor {
    let [n, _, t, f] = xs[0].dims4().unwrap();
    let c: usize = xs.iter().map(|x| x.dim(1)).sum();
    let mut out = Vec::with_capacity(n * c * t * f);
    for ni in 0..n {
        for x in xs {
            let plane = x.dim(1) * t * f;
            out.extend_from_slice(&x.data()[ni * plane..(ni + 1) * plane]);
        }
    }
    Tensor::new(&[n, c, t, f], out).unwrap()
}

/// Concatenate `[o, c_i, kt, kf]` kernels along the input-channel axis.
fn concat_kernels(ws: &[Tensor]) -> Tensor {
    let [o, _, kt, kf] = ws[0].dims4().unwrap();
    let c: usize = ws.iter().map(|w| w.dim(1)).sum();
    let mut out = Vec::new();
    for oi in 0..o {
        for w in ws {
            let plane = w.dim(1) * kt * kf;
            out.extend_from_slice(&w.data()[oi * plane..(oi + 1) * plane]);
        }
    }
    Tensor::new(&[o, c, kt, kf], out).unwrap()
}

/// Train-mode batch normalization and rectification, straight from the definition.
fn plain_psi(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let [n, c, t, f] = x.dims4().unwrap();
    let plane = t * f;
    let mut out = x.clone();
    for ci in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|ni| {
                x.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane]
                    .iter()
                    .copied()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for ni in 0..n {
            for v in &mut out.data_mut()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane] {
                *v = (gamma[ci] * (*v - mean) / (var + eps).sqrt() + beta[ci]).max(0.0);
            }
        }
    }
    out
}

/// An undilated DenseNet block written without any of the block machinery.
fn plain_dense_block(block: &D2Block, store: &ParamStore, x: &Tensor, eps: f64) -> Tensor {
    let mut feats = vec![x.clone()];
    for layer in &block.layers {
        let joined = concat_channels(&feats);
        let gamma: Vec<f64> = layer
            .norms
            .iter()
            .flat_map(|bn| store.get(bn.gamma).data().to_vec())
            .collect();
        let beta: Vec<f64> = layer
            .norms
            .iter()
            .flat_map(|bn| store.get(bn.beta).data().to_vec())
            .collect();
        let act = plain_psi(&joined, &gamma, &beta, eps);
        let ws: Vec<Tensor> = layer.conv.groups.iter().map(|g| store.get(g.kernel).clone()).collect();
        feats.push(naive_conv(&act, &concat_kernels(&ws), (1, 1)));
    }
    let n = block.config.reduce_n();
    concat_channels(&feats[feats.len() - n..])
}

fn randomize_affine(store: &mut ParamStore, seed: u64) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, e)| e.name.ends_with(".gamma") || e.name.ends_with(".beta"))
        .map(|(id, _)| id)
        .collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::uniform(&shape, 0.5, 1.5, &mut rng(seed * 1000 + i as u64));
    }
}

fn run<F: Fn(&Forward<'_>) -> crate::Result<Var>>(store: &ParamStore, mode: Mode, f: F) -> Tensor {
    let tape = Tape::no_grad();
    let fw = Forward::new(&tape, store, mode);
    f(&fw).unwrap().value().clone()
}

#[test]
fn undilated_d2_block_is_a_plain_densenet_block() {
    for seed in 0..3 {
        let mut cfg = D2BlockConfig::new(3, 3);
        cfg.dilation = Some(DilationScheme::None);
        let bn = BatchNormConfig::default();
        let mut store = ParamStore::new();
        let block = D2Block::new(&mut store, "b", 2, &cfg, DilationScheme::Multi, bn, &mut rng(seed));
        randomize_affine(&mut store, seed);
        let x = rand_t(&[2, 2, 6, 5], seed + 10);
        let got = run(&store, Mode::Train, |fw| block.forward(fw, &Var::constant(x.clone())));
        let want = plain_dense_block(&block, &store, &x, bn.eps);
        assert_eq!(got.shape(), &[2, 9, 6, 5]);
        assert!(
            got.max_abs_diff(&want) <= 1e-12,
            "seed {seed}: {}",
            got.max_abs_diff(&want)
        );
    }
}

#[test]
fn reduced_undilated_block_matches_oracle_tail() {
    let mut cfg = D2BlockConfig::new(2, 4);
    cfg.dilation = Some(DilationScheme::None);
    cfg.reduce = Some(2);
    let bn = BatchNormConfig::default();
    let mut store = ParamStore::new();
    let block = D2Block::new(&mut store, "b", 3, &cfg, DilationScheme::Multi, bn, &mut rng(4));
    let x = rand_t(&[1, 3, 5, 7], 5);
    let got = run(&store, Mode::Train, |fw| block.forward(fw, &Var::constant(x.clone())));
    let want = plain_dense_block(&block, &store, &x, bn.eps);
    assert_eq!(got.dim(1), 4);
    assert!(got.max_abs_diff(&want) <= 1e-12);
}

#[test]
fn layer_dilation_lists() {
    let cfg = D2BlockConfig::new(4, 3);
    let lists: Vec<_> = (1..=3).map(|l| cfg.layer_dilations(l, DilationScheme::Multi)).collect();
    assert_eq!(lists, vec![vec![1], vec![1, 2], vec![1, 2, 4]]);
    assert_eq!(cfg.layer_dilations(3, DilationScheme::Naive), vec![4, 4, 4]);
    assert_eq!(cfg.layer_dilations(3, DilationScheme::None), vec![1, 1, 1]);
}

#[test]
fn single_layer_block_is_one_conv_of_psi() {
    let cfg = D2BlockConfig::new(3, 1);
    let bn = BatchNormConfig::default();
    let mut store = ParamStore::new();
    let block = D2Block::new(&mut store, "b", 2, &cfg, DilationScheme::Multi, bn, &mut rng(1));
    let x = rand_t(&[2, 2, 4, 4], 2);
    let got = run(&store, Mode::Train, |fw| block.forward(fw, &Var::constant(x.clone())));
    let act = plain_psi(&x, &[1.0, 1.0], &[0.0, 0.0], bn.eps);
    let want = naive_conv(&act, store.get(block.layers[0].conv.groups[0].kernel), (1, 1));
    assert!(got.max_abs_diff(&want) <= 1e-12);
}

#[test]
fn channel_reduce_examples() {
    let tape = Tape::no_grad();
    let outs: Vec<Var> = (0..5).map(|i| Var::constant(rand_t(&[1, 16, 2, 2], i))).collect();
    assert_eq!(channel_reduce(&tape, &outs, 5).unwrap().shape()[1], 80);
    let last = channel_reduce(&tape, &outs, 1).unwrap();
    assert_eq!(last.value(), outs[4].value());
    assert!(channel_reduce(&tape, &outs, 0).is_err());
    assert!(channel_reduce(&tape, &outs, 6).is_err());
}

#[test]
fn d3_with_one_block_equals_d2() {
    let bn = BatchNormConfig::default();
    let mut d3cfg = D3BlockConfig::new("x", 3, 3, 1);
    d3cfg.reduce = Some(2);
    let mut s1 = ParamStore::new();
    let d3 = D3Block::new(&mut s1, "x", 4, &d3cfg, DilationScheme::Multi, bn, &mut rng(7));
    let mut s2 = ParamStore::new();
    let d2 = D2Block::new(
        &mut s2,
        "x.d2_0",
        4,
        &d3cfg.d2(),
        DilationScheme::Multi,
        bn,
        &mut rng(7),
    );
    let x = rand_t(&[2, 4, 8, 6], 8);
    let a = run(&s1, Mode::Train, |fw| d3.forward(fw, &Var::constant(x.clone())));
    let b = run(&s2, Mode::Train, |fw| d2.forward(fw, &Var::constant(x.clone())));
    assert_eq!(a, b);
}

#[test]
fn d3_channel_arithmetic_and_shape() {
    // vocals full-band block 1: k=13, L=4, M=2
    let cfg = D3BlockConfig::new("d3_1", 13, 4, 2);
    let mut store = ParamStore::new();
    let block = D3Block::new(
        &mut store,
        "d",
        32,
        &cfg,
        DilationScheme::Multi,
        BatchNormConfig::default(),
        &mut rng(0),
    );
    assert_eq!(block.blocks[0].in_channels, 32);
    assert_eq!(block.blocks[1].in_channels, 32 + 4 * 13);
    let x = rand_t(&[1, 32, 5, 9], 1);
    let y = run(&store, Mode::Train, |fw| block.forward(fw, &Var::constant(x.clone())));
    assert_eq!(y.shape(), &[1, 52, 5, 9]);
}

#[test]
fn dilation_restarts_inside_each_d2_block() {
    let cfg = D3BlockConfig::new("d", 2, 3, 3);
    let mut store = ParamStore::new();
    let block = D3Block::new(
        &mut store,
        "d",
        2,
        &cfg,
        DilationScheme::Multi,
        BatchNormConfig::default(),
        &mut rng(0),
    );
    for d2 in &block.blocks {
        assert_eq!(d2.layers[2].conv.dilations(), vec![1, 2, 4]);
    }
}

#[test]
fn shipped_configs_have_consistent_channel_arithmetic() {
    for name in builtin::names() {
        let cfg = builtin::builtin(name).unwrap();
        let model = Model::build(&cfg, 0).unwrap();
        for band in model.bands() {
            for (_, d3) in band.d3_blocks() {
                let c = &d3.config;
                assert_eq!(d3.out_channels(), c.reduce.unwrap_or(c.layers) * c.growth_rate);
                let c0 = d3.blocks[0].in_channels;
                for (m, d2) in d3.blocks.iter().enumerate() {
                    assert_eq!(d2.in_channels, c0 + m * c.layers * c.growth_rate, "{name}");
                    assert_eq!(d2.out_channels(), c.layers * c.growth_rate);
                }
            }
        }
        assert_eq!(
            model.final_block().out_channels(),
            cfg.final_block.layers * cfg.final_block.growth_rate
        );
        assert!(model.param_count() > 0);
    }
}

#[test]
fn table1_band_layout() {
    let cfg = builtin::builtin("vocals-table1").unwrap();
    let model = Model::build(&cfg, 0).unwrap();
    assert_eq!(model.band("low").unwrap().bins, [0, 256]);
    assert_eq!(model.band("high").unwrap().bins, [256, 1600]);
    assert_eq!(model.modeled_range(), (0, 1600));
    let full: Vec<_> = model
        .band("full")
        .unwrap()
        .d3_blocks()
        .map(|(_, b)| b.config.clone())
        .collect();
    assert_eq!(full.len(), 9);
    assert_eq!((full[0].growth_rate, full[0].layers, full[0].blocks), (13, 4, 2));
    assert_eq!((full[4].growth_rate, full[4].layers, full[4].blocks), (17, 8, 2));
    assert_eq!(model.band("low").unwrap().d3_blocks().count(), 7);
    let drums = builtin::builtin("drums-table1").unwrap();
    assert_eq!(drums.band("low").unwrap().bins, [0, 128]);
    let bass = builtin::builtin("bass-table1").unwrap();
    assert_eq!(bass.band("high").unwrap().bins, [192, 1600]);
}

#[test]
fn tiny_model_preserves_shape_and_zeroes_unmodeled_bins() {
    let cfg = builtin::builtin("tiny").unwrap();
    let model = Model::build(&cfg, 3).unwrap();
    let x = rand_t(&[2, 2, 9, 100], 4).map(f64::abs);
    let y = model.infer(&x).unwrap();
    assert_eq!(y.shape(), x.shape());
    let (_, hi) = model.modeled_range();
    for (i, v) in y.data().iter().enumerate() {
        assert!(v.is_finite() && *v >= 0.0);
        if i % 100 >= hi {
            assert_eq!(*v, 0.0);
        }
    }
}

#[test]
fn tiny_model_trains_end_to_end_gradients() {
    let cfg = builtin::builtin("tiny").unwrap();
    let model = Model::build(&cfg, 0).unwrap();
    let tape = Tape::new();
    let fw = Forward::new(&tape, model.store(), Mode::Train);
    let x = tape.leaf(rand_t(&[2, 2, 32, 64], 1).map(f64::abs));
    let y = model.forward(&fw, &x).unwrap();
    let loss = tape.mean(&y);
    let grads = tape.backward(&loss).unwrap();
    let pg = fw.param_grads(&grads);
    assert_eq!(pg.len(), model.store().trainable_ids().len());
    assert!(pg.iter().any(|(_, g)| g.data().iter().any(|v| *v != 0.0)));
}

#[test]
fn input_too_narrow_is_rejected() {
    let model = Model::build(&builtin::builtin("tiny").unwrap(), 0).unwrap();
    assert!(model.infer(&Tensor::ones(&[1, 2, 4, 40])).is_err());
    assert!(model.infer(&Tensor::ones(&[1, 1, 4, 64])).is_err());
}

#[test]
fn mismatched_concat_is_rejected() {
    let mut cfg = builtin::builtin("tiny").unwrap();
    // concat across scales: drop the upsampling before the skip
    let stages = &mut cfg.bands[0].stages;
    let up = stages.iter().position(|s| matches!(s, Stage::Up)).unwrap();
    stages.remove(up);
    let err = cfg.validate().unwrap_err().to_string();
    assert!(err.contains("scale"), "{err}");

    let mut cfg = builtin::builtin("tiny").unwrap();
    cfg.bands[0].stages.push(Stage::Concat { with: "nope".into() });
    assert!(cfg.validate().is_err());
    let mut cfg = builtin::builtin("tiny").unwrap();
    cfg.gate.channels = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = builtin::builtin("tiny").unwrap();
    cfg.bands[1].bins = [17, 64];
    assert!(cfg.validate().is_err());
}

#[test]
fn scheme_parsing() {
    assert_eq!("multi".parse::<DilationScheme>().unwrap(), DilationScheme::Multi);
    assert_eq!("standard".parse::<DilationScheme>().unwrap(), DilationScheme::Naive);
    assert_eq!("none".parse::<DilationScheme>().unwrap(), DilationScheme::None);
    assert!("wavenet".parse::<DilationScheme>().is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.ckpt");
    let cfg = builtin::builtin("tiny").unwrap();
    let mut model = Model::build(&cfg, 11).unwrap();
    model.meta.epochs_trained = 3;
    randomize_affine(model.store_mut(), 2);
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint_for(&path, &cfg).unwrap();
    assert_eq!(back.meta, model.meta);
    for ((_, a), (_, b)) in model.store().iter().zip(back.store().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let x = rand_t(&[1, 2, 8, 64], 0).map(f64::abs);
    assert_eq!(model.infer(&x).unwrap(), back.infer(&x).unwrap());
    let size = std::fs::metadata(&path).unwrap().len();
    assert!(size <= 10 << 20, "{size} bytes");

    let other = builtin::builtin("tiny-no-dilation").unwrap();
    let err = load_checkpoint_for(&path, &other).unwrap_err().to_string();
    assert!(err.contains("fingerprint"), "{err}");
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::build(&builtin::builtin("tiny").unwrap(), 0).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(load_checkpoint(&path).is_err());
    std::fs::write(&path, b"not a checkpoint at all").unwrap();
    assert!(load_checkpoint(&path).is_err());
}
