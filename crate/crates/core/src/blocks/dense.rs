//! Dilated dense blocks (D2) and their densely connected nesting (D3).

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Axis, BatchNorm, Forward, MultiDilatedConv, ParamStore};

use super::config::{BatchNormConfig, D2BlockConfig, D3BlockConfig, DilationScheme};

/// Channel-concatenation of the last `n` layer outputs.
pub fn channel_reduce(tape: &Tape, layer_outputs: &[Var], n: usize) -> Result<Var> {
    if n == 0 || n > layer_outputs.len() {
        return Err(Error::invalid(format!(
            "channel reduction N={n} outside 1..={}",
            layer_outputs.len()
        )));
    }
    let tail: Vec<&Var> = layer_outputs[layer_outputs.len() - n..].iter().collect();
    tape.concat(&tail, Axis::Channel)
}

/// One dense layer: per-source pre-activation, then a multidilated convolution.
#[derive(Clone, Debug)]
pub struct D2Layer {
    /// One normalization per input group; together they normalize the full
    /// concatenated input channel by channel.
    pub norms: Vec<BatchNorm>,
    pub conv: MultiDilatedConv,
}

#[derive(Clone, Debug)]
pub struct D2Block {
    pub config: D2BlockConfig,
    pub in_channels: usize,
    pub layers: Vec<D2Layer>,
}

impl D2Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        config: &D2BlockConfig,
        scheme: DilationScheme,
        bn: BatchNormConfig,
        rng: &mut R,
    ) -> Self {
        let k = config.growth_rate;
        let layers = (1..=config.layers)
            .map(|l| {
                let widths: Vec<usize> = std::iter::once(in_channels)
                    .chain(std::iter::repeat_n(k, l - 1))
                    .collect();
                let norms = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| BatchNorm::new(store, &format!("{name}.layer{l}.norm{i}"), c, bn.eps, bn.momentum))
                    .collect();
                let conv = MultiDilatedConv::new(
                    store,
                    &format!("{name}.layer{l}.conv"),
                    &widths,
                    &config.layer_dilations(l, scheme),
                    k,
                    (config.kernel[0], config.kernel[1]),
                    rng,
                );
                D2Layer { norms, conv }
            })
            .collect();
        D2Block {
            config: config.clone(),
            in_channels,
            layers,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    /// Outputs `x_1 ... x_L` of every layer.
    pub fn forward_layers(&self, fw: &Forward<'_>, x: &Var) -> Result<Vec<Var>> {
        let c = x.value().dims4()?[1];
        if c != self.in_channels {
            return Err(Error::ChannelMismatch {
                op: "d2_forward",
                expected: self.in_channels,
                actual: c,
            });
        }
        let mut feats = vec![x.clone()];
        for layer in &self.layers {
            let ys = feats
                .iter()
                .zip(&layer.norms)
                .map(|(f, bn)| bn.psi(fw, f))
                .collect::<Result<Vec<_>>>()?;
            feats.push(layer.conv.forward(fw, &ys)?);
        }
        feats.remove(0);
        Ok(feats)
    }

    pub fn forward(&self, fw: &Forward<'_>, x: &Var) -> Result<Var> {
        let outs = self.forward_layers(fw, x)?;
        channel_reduce(fw.tape, &outs, self.config.reduce_n())
    }
}

/// `M` D2 blocks; block `m` sees the input plus the reduced outputs of blocks `1..m`.
#[derive(Clone, Debug)]
pub struct D3Block {
    pub config: D3BlockConfig,
    pub blocks: Vec<D2Block>,
}

impl D3Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        config: &D3BlockConfig,
        scheme: DilationScheme,
        bn: BatchNormConfig,
        rng: &mut R,
    ) -> Self {
        let d2 = config.d2();
        let blocks = (0..config.blocks)
            .map(|m| {
                D2Block::new(
                    store,
                    &format!("{name}.d2_{m}"),
                    config.d2_input_channels(in_channels, m),
                    &d2,
                    scheme,
                    bn,
                    rng,
                )
            })
            .collect();
        D3Block {
            config: config.clone(),
            blocks,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    pub fn forward(&self, fw: &Forward<'_>, x: &Var) -> Result<Var> {
        let mut inputs = vec![x.clone()];
        let mut last = None;
        for block in &self.blocks {
            let refs: Vec<&Var> = inputs.iter().collect();
            let joined = fw.tape.concat(&refs, Axis::Channel)?;
            let out = block.forward(fw, &joined)?;
            inputs.push(out.clone());
            last = Some(out);
        }
        last.ok_or_else(|| Error::invalid("D3 block without D2 blocks"))
    }
}
