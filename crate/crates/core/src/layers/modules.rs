//! Parameterized layers built on [`ParamStore`].

use rand::Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::tensor::Tensor;

use super::ops::BatchNormMode;
use super::params::{Forward, Mode, ParamId, ParamKind, ParamStore, StatUpdate};

fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Plain 2-D convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub dilation: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        dilation: (usize, usize),
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let shape = [out_ch, in_ch, kernel.0, kernel.1];
        let w = fan_in_uniform(&shape, in_ch * kernel.0 * kernel.1, rng);
        let kernel = store.add(format!("{name}.kernel"), ParamKind::Trainable, w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[out_ch])));
        Conv2d { kernel, bias, dilation }
    }

    pub fn forward(&self, fw: &Forward<'_>, x: &Var) -> Result<Var> {
        fw.tape
            .conv2d(x, fw.param(self.kernel), self.bias.map(|b| fw.param(b)), self.dilation)
    }
}

/// One kernel group per input source, each with its own dilation factor.
#[derive(Clone, Debug)]
pub struct MultiDilatedConv {
    pub groups: Vec<ConvGroup>,
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGroup {
    pub kernel: ParamId,
    pub in_channels: usize,
    pub dilation: usize,
}

impl MultiDilatedConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: &[usize],
        dilations: &[usize],
        out_ch: usize,
        kernel: (usize, usize),
        rng: &mut R,
    ) -> Self {
        assert_eq!(in_channels.len(), dilations.len());
        let fan_in = in_channels.iter().sum::<usize>() * kernel.0 * kernel.1;
        let groups = in_channels
            .iter()
            .zip(dilations)
            .enumerate()
            .map(|(i, (&c, &d))| {
                let w = fan_in_uniform(&[out_ch, c, kernel.0, kernel.1], fan_in, rng);
                ConvGroup {
                    kernel: store.add(format!("{name}.group{i}.kernel"), ParamKind::Trainable, w),
                    in_channels: c,
                    dilation: d,
                }
            })
            .collect();
        MultiDilatedConv {
            groups,
            out_channels: out_ch,
        }
    }

    pub fn dilations(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.dilation).collect()
    }

    pub fn forward(&self, fw: &Forward<'_>, inputs: &[Var]) -> Result<Var> {
        let xs: Vec<&Var> = inputs.iter().collect();
        let ks: Vec<&Var> = self.groups.iter().map(|g| fw.param(g.kernel)).collect();
        let ds: Vec<(usize, usize)> = self.groups.iter().map(|g| (g.dilation, g.dilation)).collect();
        fw.tape.multidilated_conv(&xs, &ks, &ds, None)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        let shape = [channels];
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Trainable, Tensor::ones(&shape)),
            beta: store.add(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&shape)),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&shape)),
            running_var: store.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::ones(&shape)),
            eps,
            momentum,
        }
    }

    pub fn forward(&self, fw: &Forward<'_>, x: &Var) -> Result<Var> {
        let (gamma, beta) = (fw.param(self.gamma), fw.param(self.beta));
        match fw.mode() {
            Mode::Train => {
                let (y, stats) = fw
                    .tape
                    .batch_norm(x, gamma, beta, BatchNormMode::Train { eps: self.eps })?;
                if let Some(stats) = stats {
                    fw.push_update(StatUpdate {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                        momentum: self.momentum,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let mode = BatchNormMode::Eval {
                    running_mean: fw.value(self.running_mean).data(),
                    running_var: fw.value(self.running_var).data(),
                    eps: self.eps,
                };
                Ok(fw.tape.batch_norm(x, gamma, beta, mode)?.0)
            }
        }
    }

    /// The composite pre-activation: batch normalization then rectification.
    pub fn psi(&self, fw: &Forward<'_>, x: &Var) -> Result<Var> {
        let y = self.forward(fw, x)?;
        Ok(fw.tape.relu(&y))
    }
}

/// Learned 2x upsampling.
#[derive(Clone, Debug)]
pub struct TransposedConv2x2 {
    pub kernel: ParamId,
}

impl TransposedConv2x2 {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let w = fan_in_uniform(&[in_ch, out_ch, 2, 2], in_ch, rng);
        TransposedConv2x2 {
            kernel: store.add(format!("{name}.kernel"), ParamKind::Trainable, w),
        }
    }

    pub fn forward(&self, fw: &Forward<'_>, x: &Var) -> Result<Var> {
        fw.tape.transposed_conv_2x2(x, fw.param(self.kernel))
    }
}
