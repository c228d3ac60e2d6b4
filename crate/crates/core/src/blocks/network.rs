//! The multiband encoder-decoder assembled from a [`NetworkConfig`].

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Axis, BatchNorm, Conv2d, Forward, Mode, ParamStore, TransposedConv2x2};
use crate::tensor::Tensor;

use super::config::{NetworkConfig, Stage};
use super::dense::{D2Block, D3Block};

/// Bookkeeping persisted alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub epochs_trained: usize,
    /// Patch length used during training; reused for inference tiling.
    #[serde(default)]
    pub patch_frames: Option<usize>,
    /// Name of the source this network estimates.
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub sample_rate: Option<u32>,
}

#[derive(Clone, Debug)]
pub enum StageModule {
    D3 { name: String, block: D3Block },
    Down,
    Up(TransposedConv2x2),
    Concat(String),
}

#[derive(Clone, Debug)]
pub struct BandStream {
    pub name: String,
    pub bins: [usize; 2],
    pub init: Conv2d,
    pub stages: Vec<StageModule>,
    pub out_channels: usize,
}

impl BandStream {
    pub fn d3_blocks(&self) -> impl Iterator<Item = (&str, &D3Block)> {
        self.stages.iter().filter_map(|s| match s {
            StageModule::D3 { name, block } => Some((name.as_str(), block)),
            _ => None,
        })
    }

    fn forward(&self, fw: &Forward<'_>, x: &Var) -> Result<Var> {
        let tape = fw.tape;
        let mut h = self.init.forward(fw, x)?;
        let mut saved: HashMap<&str, Var> = HashMap::new();
        for stage in &self.stages {
            h = match stage {
                StageModule::D3 { name, block } => {
                    let out = block.forward(fw, &h)?;
                    saved.insert(name, out.clone());
                    out
                }
                StageModule::Down => tape.avg_pool_2x2(&tape.pad_edge_to_even(&h)?)?,
                StageModule::Up(up) => up.forward(fw, &h)?,
                StageModule::Concat(with) => {
                    let skip = saved
                        .get(with.as_str())
                        .ok_or_else(|| Error::Config(format!("concat with unknown stage '{with}'")))?;
                    let cropped = crop_to(tape, &h, skip)?;
                    tape.concat(&[&cropped, skip], Axis::Channel)?
                }
            };
        }
        Ok(h)
    }
}

/// Crop the time/frequency extents of `x` down to those of `like`.
fn crop_to(tape: &Tape, x: &Var, like: &Var) -> Result<Var> {
    let [_, _, t, f] = x.value().dims4()?;
    let [_, _, lt, lf] = like.value().dims4()?;
    if t < lt || f < lf {
        return Err(Error::ShapeMismatch {
            op: "stage concat",
            left: x.shape().to_vec(),
            right: like.shape().to_vec(),
        });
    }
    let x = tape.narrow(x, Axis::Time, 0, lt)?;
    tape.narrow(&x, Axis::Frequency, 0, lf)
}

/// A per-source separation network mapping mixture magnitudes
/// `[n, 2, t, f]` to source-magnitude estimates of the same shape.
#[derive(Clone, Debug)]
pub struct Model {
    config: NetworkConfig,
    pub meta: ModelMeta,
    store: ParamStore,
    bands: Vec<BandStream>,
    /// Aligned with `config.merge.freq`.
    projections: Vec<Option<Conv2d>>,
    final_block: D2Block,
    final_norm: BatchNorm,
    gate: Conv2d,
}

impl Model {
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Model> {
        let plans = config.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let scheme = config.dilation;
        let bn = config.batch_norm;

        let mut bands = Vec::with_capacity(config.bands.len());
        for band in &config.bands {
            let name = &band.name;
            let ic = &band.init_conv;
            let init = Conv2d::new(
                &mut store,
                &format!("{name}.init"),
                2,
                ic.channels,
                (ic.kernel[0], ic.kernel[1]),
                (1, 1),
                true,
                &mut rng,
            );
            let mut channels = ic.channels;
            let mut widths: HashMap<&str, usize> = HashMap::new();
            let mut stages = Vec::with_capacity(band.stages.len());
            let mut ups = 0;
            for stage in &band.stages {
                stages.push(match stage {
                    Stage::D3(d3) => {
                        let block = D3Block::new(
                            &mut store,
                            &format!("{name}.{}", d3.name),
                            channels,
                            d3,
                            scheme,
                            bn,
                            &mut rng,
                        );
                        channels = block.out_channels();
                        widths.insert(&d3.name, channels);
                        StageModule::D3 {
                            name: d3.name.clone(),
                            block,
                        }
                    }
                    Stage::Down => StageModule::Down,
                    Stage::Up => {
                        ups += 1;
                        StageModule::Up(TransposedConv2x2::new(
                            &mut store,
                            &format!("{name}.up{ups}"),
                            channels,
                            channels,
                            &mut rng,
                        ))
                    }
                    Stage::Concat { with } => {
                        channels += widths[with.as_str()];
                        StageModule::Concat(with.clone())
                    }
                });
            }
            debug_assert_eq!(channels, plans[name].out_channels);
            bands.push(BandStream {
                name: name.clone(),
                bins: band.bins,
                init,
                stages,
                out_channels: channels,
            });
        }

        let out_of = |n: &str| plans[n].out_channels;
        let merge = &config.merge;
        let freq_channels = merge
            .freq_channels
            .unwrap_or_else(|| merge.freq.iter().map(|n| out_of(n)).max().unwrap_or(0));
        let projections = merge
            .freq
            .iter()
            .map(|n| {
                (out_of(n) != freq_channels).then(|| {
                    Conv2d::new(
                        &mut store,
                        &format!("merge.proj.{n}"),
                        out_of(n),
                        freq_channels,
                        (1, 1),
                        (1, 1),
                        false,
                        &mut rng,
                    )
                })
            })
            .collect();
        let merged_channels = if merge.freq.is_empty() { 0 } else { freq_channels }
            + merge.channel.iter().map(|n| out_of(n)).sum::<usize>();

        let final_block = D2Block::new(
            &mut store,
            "final",
            merged_channels,
            &config.final_block,
            scheme,
            bn,
            &mut rng,
        );
        let final_norm = BatchNorm::new(
            &mut store,
            "final.norm",
            final_block.out_channels(),
            bn.eps,
            bn.momentum,
        );
        let gate = Conv2d::new(
            &mut store,
            "gate",
            final_block.out_channels(),
            config.gate.channels,
            (config.gate.kernel[0], config.gate.kernel[1]),
            (1, 1),
            true,
            &mut rng,
        );
        Ok(Model {
            config: config.clone(),
            meta: ModelMeta {
                seed,
                ..ModelMeta::default()
            },
            store,
            bands,
            projections,
            final_block,
            final_norm,
            gate,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn bands(&self) -> &[BandStream] {
        &self.bands
    }

    pub fn band(&self, name: &str) -> Option<&BandStream> {
        self.bands.iter().find(|b| b.name == name)
    }

    pub fn final_block(&self) -> &D2Block {
        &self.final_block
    }

    /// Frequency bins `[start, end)` the network estimates; others get zeros.
    pub fn modeled_range(&self) -> (usize, usize) {
        self.config.modeled_range()
    }

    pub fn forward(&self, fw: &Forward<'_>, mixture: &Var) -> Result<Var> {
        let tape = fw.tape;
        let [_, c, _, f] = mixture.value().dims4()?;
        if c != self.config.gate.channels {
            return Err(Error::ChannelMismatch {
                op: "model input",
                expected: self.config.gate.channels,
                actual: c,
            });
        }
        let (lo, hi) = self.modeled_range();
        if f < hi {
            return Err(Error::invalid(format!(
                "input has {f} frequency bins but the network models bins up to {hi}"
            )));
        }
        let mut outputs: HashMap<&str, Var> = HashMap::new();
        for band in &self.bands {
            let x = tape.narrow(mixture, Axis::Frequency, band.bins[0], band.bins[1] - band.bins[0])?;
            outputs.insert(&band.name, band.forward(fw, &x)?);
        }

        let merge = &self.config.merge;
        let mut parts = Vec::new();
        if !merge.freq.is_empty() {
            let projected = merge
                .freq
                .iter()
                .zip(&self.projections)
                .map(|(n, proj)| {
                    let h = &outputs[n.as_str()];
                    match proj {
                        Some(p) => p.forward(fw, h),
                        None => Ok(h.clone()),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            parts.push(tape.concat(&projected.iter().collect::<Vec<_>>(), Axis::Frequency)?);
        }
        for n in &merge.channel {
            parts.push(outputs[n.as_str()].clone());
        }
        let merged = tape.concat(&parts.iter().collect::<Vec<_>>(), Axis::Channel)?;

        let h = self.final_block.forward(fw, &merged)?;
        let h = self.final_norm.psi(fw, &h)?;
        let mask = tape.sigmoid(&self.gate.forward(fw, &h)?);
        let mix = tape.narrow(mixture, Axis::Frequency, lo, hi - lo)?;
        let est = tape.mul(&mask, &mix)?;
        tape.pad_zeros(&est, Axis::Frequency, lo, f - hi)
    }

    /// Eval-mode forward without gradient tracking.
    pub fn infer(&self, mixture: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let fw = Forward::new(&tape, &self.store, Mode::Eval);
        let y = self.forward(&fw, &Var::constant(mixture.clone()))?;
        Ok(y.value().clone())
    }
}
