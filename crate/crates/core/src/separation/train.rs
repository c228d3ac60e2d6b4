//! Patch-based training of one per-source network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::Model;
use crate::error::{Error, Result};
use crate::layers::{Forward, Mode};
use crate::spectral::{stft, AudioClip, StftConfig};
use crate::tensor::Tensor;

use super::adam::{AdamConfig, AdamState};
use super::augment::StemAugment;
use super::loss::mse_loss;
use super::synth::SyntheticScene;

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_after: f64,
    /// First (0-based) epoch that uses `lr_after`.
    pub lr_switch_epoch: usize,
    pub patch_frames: usize,
    pub seed: u64,
    pub augment: bool,
    /// Training patches drawn per scene and epoch.
    pub patches_per_scene: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 6,
            lr_initial: 1e-3,
            lr_after: 1e-4,
            lr_switch_epoch: 40,
            patch_frames: 256,
            seed: 0,
            augment: true,
            patches_per_scene: 1,
        }
    }
}

impl TrainConfig {
    /// Change the epoch count and move the learning-rate switch so it sits at
    /// the same fraction of the run (40 of 50 by default).
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        if epochs > 0 {
            let frac = self.lr_switch_epoch as f64 / self.epochs.max(1) as f64;
            self.lr_switch_epoch = ((epochs as f64 * frac).round() as usize).min(epochs - 1);
        }
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.lr_switch_epoch >= self.epochs {
            return Err(Error::invalid(format!(
                "lr_switch_epoch ({}) must be below epochs ({})",
                self.lr_switch_epoch, self.epochs
            )));
        }
        if self.batch_size == 0 || self.patch_frames == 0 || self.patches_per_scene == 0 {
            return Err(Error::invalid(
                "batch_size, patch_frames and patches_per_scene must be positive",
            ));
        }
        if !(self.lr_initial > 0.0 && self.lr_after > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch < self.lr_switch_epoch {
            self.lr_initial
        } else {
            self.lr_after
        }
    }
}

/// Complex STFT of every stem of one scene, kept only for bins `[0, bins)`.
#[derive(Clone, Debug)]
struct SpectralScene {
    name: String,
    frames: usize,
    /// One `[2][frames][bins]` plane per source, in [`TrainingSet::sources`] order.
    stems: Vec<Vec<Complex64>>,
}

/// Stem spectrograms ready for patch sampling.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub sources: Vec<String>,
    pub bins: usize,
    pub stft: StftConfig,
    pub sample_rate: Option<u32>,
    scenes: Vec<SpectralScene>,
}

/// Where one stem of one batch element comes from.
#[derive(Clone, Copy, Debug)]
struct Draw {
    scene: usize,
    offset: usize,
    aug: StemAugment,
}

impl TrainingSet {
    pub fn new(sources: Vec<String>, bins: usize, stft: StftConfig) -> Result<Self> {
        if sources.is_empty() || bins == 0 || bins > stft.bins() {
            return Err(Error::invalid(format!(
                "training set needs sources and 1..={} bins, got {} sources and {bins} bins",
                stft.bins(),
                sources.len()
            )));
        }
        Ok(TrainingSet {
            sources,
            bins,
            stft,
            sample_rate: None,
            scenes: Vec::new(),
        })
    }

    pub fn from_synthetic(scenes: &[SyntheticScene], bins: usize, stft: StftConfig) -> Result<Self> {
        let sources = scenes
            .first()
            .map(|s| s.stems.iter().map(|(n, _)| n.clone()).collect())
            .unwrap_or_default();
        let mut set = TrainingSet::new(sources, bins, stft)?;
        for s in scenes {
            set.push_scene(&s.name, &s.stems)?;
        }
        Ok(set)
    }

    /// Add a scene; every source of the set must be among `stems`.
    pub fn push_scene(&mut self, name: &str, stems: &[(String, AudioClip)]) -> Result<()> {
        let mut planes = Vec::with_capacity(self.sources.len());
        let mut frames = None;
        for src in &self.sources {
            let clip = stems
                .iter()
                .find(|(n, _)| n == src)
                .map(|(_, c)| c)
                .ok_or_else(|| Error::invalid(format!("scene '{name}' has no '{src}' stem")))?;
            if clip.num_channels() != 2 {
                return Err(Error::ChannelMismatch {
                    op: "training stem",
                    expected: 2,
                    actual: clip.num_channels(),
                });
            }
            match self.sample_rate {
                Some(sr) if sr != clip.sample_rate => {
                    return Err(Error::Audio(format!(
                        "scene '{name}' is at {} Hz, the set at {sr} Hz",
                        clip.sample_rate
                    )))
                }
                _ => self.sample_rate = Some(clip.sample_rate),
            }
            let spec = stft(clip, self.stft)?;
            if *frames.get_or_insert(spec.frames) != spec.frames {
                return Err(Error::invalid(format!("stems of scene '{name}' differ in length")));
            }
            let mut plane = Vec::with_capacity(2 * spec.frames * self.bins);
            for c in 0..2 {
                for t in 0..spec.frames {
                    let k = spec.index(c, t, 0);
                    plane.extend_from_slice(&spec.data[k..k + self.bins]);
                }
            }
            planes.push(plane);
        }
        self.scenes.push(SpectralScene {
            name: name.to_string(),
            frames: frames.unwrap_or(0),
            stems: planes,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn scene_names(&self) -> impl Iterator<Item = &str> {
        self.scenes.iter().map(|s| s.name.as_str())
    }

    pub fn source_index(&self, source: &str) -> Result<usize> {
        self.sources
            .iter()
            .position(|s| s == source)
            .ok_or_else(|| Error::invalid(format!("unknown source '{source}' (have {:?})", self.sources)))
    }

    /// Mixture and target magnitudes, both `[batch, 2, patch, bins]`.
    fn assemble(&self, target: usize, draws: &[Vec<Draw>], patch: usize) -> (Tensor, Tensor) {
        let (f_n, b_n) = (self.bins, draws.len());
        let shape = [b_n, 2, patch, f_n];
        let mut mix = vec![0.0; b_n * 2 * patch * f_n];
        let mut tgt = vec![0.0; mix.len()];
        let mut acc = vec![Complex64::new(0.0, 0.0); f_n];
        for (b, stems) in draws.iter().enumerate() {
            for c in 0..2 {
                for t in 0..patch {
                    acc.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
                    let out = ((b * 2 + c) * patch + t) * f_n;
                    for (j, d) in stems.iter().enumerate() {
                        let sc = &self.scenes[d.scene];
                        let row = (d.aug.source_channel(c) * sc.frames + d.offset + t) * f_n;
                        let src = &sc.stems[j][row..row + f_n];
                        for (f, (a, z)) in acc.iter_mut().zip(src).enumerate() {
                            let v = d.aug.scale(*z);
                            *a += v;
                            if j == target {
                                tgt[out + f] = v.norm();
                            }
                        }
                    }
                    for (m, a) in mix[out..out + f_n].iter_mut().zip(&acc) {
                        *m = a.norm();
                    }
                }
            }
        }
        (
            Tensor::new(&shape, mix).expect("sized above"),
            Tensor::new(&shape, tgt).expect("sized above"),
        )
    }

    /// Batches for one epoch, in a seed-determined order.
    fn epoch_draws(&self, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<Draw>>> {
        let mut base: Vec<usize> = (0..self.scenes.len())
            .flat_map(|s| std::iter::repeat_n(s, cfg.patches_per_scene))
            .collect();
        base.shuffle(rng);
        let offset =
            |rng: &mut ChaCha8Rng, scene: usize| rng.gen_range(0..=self.scenes[scene].frames - cfg.patch_frames);
        base.chunks(cfg.batch_size)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&s| {
                        if cfg.augment {
                            (0..self.sources.len())
                                .map(|_| {
                                    let scene = *chunk.choose(rng).expect("non-empty chunk");
                                    Draw {
                                        scene,
                                        offset: offset(rng, scene),
                                        aug: StemAugment::sample(rng),
                                    }
                                })
                                .collect()
                        } else {
                            let o = offset(rng, s);
                            vec![
                                Draw {
                                    scene: s,
                                    offset: o,
                                    aug: StemAugment::IDENTITY,
                                };
                                self.sources.len()
                            ]
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 0-based.
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub source: String,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,lr,mean_loss,steps";

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            s += &format!("{},{},{:.12e},{}\n", e.epoch, e.lr, e.mean_loss, e.steps);
        }
        s
    }
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(model: &mut Model, adam: &mut AdamState, input: Tensor, target: Tensor, lr: f64) -> Result<f64> {
    let tape = Tape::new();
    let (loss, grads, updates) = {
        let fw = Forward::new(&tape, model.store(), Mode::Train);
        let y = model.forward(&fw, &Var::constant(input))?;
        let loss = mse_loss(&tape, &y, &Var::constant(target))?;
        let value = loss.value().item();
        if !value.is_finite() || value > DIVERGENCE_LOSS {
            return Err(Error::Divergence(format!(
                "batch loss {value} at optimizer step {}",
                adam.step + 1
            )));
        }
        let grads = tape.backward(&loss)?;
        let pg = fw.param_grads(&grads);
        (value, pg, fw.into_updates())
    };
    adam.update(model.store_mut(), &grads, lr)
        .map_err(|e| Error::Divergence(e.to_string()))?;
    model.store_mut().apply_stat_updates(updates);
    Ok(loss)
}

/// Train `model` to estimate `source` magnitudes and record the run in
/// `model.meta`. `on_epoch` sees each epoch's statistics as they finish.
pub fn train(
    model: &mut Model,
    data: &TrainingSet,
    source: &str,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    let target = data.source_index(source)?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(short) = data.scenes.iter().find(|s| s.frames < cfg.patch_frames) {
        return Err(Error::invalid(format!(
            "scene '{}' has {} frames, fewer than the patch length {}",
            short.name, short.frames, cfg.patch_frames
        )));
    }
    let (_, hi) = model.modeled_range();
    if data.bins < hi {
        return Err(Error::invalid(format!(
            "training set keeps {} bins but the network models up to bin {hi}",
            data.bins
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x74_7261_696e);
    let mut adam = AdamState::new(model.store(), AdamConfig::default());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let batches = data.epoch_draws(cfg, &mut rng);
        let mut total = 0.0;
        for draws in &batches {
            let (x, y) = data.assemble(target, draws, cfg.patch_frames);
            total += train_step(model, &mut adam, x, y, lr)
                .map_err(|e| Error::Divergence(format!("{source}, epoch {epoch}: {e}")))?;
        }
        let stats = EpochStats {
            epoch,
            lr,
            mean_loss: total / batches.len() as f64,
            steps: batches.len(),
        };
        on_epoch(&stats);
        history.push(stats);
    }
    model.meta.epochs_trained += cfg.epochs;
    model.meta.patch_frames = Some(cfg.patch_frames);
    model.meta.source = Some(source.to_string());
    model.meta.sample_rate = data.sample_rate;
    Ok(TrainReport {
        source: source.to_string(),
        epochs: history,
    })
}
