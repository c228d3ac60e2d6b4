//! Training, Wiener-filter inference and evaluation for per-source networks.

pub mod adam;
pub mod augment;
pub mod experiment;
pub mod loss;
pub mod mwf;
pub mod pipeline;
pub mod sdr;
pub mod synth;
pub mod train;
pub mod weights;

pub use adam::{AdamConfig, AdamState};
pub use augment::{augment, StemAugment};
pub use experiment::{run_ablation, train_sources, AblationReport, AblationRow, SyntheticSplit, TrainedSource};
pub use loss::mse_loss;
pub use mwf::{mwf, MwfConfig};
pub use pipeline::{evaluate_dirs, evaluate_scenes, read_dataset, separate, EvalReport, EvalRow, SceneFiles};
pub use sdr::{median, sdr, window_sdrs, SDR_CAP_DB};
pub use synth::{synth_dataset, synth_range, synth_scene, SyntheticScene};
pub use train::{train, EpochStats, TrainConfig, TrainReport, TrainingSet};
pub use weights::{weight_norm_report, LayerSelector, NormRow, WeightNormReport};
