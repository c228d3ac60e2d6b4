//! Dense blocks, the multiband network and its persistence.

pub mod builtin;
pub mod checkpoint;
pub mod config;
pub mod dense;
pub mod network;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use config::{
    BandConfig, BatchNormConfig, ConvConfig, D2BlockConfig, D3BlockConfig, DilationScheme, MergeConfig, NetworkConfig,
    Stage,
};
pub use dense::{channel_reduce, D2Block, D2Layer, D3Block};
pub use network::{BandStream, Model, ModelMeta, StageModule};

#[cfg(test)]
mod tests;
