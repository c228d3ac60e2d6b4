//! Convolution, normalization and resampling primitives.

mod kernels;
pub mod modules;
pub mod ops;
pub mod params;

pub use modules::{BatchNorm, Conv2d, ConvGroup, MultiDilatedConv, TransposedConv2x2};
pub use ops::{Axis, BatchNormMode, BatchStats};
pub use params::{Forward, Mode, ParamEntry, ParamId, ParamKind, ParamStore, StatUpdate};
