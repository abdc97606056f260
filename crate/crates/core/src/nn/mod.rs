//! Toy-scale encoder-decoder segmentation network trained from scratch.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{BatchNormParams, BnMode, PoolIndices};
pub use network::{forward, NetworkConfig, NetworkParams, Sample};
pub use train::{segment, train, EpochStats, Example, TrainConfig, TrainOutcome};
