//! The fused forecasting network and its training loop.

mod config;
mod model;
mod train;

pub use config::{DecodeInput, NetworkConfig, Scaling, TrainConfig};
pub use model::{Activations, FmE3dclNet};
pub use train::{train, EpochRecord, Scaler, TrainedModel};
