//! Station-free bike-sharing demand forecasting: trip records to gridded
//! demand tensors, an eidetic 3D-conv LSTM network with an external-factor
//! branch, statistical baselines, ensembling and evaluation.

pub mod analysis;
pub mod baselines;
pub mod cell;
pub mod data;
pub mod error;
pub mod experiment;
pub mod net;
pub mod tensor;

pub use error::{Error, Result};
