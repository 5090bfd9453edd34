use serde::{Deserialize, Serialize};

use crate::cell::MemoryFlow;
use crate::data::EXTERNAL_DIM;
use crate::error::{Error, Result};
use crate::tensor::OptimizerConfig;

/// What the decoder reads from the recurrent stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeInput {
    /// Only the last time step's output block.
    #[default]
    LastStep,
    /// Every step's output block, concatenated along channels.
    AllSteps,
}

/// Demand scaling applied before the network sees it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    #[default]
    Raw,
    /// Divide each channel by its training-split maximum; predictions are
    /// multiplied back.
    ChannelMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Look-back window `d` in hours.
    pub lookback: usize,
    pub segments: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub encoder_layers: usize,
    pub e3d_layers: usize,
    pub decoder_layers: usize,
    pub fc_layers: usize,
    pub fusion_layers: usize,
    pub filters: usize,
    pub kernel: [usize; 3],
    pub fc_width: usize,
    pub fusion_width: usize,
    /// Retained temporal memories; defaults to the look-back window.
    pub tau: Option<usize>,
    pub memory_flow: MemoryFlow,
    pub decode_input: DecodeInput,
    /// When false the external-factor branch receives zeros (demand-only model).
    pub use_externals: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            lookback: 6,
            segments: 6,
            rows: 16,
            cols: 16,
            channels: 2,
            encoder_layers: 2,
            e3d_layers: 2,
            decoder_layers: 2,
            fc_layers: 1,
            fusion_layers: 3,
            filters: 32,
            kernel: [3, 3, 3],
            fc_width: 32,
            fusion_width: 256,
            tau: None,
            memory_flow: MemoryFlow::PerLayer,
            decode_input: DecodeInput::LastStep,
            use_externals: true,
        }
    }
}

impl NetworkConfig {
    pub fn tau(&self) -> usize {
        self.tau.unwrap_or(self.lookback)
    }

    /// `[segments, rows, cols, channels]` of one demand cube.
    pub fn cube_dims(&self) -> [usize; 4] {
        [self.segments, self.rows, self.cols, self.channels]
    }

    pub fn cube_len(&self) -> usize {
        self.cube_dims().iter().product()
    }

    pub fn external_dim(&self) -> usize {
        EXTERNAL_DIM
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("lookback", self.lookback),
            ("segments", self.segments),
            ("rows", self.rows),
            ("cols", self.cols),
            ("channels", self.channels),
            ("encoder_layers", self.encoder_layers),
            ("e3d_layers", self.e3d_layers),
            ("decoder_layers", self.decoder_layers),
            ("fc_layers", self.fc_layers),
            ("fusion_layers", self.fusion_layers),
            ("filters", self.filters),
            ("fc_width", self.fc_width),
            ("fusion_width", self.fusion_width),
            ("tau", self.tau()),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("network.{name} must be ≥ 1")));
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::InvalidConfig(format!(
                "network.kernel extents must be odd, got {:?}",
                self.kernel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub scaling: Scaling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            scaling: Scaling::Raw,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("train.batch_size must be ≥ 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("train.max_epochs must be ≥ 1".into()));
        }
        self.optimizer.validate()
    }
}
