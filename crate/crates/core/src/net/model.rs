use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DecodeInput, NetworkConfig};
use crate::cell::{cell_step, CellConfig, CellParams, CellState, MemoryFlow};
use crate::error::{Error, Result};
use crate::tensor::{Conv3dSpec, Graph, ParamId, ParamSet, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Affine {
    weight: ParamId,
    bias: ParamId,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    /// Encoder output per look-back hour.
    pub encoded: Vec<Var>,
    /// Rectified top-layer hidden block per look-back hour.
    pub recurrent: Vec<Var>,
    /// Decoder output, `[B, N, I, J, C]`.
    pub decoded: Var,
    /// External-factor branch output, `[B, fc_width]`.
    pub external: Var,
    /// Fused prediction, `[B, N, I, J, C]`.
    pub prediction: Var,
}

/// 3D-conv encoder → stacked eidetic 3D LSTM → 3D-conv decoder, fused with a
/// dense branch over the external factors.
#[derive(Clone, Debug)]
pub struct FmE3dclNet {
    config: NetworkConfig,
    params: ParamSet,
    encoder: Vec<Affine>,
    cells: Vec<CellParams>,
    decoder: Vec<Affine>,
    fc: Vec<Affine>,
    fusion: Vec<Affine>,
}

impl FmE3dclNet {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, &mut rng)
    }

    /// Rebuilds a network around previously trained parameters.
    pub fn from_params(config: NetworkConfig, params: &ParamSet) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::InvalidInput(format!(
                "parameter set has {} tensors, the configured network has {}",
                params.len(),
                net.params.len()
            )));
        }
        net.params.copy_values_from(params)?;
        Ok(net)
    }

    fn build<R: Rng>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let [kd, kh, kw] = config.kernel;
        let taps = kd * kh * kw;
        let f = config.filters;

        let conv_layer = |params: &mut ParamSet, name: String, c_in: usize, c_out: usize, rng: &mut R| -> Result<Affine> {
            let fan_in = taps * c_in;
            Ok(Affine {
                weight: params.add_uniform(format!("{name}/kernel"), vec![kd, kh, kw, c_in, c_out], fan_in, rng)?,
                bias: params.add_uniform(format!("{name}/bias"), vec![c_out], fan_in, rng)?,
            })
        };
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            let c_in = if l == 0 { config.channels } else { f };
            encoder.push(conv_layer(&mut params, format!("encoder-{}", l + 1), c_in, f, rng)?);
        }

        let cell_cfg = cell_config(&config);
        let mut cells = Vec::with_capacity(config.e3d_layers);
        for l in 0..config.e3d_layers {
            cells.push(CellParams::init(&mut params, &format!("layer-{}/", l + 1), &cell_cfg, rng)?);
        }

        let decoder_in = match config.decode_input {
            DecodeInput::LastStep => f,
            DecodeInput::AllSteps => f * config.lookback,
        };
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for l in 0..config.decoder_layers {
            let c_in = if l == 0 { decoder_in } else { f };
            let c_out = if l + 1 == config.decoder_layers { config.channels } else { f };
            decoder.push(conv_layer(&mut params, format!("decoder-{}", l + 1), c_in, c_out, rng)?);
        }

        let dense = |params: &mut ParamSet, name: String, n_in: usize, n_out: usize, rng: &mut R| -> Result<Affine> {
            Ok(Affine {
                weight: params.add_uniform(format!("{name}/weight"), vec![n_in, n_out], n_in, rng)?,
                bias: params.add_uniform(format!("{name}/bias"), vec![n_out], n_in, rng)?,
            })
        };
        let mut fc = Vec::with_capacity(config.fc_layers);
        for l in 0..config.fc_layers {
            let n_in = if l == 0 { config.external_dim() } else { config.fc_width };
            fc.push(dense(&mut params, format!("fc-{}", l + 1), n_in, config.fc_width, rng)?);
        }
        let mut fusion = Vec::with_capacity(config.fusion_layers);
        for l in 0..config.fusion_layers {
            let n_in = if l == 0 {
                config.cube_len() + config.fc_width
            } else {
                config.fusion_width
            };
            let n_out = if l + 1 == config.fusion_layers {
                config.cube_len()
            } else {
                config.fusion_width
            };
            fusion.push(dense(&mut params, format!("fusion-{}", l + 1), n_in, n_out, rng)?);
        }

        Ok(FmE3dclNet {
            config,
            params,
            encoder,
            cells,
            decoder,
            fc,
            fusion,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn cell_config(&self) -> CellConfig {
        cell_config(&self.config)
    }

    pub fn cell_params(&self) -> &[CellParams] {
        &self.cells
    }

    /// Expected `[B, d, N, I, J, C]` demand and `[B, 9]` external shapes.
    pub fn input_dims(&self, batch: usize) -> (Vec<usize>, Vec<usize>) {
        let [n, i, j, c] = self.config.cube_dims();
        (
            vec![batch, self.config.lookback, n, i, j, c],
            vec![batch, self.config.external_dim()],
        )
    }

    /// Records the full forward pass on `g`, which must have been created
    /// over this network's parameters.
    pub fn forward(&self, g: &mut Graph<'_>, demand: Var, externals: Var) -> Result<Activations> {
        let batch = g.shape(demand).dims()[0];
        let (want_demand, want_ext) = self.input_dims(batch);
        if g.shape(demand).dims() != want_demand.as_slice() {
            return Err(Error::shape(
                "forward",
                format!("demand window {} does not match {want_demand:?}", g.shape(demand)),
            ));
        }
        if g.shape(externals).dims() != want_ext.as_slice() {
            return Err(Error::shape(
                "forward",
                format!("externals {} do not match {want_ext:?}", g.shape(externals)),
            ));
        }
        let cfg = &self.config;
        let [n, i, j, c] = cfg.cube_dims();
        let same = Conv3dSpec::same(cfg.kernel);

        let mut encoded = Vec::with_capacity(cfg.lookback);
        for s in 0..cfg.lookback {
            let hour = g.slice(demand, 1, s, 1)?;
            let mut x = g.reshape(hour, vec![batch, n, i, j, c])?;
            for layer in &self.encoder {
                let (w, b) = (g.param(layer.weight)?, g.param(layer.bias)?);
                let y = g.conv3d(x, w, Some(b), same)?;
                x = g.relu(y);
            }
            encoded.push(x);
        }

        let cell_cfg = self.cell_config();
        let mut states = Vec::with_capacity(self.cells.len());
        for _ in &self.cells {
            states.push(CellState::zeros(g, &cell_cfg, batch)?);
        }
        let mut recurrent = Vec::with_capacity(cfg.lookback);
        for &x in &encoded {
            let mut input = x;
            let mut carried = states.last().map(|s| s.memory);
            for (state, params) in states.iter_mut().zip(&self.cells) {
                if cfg.memory_flow == MemoryFlow::CrossLayer {
                    if let Some(m) = carried {
                        state.memory = m;
                    }
                }
                let step = cell_step(g, input, state, params, &cell_cfg)?;
                input = step.hidden;
                carried = Some(step.state.memory);
                *state = step.state;
            }
            recurrent.push(g.relu(input));
        }

        let mut x = match cfg.decode_input {
            DecodeInput::LastStep => *recurrent.last().expect("lookback ≥ 1"),
            DecodeInput::AllSteps => g.concat(&recurrent, 4)?,
        };
        for (l, layer) in self.decoder.iter().enumerate() {
            let (w, b) = (g.param(layer.weight)?, g.param(layer.bias)?);
            x = g.conv3d(x, w, Some(b), same)?;
            if l + 1 < self.decoder.len() {
                x = g.relu(x);
            }
        }
        let decoded = x;

        let mut v = if cfg.use_externals {
            externals
        } else {
            g.constant(Tensor::zeros(want_ext)?)
        };
        for layer in &self.fc {
            let (w, b) = (g.param(layer.weight)?, g.param(layer.bias)?);
            let y = g.matmul(v, w)?;
            let y = g.add_broadcast(y, b)?;
            v = g.relu(y);
        }
        let external = v;

        let flat = g.reshape(decoded, vec![batch, cfg.cube_len()])?;
        let mut z = g.concat(&[flat, external], 1)?;
        for (l, layer) in self.fusion.iter().enumerate() {
            let (w, b) = (g.param(layer.weight)?, g.param(layer.bias)?);
            let y = g.matmul(z, w)?;
            z = g.add_broadcast(y, b)?;
            if l + 1 < self.fusion.len() {
                z = g.relu(z);
            }
        }
        let prediction = g.reshape(z, vec![batch, n, i, j, c])?;

        Ok(Activations {
            encoded,
            recurrent,
            decoded,
            external,
            prediction,
        })
    }

    /// Forward pass without keeping anything for differentiation.
    pub fn predict(&self, demand: &Tensor, externals: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.params);
        let d = g.constant(demand.clone());
        let e = g.constant(externals.clone());
        let out = self.forward(&mut g, d, e)?;
        Ok(g.value(out.prediction).clone())
    }
}

fn cell_config(config: &NetworkConfig) -> CellConfig {
    CellConfig {
        tau: config.tau(),
        in_channels: config.filters,
        hidden_channels: config.filters,
        kernel: config.kernel,
        segment_shape: [config.segments, config.rows, config.cols],
    }
}
