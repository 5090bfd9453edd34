use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{NetworkConfig, Scaling, TrainConfig};
use super::model::FmE3dclNet;
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, Optimizer, Tensor};

/// Per-channel divisors applied to demand before it enters the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub factors: Vec<f64>,
}

impl Scaler {
    pub fn identity(channels: usize) -> Self {
        Scaler {
            factors: vec![1.0; channels],
        }
    }

    /// Channel maxima over the inputs and targets of `samples`; empty
    /// channels keep a divisor of 1.
    pub fn channel_max(samples: &[WindowSample], channels: usize) -> Self {
        let mut factors = vec![0.0f64; channels];
        for s in samples {
            for t in [&s.demand, &s.truth] {
                for (k, &v) in t.data().iter().enumerate() {
                    let c = k % channels;
                    factors[c] = factors[c].max(v);
                }
            }
        }
        for f in &mut factors {
            if *f <= 0.0 {
                *f = 1.0;
            }
        }
        Scaler { factors }
    }

    pub fn fit(scaling: Scaling, samples: &[WindowSample], channels: usize) -> Self {
        match scaling {
            Scaling::Raw => Self::identity(channels),
            Scaling::ChannelMax => Self::channel_max(samples, channels),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.factors.iter().all(|&f| f == 1.0)
    }

    fn apply(&self, t: &Tensor, inverse: bool) -> Tensor {
        if self.is_identity() {
            return t.clone();
        }
        let c = self.factors.len();
        let mut out = t.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let f = self.factors[k % c];
            *v = if inverse { *v * f } else { *v / f };
        }
        out
    }

    pub fn scale(&self, t: &Tensor) -> Tensor {
        self.apply(t, false)
    }

    pub fn unscale(&self, t: &Tensor) -> Tensor {
        self.apply(t, true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained network.
    pub epoch: usize,
    /// Mean per-sample loss on the (scaled) training windows during the epoch.
    pub train_loss: f64,
    /// Validation RMSE in counts, predictions clipped at zero.
    pub val_rmse: f64,
}

/// A network together with the scaling its inputs expect.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub net: FmE3dclNet,
    pub scaler: Scaler,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

const MODEL_FILE: &str = "model.json";
const SCALING_FILE: &str = "scaling.json";
const HISTORY_FILE: &str = "history.json";
const NETWORK_FILE: &str = "network.json";

impl TrainedModel {
    pub fn untrained(net: FmE3dclNet) -> Self {
        let channels = net.config().channels;
        TrainedModel {
            net,
            scaler: Scaler::identity(channels),
            history: Vec::new(),
            best_epoch: 0,
        }
    }

    /// Raw-count prediction `[N, I, J, C]` for one window, not clipped.
    pub fn predict_window(&self, sample: &WindowSample) -> Result<Tensor> {
        let (demand, externals) = network_inputs(&self.scaler, sample)?;
        let out = self.net.predict(&demand, &externals)?;
        let cube = out.reshape(sample.truth.dims().to_vec())?;
        Ok(self.scaler.unscale(&cube))
    }

    pub fn predict_all(&self, samples: &[WindowSample]) -> Result<Vec<Tensor>> {
        samples.iter().map(|s| self.predict_window(s)).collect()
    }

    /// Writes the network config, parameter checkpoint, scaling and history
    /// into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(NETWORK_FILE), self.net.config())?;
        save_checkpoint(self.net.params(), &dir.join(MODEL_FILE))?;
        write_json(&dir.join(SCALING_FILE), &self.scaler)?;
        write_json(&dir.join(HISTORY_FILE), &self.history)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: NetworkConfig = read_json(&dir.join(NETWORK_FILE))?;
        let params = load_checkpoint(&dir.join(MODEL_FILE))?;
        let net = FmE3dclNet::from_params(config, &params)?;
        let scaler: Scaler = read_json(&dir.join(SCALING_FILE))?;
        if scaler.factors.len() != net.config().channels {
            return Err(Error::Format(format!(
                "{} holds {} channel factors for a {}-channel network",
                SCALING_FILE,
                scaler.factors.len(),
                net.config().channels
            )));
        }
        let history: Vec<EpochRecord> = match dir.join(HISTORY_FILE) {
            p if p.exists() => read_json(&p)?,
            _ => Vec::new(),
        };
        let best_epoch = best_record(&history).map_or(0, |r| r.epoch);
        Ok(TrainedModel {
            net,
            scaler,
            history,
            best_epoch,
        })
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn best_record(history: &[EpochRecord]) -> Option<&EpochRecord> {
    history
        .iter()
        .min_by(|a, b| a.val_rmse.total_cmp(&b.val_rmse))
}

/// `[1, d, N, I, J, C]` demand and `[1, 9]` externals for one window.
fn network_inputs(scaler: &Scaler, sample: &WindowSample) -> Result<(Tensor, Tensor)> {
    let mut dims = vec![1];
    dims.extend_from_slice(sample.demand.dims());
    let demand = scaler.scale(&sample.demand).reshape(dims)?;
    let externals = sample.externals.clone().reshape(vec![1, sample.externals.len()])?;
    Ok((demand, externals))
}

/// RMSE over all windows with predictions clipped at zero.
fn clipped_rmse(model: &TrainedModel, samples: &[WindowSample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        let pred = model.predict_window(s)?;
        for (p, y) in pred.data().iter().zip(s.truth.data()) {
            sum += (p.max(0.0) - y).powi(2);
        }
        n += s.truth.len();
    }
    Ok((sum / n as f64).sqrt())
}

fn sample_loss(net: &FmE3dclNet, scaler: &Scaler, sample: &WindowSample, record: bool) -> Result<(f64, Option<crate::tensor::Gradients>)> {
    let (demand, externals) = network_inputs(scaler, sample)?;
    let mut dims = vec![1];
    dims.extend_from_slice(sample.truth.dims());
    let truth = scaler.scale(&sample.truth).reshape(dims)?;
    let mut g = if record {
        Graph::with_params(net.params())
    } else {
        Graph::inference(net.params())
    };
    let d = g.constant(demand);
    let e = g.constant(externals);
    let y = g.constant(truth);
    let out = net.forward(&mut g, d, e)?;
    let loss = g.mse(out.prediction, y)?;
    let value = g.value(loss).item().expect("scalar loss");
    let grads = if record { Some(g.backward(loss)?) } else { None };
    Ok((value, grads))
}

/// Seeded shuffled mini-batch training with early stopping on validation
/// RMSE. Returns the parameters of the best validation epoch.
pub fn train(
    config: &NetworkConfig,
    train_cfg: &TrainConfig,
    train_set: &[WindowSample],
    validation: &[WindowSample],
) -> Result<TrainedModel> {
    config.validate()?;
    train_cfg.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let net = FmE3dclNet::new(config.clone(), train_cfg.seed)?;
    let scaler = Scaler::fit(train_cfg.scaling, train_set, config.channels);
    let mut model = TrainedModel {
        net,
        scaler,
        history: Vec::new(),
        best_epoch: 0,
    };

    let mut initial = 0.0;
    for s in train_set {
        initial += sample_loss(&model.net, &model.scaler, s, false)?.0;
    }
    let initial = initial / train_set.len() as f64;
    if !initial.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            value: initial,
        });
    }
    let mut best_rmse = clipped_rmse(&model, validation)?;
    model.history.push(EpochRecord {
        epoch: 0,
        train_loss: initial,
        val_rmse: best_rmse,
    });
    info!("epoch 0: train loss {initial:.6}, val rmse {best_rmse:.6}");
    let mut best_params = model.net.params().clone();

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    rng.set_stream(1);
    let mut optimizer = Optimizer::new(train_cfg.optimizer);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stale = 0usize;
    for epoch in 1..=train_cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(train_cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            for &k in batch {
                let (loss, grads) = sample_loss(&model.net, &model.scaler, &train_set[k], true)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        value: loss,
                    });
                }
                total += loss;
                model.net.params_mut().accumulate(&grads.expect("recorded"), scale)?;
            }
            optimizer.step(model.net.params_mut())?;
        }
        let train_loss = total / train_set.len() as f64;
        let val_rmse = clipped_rmse(&model, validation)?;
        model.history.push(EpochRecord {
            epoch,
            train_loss,
            val_rmse,
        });
        info!("epoch {epoch}: train loss {train_loss:.6}, val rmse {val_rmse:.6}");
        if val_rmse < best_rmse {
            best_rmse = val_rmse;
            best_params = model.net.params().clone();
            model.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale > train_cfg.patience {
                debug!("early stop after epoch {epoch}, best epoch {}", model.best_epoch);
                break;
            }
        }
    }
    model.net.params_mut().copy_values_from(&best_params)?;
    Ok(model)
}
