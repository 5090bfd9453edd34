//! End-to-end fitting and evaluation of the network, the baselines and the
//! ensemble on one chronologically split corpus, plus hyperparameter sweeps.

use std::io::Write;

use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::{metric_report, MetricReport};
use crate::baselines::{ensemble_fit, ma_predict, Ensemble, HaModel, MA_WINDOW};
use crate::data::{Corpus, DemandCube, SplitBoundaries, Splits, WindowSample};
use crate::error::{Error, Result};
use crate::net::{train, NetworkConfig, TrainConfig, TrainedModel};
use crate::tensor::Tensor;

/// A corpus and its chronological split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub corpus: Corpus,
    pub splits: Splits,
}

impl Dataset {
    /// Splits by date; every split must fit at least one `lookback` window.
    pub fn new(corpus: Corpus, boundaries: &SplitBoundaries, lookback: usize) -> Result<Self> {
        let splits = crate::data::split_by_date(&corpus.hours(), boundaries, lookback + 1)?;
        Ok(Dataset { corpus, splits })
    }

    pub fn train_windows(&self, lookback: usize) -> Result<Vec<WindowSample>> {
        self.corpus.windows(self.splits.train.clone(), lookback)
    }

    pub fn validation_windows(&self, lookback: usize) -> Result<Vec<WindowSample>> {
        self.corpus.windows(self.splits.validation.clone(), lookback)
    }

    /// Test windows whose target index is at least `first_target`.
    pub fn test_windows(&self, lookback: usize, first_target: usize) -> Result<Vec<WindowSample>> {
        let mut w = self.corpus.windows(self.splits.test.clone(), lookback)?;
        w.retain(|s| s.target >= first_target);
        Ok(w)
    }

    pub fn train_cubes(&self) -> &[DemandCube] {
        &self.corpus.cubes[self.splits.train.clone()]
    }
}

/// Everything needed to produce all four forecasts.
#[derive(Clone, Debug)]
pub struct FittedModels {
    pub model: TrainedModel,
    pub ha: HaModel,
    pub ensemble: Ensemble,
}

fn clip(t: Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

/// Network predictions clipped at zero.
pub fn network_predictions(model: &TrainedModel, windows: &[WindowSample]) -> Result<Vec<Tensor>> {
    windows.iter().map(|w| model.predict_window(w).map(clip)).collect()
}

pub fn ha_predictions(ha: &HaModel, corpus: &Corpus, windows: &[WindowSample]) -> Vec<Tensor> {
    windows.iter().map(|w| ha.predict(&corpus.cubes[w.target].hour)).collect()
}

/// Moving average of the hours just before each target, which may precede the
/// split the target belongs to.
pub fn ma_predictions(corpus: &Corpus, windows: &[WindowSample]) -> Result<Vec<Tensor>> {
    windows
        .iter()
        .map(|w| {
            if w.target < MA_WINDOW {
                return Err(Error::InvalidInput(format!(
                    "hour index {} has fewer than {MA_WINDOW} prior hours",
                    w.target
                )));
            }
            let history: Vec<Tensor> = corpus.cubes[w.target - MA_WINDOW..w.target]
                .iter()
                .map(DemandCube::to_tensor)
                .collect();
            ma_predict(&history.iter().collect::<Vec<_>>())
        })
        .collect()
}

/// Least-squares weights of (clipped network, HA) on the validation windows.
pub fn fit_ensemble(model: &TrainedModel, ha: &HaModel, data: &Dataset) -> Result<Ensemble> {
    let windows = data.validation_windows(model.net.config().lookback)?;
    let net = network_predictions(model, &windows)?;
    let hist = ha_predictions(ha, &data.corpus, &windows);
    let truth: Vec<Tensor> = windows.into_iter().map(|w| w.truth).collect();
    ensemble_fit(&net, &hist, &truth)
}

/// Trains the network, fits HA on the training hours and the ensemble on the
/// validation windows.
pub fn fit_all(
    data: &Dataset,
    network: &NetworkConfig,
    train_cfg: &TrainConfig,
    ha_by_day_type: bool,
) -> Result<FittedModels> {
    let train_set = data.train_windows(network.lookback)?;
    let validation = data.validation_windows(network.lookback)?;
    info!(
        "training on {} windows, validating on {}",
        train_set.len(),
        validation.len()
    );
    let model = train(network, train_cfg, &train_set, &validation)?;
    let ha = HaModel::fit(data.train_cubes(), ha_by_day_type)?;
    let ensemble = fit_ensemble(&model, &ha, data)?;
    info!("ensemble weights: network {:.4}, HA {:.4}", ensemble.w1, ensemble.w2);
    Ok(FittedModels { model, ha, ensemble })
}

/// Test-split metrics of all four forecasts over the same target hours.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub targets: usize,
    pub network: MetricReport,
    pub ha: MetricReport,
    pub ma: MetricReport,
    pub ensemble: MetricReport,
    pub weights: Ensemble,
}

pub fn evaluate(models: &FittedModels, data: &Dataset) -> Result<Evaluation> {
    let lookback = models.model.net.config().lookback;
    let windows = data.test_windows(lookback, 0)?;
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let truth: Vec<Tensor> = windows.iter().map(|w| w.truth.clone()).collect();
    let net = network_predictions(&models.model, &windows)?;
    let ha = ha_predictions(&models.ha, &data.corpus, &windows);
    let ma = ma_predictions(&data.corpus, &windows)?;
    let ens = net
        .iter()
        .zip(&ha)
        .map(|(a, b)| models.ensemble.predict(a, b).map(clip))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        targets: windows.len(),
        network: metric_report(&truth, &net)?,
        ha: metric_report(&truth, &ha)?,
        ma: metric_report(&truth, &ma)?,
        ensemble: metric_report(&truth, &ens)?,
        weights: models.ensemble,
    })
}

/// Clipped network metrics on test windows with target index ≥ `first_target`.
pub fn evaluate_network(model: &TrainedModel, data: &Dataset, first_target: usize) -> Result<MetricReport> {
    let windows = data.test_windows(model.net.config().lookback, first_target)?;
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let net = network_predictions(model, &windows)?;
    let truth: Vec<Tensor> = windows.into_iter().map(|w| w.truth).collect();
    metric_report(&truth, &net)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lookback,
    /// Recurrent layers only.
    Layers,
    Filters,
    /// Encoder, recurrent and decoder layers together, split evenly.
    TotalLayers,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lookback => "lookback",
            SweepAxis::Layers => "layers",
            SweepAxis::Filters => "filters",
            SweepAxis::TotalLayers => "total_layers",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &NetworkConfig, value: usize) -> Result<NetworkConfig> {
        let mut c = base.clone();
        match self {
            SweepAxis::Lookback => c.lookback = value,
            SweepAxis::Layers => c.e3d_layers = value,
            SweepAxis::Filters => c.filters = value,
            SweepAxis::TotalLayers => {
                if value == 0 || value % 3 != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "total_layers sweep values must be positive multiples of 3, got {value}"
                    )));
                }
                c.encoder_layers = value / 3;
                c.e3d_layers = value / 3;
                c.decoder_layers = value / 3;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::Lookback, SweepAxis::Layers, SweepAxis::Filters, SweepAxis::TotalLayers]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown sweep axis `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: usize,
    pub rmse_rent: f64,
    pub rmse_return: f64,
}

/// Trains one model per value, all from the same seed, and scores each on the
/// test targets reachable by the longest look-back in the sweep.
pub fn sweep(
    data: &Dataset,
    base: &NetworkConfig,
    train_cfg: &TrainConfig,
    axis: SweepAxis,
    values: &[usize],
) -> Result<Vec<SweepRow>> {
    let configs = values
        .iter()
        .map(|&v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let longest = configs.iter().map(|c| c.lookback).max().ok_or(Error::EmptyDataset)?;
    let first_target = data.splits.test.start + longest;
    let mut rows = Vec::with_capacity(configs.len());
    for (config, &value) in configs.iter().zip(values) {
        info!("sweep {} = {value}", axis.name());
        let model = train(
            config,
            train_cfg,
            &data.train_windows(config.lookback)?,
            &data.validation_windows(config.lookback)?,
        )?;
        let report = evaluate_network(&model, data, first_target)?;
        rows.push(SweepRow {
            axis,
            value,
            rmse_rent: report.rent.rmse,
            rmse_return: report.ret.rmse,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["axis", "value", "rmse_rent", "rmse_return"])?;
    for r in rows {
        w.write_record([
            r.axis.name().to_string(),
            r.value.to_string(),
            r.rmse_rent.to_string(),
            r.rmse_return.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("sweep csv", e))?;
    Ok(())
}
