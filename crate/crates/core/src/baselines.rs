//! Historical-average and moving-average baselines, and the two-model
//! least-squares ensemble.

use std::collections::BTreeMap;

use chrono::{NaiveDateTime, Timelike};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{DayType, DemandCube};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hours averaged by the moving-average baseline.
pub const MA_WINDOW: usize = 6;

#[derive(Clone, Debug, Default)]
struct Bucket {
    sum: Vec<f64>,
    count: usize,
}

impl Bucket {
    fn add(&mut self, cube: &DemandCube) {
        if self.sum.is_empty() {
            self.sum = vec![0.0; cube.counts().len()];
        }
        for (s, &c) in self.sum.iter_mut().zip(cube.counts()) {
            *s += f64::from(c);
        }
        self.count += 1;
    }

    fn mean(&self) -> Option<Vec<f64>> {
        (self.count > 0).then(|| self.sum.iter().map(|s| s / self.count as f64).collect())
    }
}

/// Per-bucket mean training cube, keyed by day type and hour of day, with an
/// hour-of-day fallback.
#[derive(Clone, Debug)]
pub struct HaModel {
    dims: [usize; 4],
    by_day_type: bool,
    buckets: BTreeMap<(DayType, u32), Bucket>,
    by_hour: BTreeMap<u32, Bucket>,
}

impl HaModel {
    /// `by_day_type = false` averages over all days at the same hour.
    pub fn fit(train: &[DemandCube], by_day_type: bool) -> Result<Self> {
        let first = train.first().ok_or(Error::EmptyDataset)?;
        let dims = first.dims();
        let mut model = HaModel {
            dims,
            by_day_type,
            buckets: BTreeMap::new(),
            by_hour: BTreeMap::new(),
        };
        for cube in train {
            if cube.dims() != dims {
                return Err(Error::shape(
                    "ha_fit",
                    format!("cube {:?} differs from {:?}", cube.dims(), dims),
                ));
            }
            let hour = cube.hour.hour();
            model
                .buckets
                .entry((DayType::of(cube.hour.date()), hour))
                .or_default()
                .add(cube);
            model.by_hour.entry(hour).or_default().add(cube);
        }
        Ok(model)
    }

    /// `[N, I, J, C]` prediction for the cube starting at `hour`.
    pub fn predict(&self, hour: &NaiveDateTime) -> Tensor {
        let h = hour.hour();
        let primary = if self.by_day_type {
            self.buckets
                .get(&(DayType::of(hour.date()), h))
                .and_then(Bucket::mean)
        } else {
            None
        };
        let data = primary
            .or_else(|| self.by_hour.get(&h).and_then(Bucket::mean))
            .unwrap_or_else(|| vec![0.0; self.dims.iter().product()]);
        Tensor::from_vec(self.dims.to_vec(), data).expect("bucket length matches dims")
    }
}

/// Element-wise mean of exactly [`MA_WINDOW`] preceding cubes.
pub fn ma_predict(history: &[&Tensor]) -> Result<Tensor> {
    if history.len() != MA_WINDOW {
        return Err(Error::InvalidInput(format!(
            "moving average needs exactly {MA_WINDOW} prior hours, got {}",
            history.len()
        )));
    }
    let mut out = history[0].clone();
    for t in &history[1..] {
        out.axpy(1.0, t)?;
    }
    Ok(out.map(|v| v / MA_WINDOW as f64))
}

/// `P = w1·P1 + w2·P2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub w1: f64,
    pub w2: f64,
    /// RMSE of the fitted combination on the data it was fitted to.
    pub fit_rmse: f64,
}

impl Ensemble {
    pub fn predict(&self, p1: &Tensor, p2: &Tensor) -> Result<Tensor> {
        if p1.shape() != p2.shape() {
            return Err(Error::shape(
                "ensemble_predict",
                format!("{} vs {}", p1.shape(), p2.shape()),
            ));
        }
        let data = p1
            .data()
            .iter()
            .zip(p2.data())
            .map(|(a, b)| self.w1 * a + self.w2 * b)
            .collect();
        Tensor::from_vec(p1.dims().to_vec(), data)
    }
}

/// Unconstrained least squares (no intercept) over every element of the
/// paired collections. A (near-)singular system falls back to equal weights.
pub fn ensemble_fit(p1: &[Tensor], p2: &[Tensor], truth: &[Tensor]) -> Result<Ensemble> {
    if p1.len() != truth.len() || p2.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "ensemble fit needs paired collections, got {}, {} and {}",
            p1.len(),
            p2.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut s11, mut s12, mut s22, mut s1y, mut s2y) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((a, b), y) in p1.iter().zip(p2).zip(truth) {
        if a.shape() != y.shape() || b.shape() != y.shape() {
            return Err(Error::shape(
                "ensemble_fit",
                format!("{} / {} vs truth {}", a.shape(), b.shape(), y.shape()),
            ));
        }
        for ((&x1, &x2), &t) in a.data().iter().zip(b.data()).zip(y.data()) {
            s11 += x1 * x1;
            s12 += x1 * x2;
            s22 += x2 * x2;
            s1y += x1 * t;
            s2y += x2 * t;
        }
    }
    let det = s11 * s22 - s12 * s12;
    let (w1, w2) = if det.abs() <= 1e-12 * (s11 * s22).max(f64::MIN_POSITIVE) {
        warn!("ensemble predictors are collinear; using equal weights");
        (0.5, 0.5)
    } else {
        ((s22 * s1y - s12 * s2y) / det, (s11 * s2y - s12 * s1y) / det)
    };
    let mut ensemble = Ensemble {
        w1,
        w2,
        fit_rmse: 0.0,
    };
    let (mut sq, mut n) = (0.0, 0usize);
    for ((a, b), y) in p1.iter().zip(p2).zip(truth) {
        let p = ensemble.predict(a, b)?;
        sq += p.data().iter().zip(y.data()).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
        n += y.len();
    }
    ensemble.fit_rmse = (sq / n as f64).sqrt();
    Ok(ensemble)
}
