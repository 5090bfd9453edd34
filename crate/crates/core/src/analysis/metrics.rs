use serde::{Deserialize, Serialize};

use crate::data::{CHANNELS, RENT, RETURN};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Error statistics over one set of paired values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    /// Mean of `|y − ŷ| / y` over elements with `y > 0`; missing when there are none.
    pub mape: Option<f64>,
    pub n: usize,
    /// Elements that entered the MAPE.
    pub n_mape: usize,
}

pub fn metrics(truth: &[f64], prediction: &[f64]) -> Result<Metrics> {
    if truth.len() != prediction.len() {
        return Err(Error::shape(
            "metrics",
            format!("{} truth values vs {} predictions", truth.len(), prediction.len()),
        ));
    }
    let mut acc = Accumulator::default();
    for (&y, &p) in truth.iter().zip(prediction) {
        acc.push(y, p);
    }
    acc.finish()
}

#[derive(Clone, Copy, Debug, Default)]
struct Accumulator {
    sq: f64,
    abs: f64,
    pct: f64,
    n: usize,
    n_mape: usize,
}

impl Accumulator {
    fn push(&mut self, y: f64, p: f64) {
        let e = (y - p).abs();
        self.sq += e * e;
        self.abs += e;
        self.n += 1;
        if y > 0.0 {
            self.pct += e / y;
            self.n_mape += 1;
        }
    }

    fn finish(self) -> Result<Metrics> {
        if self.n == 0 {
            return Err(Error::EmptyDataset);
        }
        let n = self.n as f64;
        Ok(Metrics {
            rmse: (self.sq / n).sqrt(),
            mae: self.abs / n,
            mape: (self.n_mape > 0).then(|| self.pct / self.n_mape as f64),
            n: self.n,
            n_mape: self.n_mape,
        })
    }
}

/// Per-channel and pooled metrics over demand-shaped tensors whose last axis
/// is the rent/return channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rent: Metrics,
    #[serde(rename = "return")]
    pub ret: Metrics,
    pub all: Metrics,
}

impl MetricReport {
    pub fn channel(&self, channel: usize) -> &Metrics {
        if channel == RENT {
            &self.rent
        } else {
            &self.ret
        }
    }
}

pub fn metric_report(truth: &[Tensor], prediction: &[Tensor]) -> Result<MetricReport> {
    if truth.len() != prediction.len() {
        return Err(Error::InvalidInput(format!(
            "{} truth cubes vs {} predictions",
            truth.len(),
            prediction.len()
        )));
    }
    let mut per = [Accumulator::default(); CHANNELS];
    let mut all = Accumulator::default();
    for (y, p) in truth.iter().zip(prediction) {
        if y.shape() != p.shape() || y.dims().last() != Some(&CHANNELS) {
            return Err(Error::shape(
                "metric_report",
                format!("truth {} vs prediction {}", y.shape(), p.shape()),
            ));
        }
        for (k, (&a, &b)) in y.data().iter().zip(p.data()).enumerate() {
            per[k % CHANNELS].push(a, b);
            all.push(a, b);
        }
    }
    Ok(MetricReport {
        rent: per[RENT].finish()?,
        ret: per[RETURN].finish()?,
        all: all.finish()?,
    })
}

/// Product-moment correlation; missing when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "pearson needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("pearson needs at least 2 points".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_truth_excluded_from_mape() {
        let m = metrics(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!((m.rmse, m.mae, m.mape, m.n_mape), (1.0, 1.0, None, 0));
        let m = metrics(&[2.0, 0.0], &[1.0, 5.0]).unwrap();
        assert_eq!(m.mape, Some(0.5));
        assert_eq!(m.n_mape, 1);
    }

    #[test]
    fn perfect_prediction() {
        let m = metrics(&[1.0, 3.0], &[1.0, 3.0]).unwrap();
        assert_eq!((m.rmse, m.mae, m.mape), (0.0, 0.0, Some(0.0)));
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn pearson_cases() {
        let r = |x: &[f64], y: &[f64]| pearson(x, y).unwrap().unwrap();
        assert!((r(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
        assert!((r(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]) + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), None);
        assert!(pearson(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn report_splits_channels() {
        let y = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let p = Tensor::from_vec(vec![1, 2], vec![1.0, 4.0]).unwrap();
        let r = metric_report(&[y], &[p]).unwrap();
        assert_eq!(r.rent.rmse, 0.0);
        assert_eq!(r.ret.rmse, 2.0);
        assert_eq!(r.all.rmse, 2f64.sqrt());
    }
}
