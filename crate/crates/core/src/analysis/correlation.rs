use std::io::Write;

use serde::{Deserialize, Serialize};

use super::metrics::pearson;
use crate::data::{DemandCube, CHANNELS};
use crate::error::{Error, Result};

/// Which neighbors stand at offset `k` from the center.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagonalMode {
    /// Mean over the in-bounds cells among `(i±k, j±k)`.
    #[default]
    Diagonal4,
    /// Only `(i+k, j+k)`.
    Literal,
}

/// `values[k][h]` for `k ∈ 0..=max_offset`, `h ∈ 0..=max_lag`. Row and
/// column 0 are diagnostics: `(0, 0)` correlates the center with itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationGrid {
    pub max_offset: usize,
    pub max_lag: usize,
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationGrid {
    pub fn get(&self, k: usize, h: usize) -> Option<f64> {
        self.values.get(k).and_then(|row| row.get(h)).copied().flatten()
    }

    /// `(k, k)` entries for `k ≥ 1` up to the smaller extent.
    pub fn diagonal(&self) -> Vec<Option<f64>> {
        (1..=self.max_offset.min(self.max_lag)).map(|k| self.get(k, k)).collect()
    }

    /// Long-format `k,h,value` rows; missing entries leave `value` empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["k", "h", "value"])?;
        for (k, row) in self.values.iter().enumerate() {
            for (h, v) in row.iter().enumerate() {
                let value = v.map(|x| x.to_string()).unwrap_or_default();
                w.write_record([k.to_string(), h.to_string(), value])?;
            }
        }
        w.flush().map_err(|e| Error::io("correlation csv", e))?;
        Ok(())
    }
}

/// Hourly series of one cell and channel, summed over segments.
pub fn hourly_series(cubes: &[DemandCube], i: usize, j: usize, channel: usize) -> Vec<f64> {
    cubes.iter().map(|c| c.cell_total(i, j, channel) as f64).collect()
}

/// Pearson correlation between the center series at `t` and each offset
/// cell's series at `t − h`.
pub fn lagged_correlation(
    cubes: &[DemandCube],
    center: (usize, usize),
    channel: usize,
    max_offset: usize,
    max_lag: usize,
    mode: DiagonalMode,
) -> Result<CorrelationGrid> {
    let first = cubes.first().ok_or(Error::EmptyDataset)?;
    let [_, rows, cols, _] = first.dims();
    if center.0 >= rows || center.1 >= cols || channel >= CHANNELS {
        return Err(Error::InvalidInput(format!(
            "center {center:?} / channel {channel} outside a {rows}×{cols}×{CHANNELS} grid"
        )));
    }
    if cubes.len() < max_lag + 2 {
        return Err(Error::InvalidInput(format!(
            "{} hours is too short for lag {max_lag}",
            cubes.len()
        )));
    }
    let y = hourly_series(cubes, center.0, center.1, channel);
    let directions: &[(isize, isize)] = match mode {
        DiagonalMode::Diagonal4 => &[(1, 1), (1, -1), (-1, 1), (-1, -1)],
        DiagonalMode::Literal => &[(1, 1)],
    };
    let mut values = Vec::with_capacity(max_offset + 1);
    for k in 0..=max_offset {
        let neighbors: Vec<Vec<f64>> = if k == 0 {
            vec![y.clone()]
        } else {
            directions
                .iter()
                .filter_map(|&(di, dj)| {
                    let i = center.0.checked_add_signed(di * k as isize).filter(|&i| i < rows)?;
                    let j = center.1.checked_add_signed(dj * k as isize).filter(|&j| j < cols)?;
                    Some(hourly_series(cubes, i, j, channel))
                })
                .collect()
        };
        let mut row = Vec::with_capacity(max_lag + 1);
        for h in 0..=max_lag {
            let mut sum = 0.0;
            let mut n = 0usize;
            for x in &neighbors {
                if let Some(r) = pearson(&y[h..], &x[..x.len() - h])? {
                    sum += r;
                    n += 1;
                }
            }
            row.push((n > 0).then(|| sum / n as f64));
        }
        values.push(row);
    }
    Ok(CorrelationGrid {
        max_offset,
        max_lag,
        values,
    })
}
