use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform partition of a lon/lat bounding box into `rows × cols` cells and of
/// each hour into `segments` slots of `segment_minutes`.
///
/// Rows index longitude (`i`), columns index latitude (`j`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub rows: usize,
    pub cols: usize,
    pub segment_minutes: u32,
    pub segments: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lon_min: 121.14,
            lon_max: 121.37,
            lat_min: 31.20,
            lat_max: 31.24,
            rows: 16,
            cols: 16,
            segment_minutes: 10,
            segments: 6,
        }
    }
}

/// Cell coordinates within this many cell widths of an edge are snapped onto
/// the lattice before flooring, absorbing decimal-to-binary rounding of
/// boundary coordinates.
const SNAP: f64 = 1e-6;

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lon_min, self.lon_max, self.lat_min, self.lat_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.lon_max <= self.lon_min || self.lat_max <= self.lat_min {
            return Err(Error::InvalidConfig(format!(
                "grid box must satisfy lon_min < lon_max and lat_min < lat_max, got [{}, {}] × [{}, {}]",
                self.lon_min, self.lon_max, self.lat_min, self.lat_max
            )));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidConfig("grid.rows and grid.cols must be ≥ 1".into()));
        }
        if self.segments == 0 || self.segments as u32 * self.segment_minutes != 60 {
            return Err(Error::InvalidConfig(format!(
                "grid.segments × grid.segment_minutes must equal 60, got {} × {}",
                self.segments, self.segment_minutes
            )));
        }
        Ok(())
    }

    pub fn cell_width_lon(&self) -> f64 {
        (self.lon_max - self.lon_min) / self.rows as f64
    }

    pub fn cell_width_lat(&self) -> f64 {
        (self.lat_max - self.lat_min) / self.cols as f64
    }

    /// Grid cell of a coordinate. Points on or slightly beyond the upper edge
    /// clamp into the last cell; points more than one cell width outside the
    /// box, or non-finite, map to `None`.
    pub fn map_to_cell(&self, lon: f64, lat: f64) -> Option<(usize, usize)> {
        let i = axis_index(lon, self.lon_min, self.lon_max, self.rows)?;
        let j = axis_index(lat, self.lat_min, self.lat_max, self.cols)?;
        Some((i, j))
    }

    /// Segment of a minute within its hour.
    pub fn segment_of(&self, minute: u32) -> usize {
        ((minute / self.segment_minutes) as usize).min(self.segments - 1)
    }

    /// Lower-left corner of a cell.
    pub fn cell_origin(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.lon_min + i as f64 * self.cell_width_lon(),
            self.lat_min + j as f64 * self.cell_width_lat(),
        )
    }
}

fn axis_index(value: f64, min: f64, max: f64, cells: usize) -> Option<usize> {
    if !value.is_finite() {
        return None;
    }
    let pos = (value - min) / (max - min) * cells as f64;
    if pos < -1.0 || pos > cells as f64 + 1.0 {
        return None;
    }
    let idx = (pos + SNAP).floor().max(0.0) as usize;
    Some(idx.min(cells - 1))
}
