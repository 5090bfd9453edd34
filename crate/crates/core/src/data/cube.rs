//! Hourly demand cubes and their on-disk archive.
//!
//! Archive layout: `<stem>.json` is an index
//! (`format`, `grid`, `dims = [N, I, J, C]`, `hours`, `dtype`, `byte_order`,
//! `blob`) and `<stem>.bin` holds every cube in `hours` order, each as
//! `N·I·J·C` little-endian `u32` counts in row-major `(segment, i, j, channel)`
//! order. Channel 0 is rent (trip starts), channel 1 is return (trip ends).

use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{Duration, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use super::grid::GridSpec;
use super::trip::{format_time, TripRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 2;
pub const RENT: usize = 0;
pub const RETURN: usize = 1;
pub const CHANNEL_NAMES: [&str; CHANNELS] = ["rent", "return"];
pub const ARCHIVE_FORMAT: &str = "stdemand-cubes/1";

/// Counts for one hour, shaped `[segments, rows, cols, channels]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DemandCube {
    pub hour: NaiveDateTime,
    dims: [usize; 4],
    counts: Vec<u32>,
}

impl DemandCube {
    pub fn zeros(hour: NaiveDateTime, segments: usize, rows: usize, cols: usize) -> Self {
        let dims = [segments, rows, cols, CHANNELS];
        DemandCube {
            hour,
            dims,
            counts: vec![0; dims.iter().product()],
        }
    }

    pub fn from_counts(hour: NaiveDateTime, dims: [usize; 4], counts: Vec<u32>) -> Result<Self> {
        if counts.len() != dims.iter().product::<usize>() || dims[3] != CHANNELS {
            return Err(Error::shape(
                "demand cube",
                format!("{} counts for dims {dims:?}", counts.len()),
            ));
        }
        Ok(DemandCube { hour, dims, counts })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    fn offset(&self, segment: usize, i: usize, j: usize, channel: usize) -> usize {
        let [_, rows, cols, ch] = self.dims;
        ((segment * rows + i) * cols + j) * ch + channel
    }

    pub fn get(&self, segment: usize, i: usize, j: usize, channel: usize) -> u32 {
        self.counts[self.offset(segment, i, j, channel)]
    }

    pub fn increment(&mut self, segment: usize, i: usize, j: usize, channel: usize) {
        let at = self.offset(segment, i, j, channel);
        self.counts[at] += 1;
    }

    pub fn channel_total(&self, channel: usize) -> u64 {
        self.counts
            .iter()
            .skip(channel)
            .step_by(CHANNELS)
            .map(|&c| c as u64)
            .sum()
    }

    /// Hourly count of one cell (summed over segments).
    pub fn cell_total(&self, i: usize, j: usize, channel: usize) -> u64 {
        (0..self.dims[0]).map(|s| self.get(s, i, j, channel) as u64).sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.dims.to_vec(),
            self.counts.iter().map(|&c| c as f64).collect(),
        )
        .expect("cube dims match counts")
    }
}

/// What happened to the ingested records.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: usize,
    /// Records with an endpoint more than one cell outside the box.
    pub dropped_outside: usize,
    pub rent_events: u64,
    pub return_events: u64,
    /// Kept records whose start / end falls outside the time range.
    pub starts_out_of_range: usize,
    pub ends_out_of_range: usize,
}

pub fn is_whole_hour(t: &NaiveDateTime) -> bool {
    t.minute() == 0 && t.second() == 0 && t.nanosecond() == 0
}

pub fn truncate_to_hour(t: &NaiveDateTime) -> NaiveDateTime {
    t.date().and_hms_opt(t.hour(), 0, 0).expect("valid hour")
}

/// Aggregates trips into one cube per hour of `[start, start + hours)`.
///
/// Each trip's start increments the rent channel at its own segment and cell,
/// and its end increments the return channel at the end segment and cell, so
/// a trip spanning an hour boundary contributes to two cubes. Records with an
/// endpoint far outside the box are dropped entirely.
pub fn build_demand(
    trips: &[TripRecord],
    grid: &GridSpec,
    start: NaiveDateTime,
    hours: usize,
) -> Result<(Vec<DemandCube>, IngestReport)> {
    grid.validate()?;
    if !is_whole_hour(&start) {
        return Err(Error::InvalidInput(format!(
            "time range must start on a whole hour, got {start}"
        )));
    }
    let mut cubes: Vec<DemandCube> = (0..hours)
        .map(|h| DemandCube::zeros(start + Duration::hours(h as i64), grid.segments, grid.rows, grid.cols))
        .collect();
    let mut report = IngestReport {
        records: trips.len(),
        ..IngestReport::default()
    };
    let slot = |t: &NaiveDateTime| -> Option<(usize, usize)> {
        let since = t.signed_duration_since(start);
        if since < Duration::zero() {
            return None;
        }
        let hour = (since.num_minutes() / 60) as usize;
        (hour < hours).then(|| (hour, grid.segment_of(t.minute())))
    };
    for trip in trips {
        let (Some(from), Some(to)) = (
            grid.map_to_cell(trip.start_lon, trip.start_lat),
            grid.map_to_cell(trip.end_lon, trip.end_lat),
        ) else {
            report.dropped_outside += 1;
            continue;
        };
        match slot(&trip.start_time) {
            Some((h, s)) => {
                cubes[h].increment(s, from.0, from.1, RENT);
                report.rent_events += 1;
            }
            None => report.starts_out_of_range += 1,
        }
        match slot(&trip.end_time) {
            Some((h, s)) => {
                cubes[h].increment(s, to.0, to.1, RETURN);
                report.return_events += 1;
            }
            None => report.ends_out_of_range += 1,
        }
    }
    Ok((cubes, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveIndex {
    pub format: String,
    pub grid: GridSpec,
    pub dims: [usize; 4],
    pub dtype: String,
    pub byte_order: String,
    pub blob: String,
    pub hours: Vec<String>,
}

/// Writes `<path>` (index) and `<path minus extension>.bin` (counts).
pub fn write_archive(path: &Path, grid: &GridSpec, cubes: &[DemandCube]) -> Result<()> {
    let dims = [grid.segments, grid.rows, grid.cols, CHANNELS];
    let blob = path.with_extension("bin");
    let mut bytes = Vec::with_capacity(cubes.len() * dims.iter().product::<usize>() * 4);
    for cube in cubes {
        if cube.dims != dims {
            return Err(Error::shape(
                "write_archive",
                format!("cube dims {:?} differ from grid {dims:?}", cube.dims),
            ));
        }
        for c in &cube.counts {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
    }
    let index = ArchiveIndex {
        format: ARCHIVE_FORMAT.into(),
        grid: grid.clone(),
        dims,
        dtype: "u32".into(),
        byte_order: "little".into(),
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        hours: cubes.iter().map(|c| format_time(&c.hour)).collect(),
    };
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    fs::write(path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<(GridSpec, Vec<DemandCube>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let index: ArchiveIndex = serde_json::from_str(&text)?;
    if index.format != ARCHIVE_FORMAT || index.dtype != "u32" || index.byte_order != "little" {
        return Err(Error::Format(format!(
            "unsupported cube archive {} / {} / {}",
            index.format, index.dtype, index.byte_order
        )));
    }
    let blob = path.with_file_name(&index.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let per_cube = index.dims.iter().product::<usize>();
    if bytes.len() != per_cube * index.hours.len() * 4 {
        return Err(Error::Format(format!(
            "count blob has {} bytes, index expects {}",
            bytes.len(),
            per_cube * index.hours.len() * 4
        )));
    }
    let mut cubes = Vec::with_capacity(index.hours.len());
    for (h, raw) in index.hours.iter().enumerate() {
        let hour = super::trip::parse_time(raw).map_err(Error::Format)?;
        let counts = bytes[h * per_cube * 4..(h + 1) * per_cube * 4]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        cubes.push(DemandCube::from_counts(hour, index.dims, counts)?);
    }
    Ok((index.grid, cubes))
}

/// Long-form CSV `hour,segment,i,j,channel,count`; zero counts are skipped
/// unless `include_zeros` is set.
pub fn write_long_csv<W: Write>(writer: W, cubes: &[DemandCube], include_zeros: bool) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["hour", "segment", "i", "j", "channel", "count"])?;
    for cube in cubes {
        let hour = format_time(&cube.hour);
        let [segments, rows, cols, channels] = cube.dims;
        for s in 0..segments {
            for i in 0..rows {
                for j in 0..cols {
                    for c in 0..channels {
                        let n = cube.get(s, i, j, c);
                        if n > 0 || include_zeros {
                            wtr.write_record([
                                hour.clone(),
                                s.to_string(),
                                i.to_string(),
                                j.to_string(),
                                CHANNEL_NAMES[c].to_string(),
                                n.to_string(),
                            ])?;
                        }
                    }
                }
            }
        }
    }
    wtr.flush().map_err(|e| Error::io("<cubes csv>", e))?;
    Ok(())
}
