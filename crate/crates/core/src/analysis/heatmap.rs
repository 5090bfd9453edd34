use std::io::Write;

use chrono::NaiveDateTime;

use crate::data::{CHANNELS, CHANNEL_NAMES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `I × J` hourly totals of one channel of an `[N, I, J, C]` cube or prediction.
pub fn heatmap(cube: &Tensor, channel: usize) -> Result<Vec<Vec<f64>>> {
    let &[n, rows, cols, c] = cube.dims() else {
        return Err(Error::shape("heatmap", format!("expected [N, I, J, C], got {}", cube.shape())));
    };
    if c != CHANNELS || channel >= CHANNELS {
        return Err(Error::shape("heatmap", format!("channel {channel} of {}", cube.shape())));
    }
    let data = cube.data();
    let mut grid = vec![vec![0.0; cols]; rows];
    for s in 0..n {
        for (i, row) in grid.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += data[((s * rows + i) * cols + j) * c + channel];
            }
        }
    }
    Ok(grid)
}

/// Headerless CSV, one grid row per line.
pub fn write_heatmap<W: Write>(writer: W, grid: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for row in grid {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("heatmap csv", e))?;
    Ok(())
}

/// `heatmap_<channel>_<hour>.csv` with the hour as `YYYYMMDDTHH`.
pub fn heatmap_file_name(channel: usize, hour: &NaiveDateTime) -> String {
    format!("heatmap_{}_{}.csv", CHANNEL_NAMES[channel], hour.format("%Y%m%dT%H"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_count_lands_in_place() {
        let mut t = Tensor::zeros(vec![2, 5, 6, 2]).unwrap();
        // segment 1, cell (3, 4), return channel
        t.data_mut()[((5 + 3) * 6 + 4) * 2 + 1] = 2.0;
        let g = heatmap(&t, 1).unwrap();
        assert_eq!(g[3][4], 2.0);
        assert_eq!(g.iter().flatten().sum::<f64>(), 2.0);
        assert!(heatmap(&t, 0).unwrap().iter().flatten().all(|&v| v == 0.0));

        let mut out = Vec::new();
        write_heatmap(&mut out, &g).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(text.lines().nth(3).unwrap(), "0,0,0,0,2,0");
    }
}
