use std::ops::Range;

use chrono::NaiveDateTime;

use super::cube::DemandCube;
use super::externals::{encode_externals, ExternalFactors, PeriodBoundaries, WeatherTable, EXTERNAL_DIM};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hourly cubes with the external factors of each hour.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub cubes: Vec<DemandCube>,
    pub externals: Vec<ExternalFactors>,
}

/// One supervised example: hours `t-d .. t-1`, the externals of hour `t-1`,
/// and the cube of hour `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// Index of the target hour in the corpus.
    pub target: usize,
    /// `[d, N, I, J, C]`
    pub demand: Tensor,
    /// `[9]`
    pub externals: Tensor,
    /// `[N, I, J, C]`
    pub truth: Tensor,
}

impl Corpus {
    pub fn new(cubes: Vec<DemandCube>, externals: Vec<ExternalFactors>) -> Result<Self> {
        if cubes.len() != externals.len() {
            return Err(Error::InvalidInput(format!(
                "{} cubes but {} external factor rows",
                cubes.len(),
                externals.len()
            )));
        }
        Ok(Corpus { cubes, externals })
    }

    pub fn from_weather(cubes: Vec<DemandCube>, weather: &WeatherTable, periods: &PeriodBoundaries) -> Result<Self> {
        let externals = cubes
            .iter()
            .map(|c| encode_externals(&c.hour, weather, periods))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cubes, externals)
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn hours(&self) -> Vec<NaiveDateTime> {
        self.cubes.iter().map(|c| c.hour).collect()
    }

    /// Builds the windows whose inputs and target all lie inside `range`:
    /// `range.len() - lookback` samples (none if the range is too short).
    pub fn windows(&self, range: Range<usize>, lookback: usize) -> Result<Vec<WindowSample>> {
        if range.end > self.len() || lookback == 0 {
            return Err(Error::InvalidInput(format!(
                "window range {range:?} with look-back {lookback} over {} hours",
                self.len()
            )));
        }
        let tensors: Vec<Tensor> = self.cubes[range.clone()].iter().map(DemandCube::to_tensor).collect();
        let mut out = Vec::new();
        for t in range.start + lookback..range.end {
            out.push(self.window_from(&tensors, range.start, t, lookback)?);
        }
        Ok(out)
    }

    /// The window predicting hour `target` from the `lookback` hours before it,
    /// regardless of split membership.
    pub fn window_at(&self, target: usize, lookback: usize) -> Result<WindowSample> {
        if lookback == 0 || target < lookback || target >= self.len() {
            return Err(Error::InvalidInput(format!(
                "no {lookback}-hour window ends before hour index {target}"
            )));
        }
        let start = target - lookback;
        let tensors: Vec<Tensor> = self.cubes[start..=target].iter().map(DemandCube::to_tensor).collect();
        self.window_from(&tensors, start, target, lookback)
    }

    fn window_from(&self, tensors: &[Tensor], base: usize, target: usize, lookback: usize) -> Result<WindowSample> {
        let inputs: Vec<&Tensor> = (target - lookback..target).map(|h| &tensors[h - base]).collect();
        Ok(WindowSample {
            target,
            demand: Tensor::stack(&inputs)?,
            externals: Tensor::from_vec(vec![EXTERNAL_DIM], self.externals[target - 1].one_hot().to_vec())?,
            truth: tensors[target - base].clone(),
        })
    }
}
