use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use stdemand_core::analysis::DiagonalMode;
use stdemand_core::data::{GridSpec, PeriodBoundaries, SplitBoundaries, SynthConfig, CHANNEL_NAMES};
use stdemand_core::experiment::SweepAxis;
use stdemand_core::net::{NetworkConfig, TrainConfig};

use crate::CliError;

/// Hours covered by the corpus. Overrides `synth.start_date` / `synth.days`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeRange {
    pub start: NaiveDate,
    pub days: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Condition the historical average on workday/weekend as well as hour.
    pub ha_by_day_type: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { ha_by_day_type: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationConfig {
    pub center: [usize; 2],
    /// `rent` or `return`.
    pub channel: String,
    pub max_offset: usize,
    pub max_lag: usize,
    pub mode: DiagonalMode,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        CorrelationConfig {
            center: [7, 7],
            channel: "rent".into(),
            max_offset: 9,
            max_lag: 6,
            mode: DiagonalMode::Diagonal4,
        }
    }
}

impl CorrelationConfig {
    pub fn channel_index(&self) -> Result<usize, CliError> {
        CHANNEL_NAMES
            .iter()
            .position(|c| *c == self.channel)
            .ok_or_else(|| CliError::Config(format!("correlation.channel: unknown channel `{}`", self.channel)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            axis: SweepAxis::Lookback,
            values: vec![1, 2, 3, 4, 5, 6],
        }
    }
}

/// File locations; relative entries resolve against `run_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub run_dir: PathBuf,
    pub trips: PathBuf,
    pub weather: PathBuf,
    pub cubes: PathBuf,
    pub model: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            run_dir: "run".into(),
            trips: "trips.csv".into(),
            weather: "weather.csv".into(),
            cubes: "cubes.json".into(),
            model: "model".into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.run_dir.join(p)
    }
}

/// Every module's settings in one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the synthetic generator.
    pub seed: u64,
    pub range: TimeRange,
    pub split: SplitBoundaries,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub periods: PeriodBoundaries,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default)]
    pub correlation: CorrelationConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub paths: Paths,
}

impl RunConfig {
    /// Reads `path`, applies `key=value` overrides and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
        let mut doc: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_value(doc)
    }

    pub fn from_value(doc: Value) -> Result<Self, CliError> {
        let config: RunConfig = serde_path_to_error::deserialize(doc)
            .map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let core = |e: stdemand_core::Error| CliError::Config(e.to_string());
        if self.range.days == 0 {
            return Err(CliError::Config("range.days must be ≥ 1".into()));
        }
        self.grid.validate().map_err(core)?;
        self.periods.validate().map_err(core)?;
        self.synth_config().validate(&self.grid).map_err(core)?;
        self.network.validate().map_err(core)?;
        self.train.validate().map_err(core)?;
        let cube = [self.grid.segments, self.grid.rows, self.grid.cols];
        let net = [self.network.segments, self.network.rows, self.network.cols];
        if cube != net {
            return Err(CliError::Config(format!(
                "network segments/rows/cols {net:?} must match grid {cube:?}"
            )));
        }
        let end = self.range.start + chrono::Duration::days(self.range.days as i64);
        if !(self.range.start < self.split.validation_start && self.split.test_start < end) {
            return Err(CliError::Config(format!(
                "split dates must fall inside the range {} .. {end}",
                self.range.start
            )));
        }
        let [ci, cj] = self.correlation.center;
        if ci >= self.grid.rows || cj >= self.grid.cols {
            return Err(CliError::Config(format!(
                "correlation.center {:?} is outside the {}×{} grid",
                self.correlation.center, self.grid.rows, self.grid.cols
            )));
        }
        self.correlation.channel_index()?;
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            start_date: self.range.start,
            days: self.range.days,
            ..self.synth.clone()
        }
    }

    pub fn hours(&self) -> usize {
        self.range.days * 24
    }
}

/// `a.b.c=value`; the value is parsed as JSON and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Config(format!("override key `{key}` has an empty segment")));
        }
        let map = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just created")
            }
            _ => {
                return Err(CliError::Config(format!(
                    "override `{key}`: `{}` is not an object",
                    parts[..n].join(".")
                )))
            }
        };
        if n + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one segment")
}
