//! Seeded synthetic city for desk-scale experiments.
//!
//! Each (hour, cell) draws a Poisson number of trip starts whose mean is
//! `base_intensity × profile(day type, hour) × spatial(cell) × weather`, plus an
//! optional propagation term in which ring `r` around a center cell carries a
//! latent pulse `r` hours before the center does.

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use serde::{Deserialize, Serialize};

use super::externals::{DayHalf, DayType, Weather, WeatherTable};
use super::grid::GridSpec;
use super::trip::TripRecord;
use crate::error::{Error, Result};

/// Gaussian demand bump, positioned as a fraction of the grid extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hotspot {
    pub row: f64,
    pub col: f64,
    pub weight: f64,
    /// Standard deviation as a fraction of the grid extent.
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Propagation {
    pub center: [usize; 2],
    pub rings: usize,
    pub gain: f64,
    pub decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub start_date: NaiveDate,
    pub days: usize,
    /// Mean trip starts per cell-hour at a peak hour in a hotspot of weight 1.
    pub base_intensity: f64,
    pub hotspots: Vec<Hotspot>,
    /// Spatial floor added to every cell.
    pub background: f64,
    pub weekend_factor: f64,
    pub cloudy_factor: f64,
    pub rainy_factor: f64,
    /// Probabilities of sunny, cloudy and rainy for each half day.
    pub weather_probabilities: [f64; 3],
    /// Forces every half day to one condition.
    pub weather_override: Option<Weather>,
    pub mean_trip_minutes: f64,
    /// Maximum cell offset between a trip's start and end cells.
    pub max_displacement: usize,
    pub users: usize,
    pub propagation: Option<Propagation>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            start_date: NaiveDate::from_ymd_opt(2016, 8, 1).expect("valid date"),
            days: 31,
            base_intensity: 2.0,
            hotspots: vec![
                Hotspot {
                    row: 0.3,
                    col: 0.35,
                    weight: 1.0,
                    radius: 0.15,
                },
                Hotspot {
                    row: 0.7,
                    col: 0.6,
                    weight: 0.7,
                    radius: 0.2,
                },
            ],
            background: 0.1,
            weekend_factor: 0.8,
            cloudy_factor: 0.85,
            rainy_factor: 0.5,
            weather_probabilities: [0.6, 0.25, 0.15],
            weather_override: None,
            mean_trip_minutes: 15.0,
            max_displacement: 2,
            users: 5000,
            propagation: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        grid.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.days == 0 {
            return bad("synth.days must be ≥ 1".into());
        }
        let nonneg = [
            ("base_intensity", self.base_intensity),
            ("background", self.background),
            ("weekend_factor", self.weekend_factor),
            ("cloudy_factor", self.cloudy_factor),
            ("rainy_factor", self.rainy_factor),
            ("mean_trip_minutes", self.mean_trip_minutes),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("synth.{name} must be finite and ≥ 0, got {v}"));
            }
        }
        let p = self.weather_probabilities;
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || p.iter().sum::<f64>() <= 0.0 {
            return bad(format!("synth.weather_probabilities must be nonnegative with a positive sum, got {p:?}"));
        }
        for h in &self.hotspots {
            if !(h.radius > 0.0 && h.weight >= 0.0) {
                return bad(format!("synth hotspot needs radius > 0 and weight ≥ 0, got {h:?}"));
            }
        }
        if self.users == 0 {
            return bad("synth.users must be ≥ 1".into());
        }
        if let Some(p) = &self.propagation {
            if p.center[0] >= grid.rows || p.center[1] >= grid.cols {
                return bad(format!("synth.propagation.center {:?} lies outside the grid", p.center));
            }
            if !(p.gain >= 0.0 && p.decay >= 0.0) {
                return bad("synth.propagation gain and decay must be ≥ 0".into());
            }
        }
        Ok(())
    }
}

/// Diurnal shape: two rush-hour peaks on workdays, one broad afternoon peak
/// at weekends.
pub fn diurnal_profile(day_type: DayType, hour: u32) -> f64 {
    let bump = |center: f64, width: f64| (-(hour as f64 - center).powi(2) / (2.0 * width * width)).exp();
    match day_type {
        DayType::Workday => 0.1 + bump(8.0, 1.2) + bump(18.0, 1.5),
        DayType::Weekend => 0.1 + 0.9 * bump(14.0, 3.0),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub trips: Vec<TripRecord>,
    pub weather: WeatherTable,
}

const WEATHER_STREAM: u64 = 1;
const PULSE_STREAM: u64 = 2;

pub fn generate_synthetic(grid: &GridSpec, config: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    config.validate(grid)?;
    let start = config.start_date.and_hms_opt(0, 0, 0).expect("midnight");
    let hours = config.days * 24;

    let mut weather_rng = ChaCha8Rng::seed_from_u64(seed);
    weather_rng.set_stream(WEATHER_STREAM);
    let mut weather = WeatherTable::new();
    let total_p: f64 = config.weather_probabilities.iter().sum();
    for day in 0..config.days {
        let date = config.start_date + Duration::days(day as i64);
        for half in [DayHalf::Day, DayHalf::Night] {
            let w = config.weather_override.unwrap_or_else(|| {
                let u = weather_rng.random::<f64>() * total_p;
                let mut acc = 0.0;
                for (k, p) in config.weather_probabilities.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return Weather::ALL[k];
                    }
                }
                Weather::Rainy
            });
            weather.insert(date, half, w);
        }
    }

    let spatial = spatial_field(grid, config);
    let pulses: Vec<f64> = match &config.propagation {
        Some(p) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(PULSE_STREAM);
            (0..hours + p.rings).map(|_| Exp1.sample(&mut rng)).collect()
        }
        None => Vec::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trips = Vec::new();
    for t in 0..hours {
        let hour = start + Duration::hours(t as i64);
        let condition = weather.lookup(&hour)?;
        let day_type = DayType::of(hour.date());
        let mut modifier = diurnal_profile(day_type, hour.hour()) * config.base_intensity;
        if day_type == DayType::Weekend {
            modifier *= config.weekend_factor;
        }
        modifier *= match condition {
            Weather::Sunny => 1.0,
            Weather::Cloudy => config.cloudy_factor,
            Weather::Rainy => config.rainy_factor,
        };
        for i in 0..grid.rows {
            for j in 0..grid.cols {
                let mut lambda = modifier * spatial[i * grid.cols + j];
                if let Some(p) = &config.propagation {
                    let r = i.abs_diff(p.center[0]).max(j.abs_diff(p.center[1]));
                    if r <= p.rings {
                        lambda += p.gain * p.decay.powi(r as i32) * pulses[t + r];
                    }
                }
                let n = if lambda > 0.0 {
                    Poisson::new(lambda)
                        .map_err(|e| Error::InvalidConfig(format!("synthetic intensity {lambda}: {e}")))?
                        .sample(&mut rng) as usize
                } else {
                    0
                };
                for _ in 0..n {
                    trips.push(draw_trip(grid, config, &mut rng, hour, i, j));
                }
            }
        }
    }
    trips.sort_by(|a, b| a.start_time.cmp(&b.start_time));
    for (k, trip) in trips.iter_mut().enumerate() {
        trip.order_id = format!("{:08}", k + 1);
    }
    Ok(SynthOutput { trips, weather })
}

fn spatial_field(grid: &GridSpec, config: &SynthConfig) -> Vec<f64> {
    let mut field = vec![config.background; grid.rows * grid.cols];
    for i in 0..grid.rows {
        for j in 0..grid.cols {
            let (u, v) = (
                (i as f64 + 0.5) / grid.rows as f64,
                (j as f64 + 0.5) / grid.cols as f64,
            );
            for h in &config.hotspots {
                let d2 = (u - h.row).powi(2) + (v - h.col).powi(2);
                field[i * grid.cols + j] += h.weight * (-d2 / (2.0 * h.radius * h.radius)).exp();
            }
        }
    }
    field
}

fn point_in_cell(grid: &GridSpec, rng: &mut ChaCha8Rng, i: usize, j: usize) -> (f64, f64) {
    let (lon0, lat0) = grid.cell_origin(i, j);
    // Stay clear of cell edges so coordinates survive decimal rounding.
    (
        lon0 + rng.random_range(0.05..0.95) * grid.cell_width_lon(),
        lat0 + rng.random_range(0.05..0.95) * grid.cell_width_lat(),
    )
}

fn draw_trip(
    grid: &GridSpec,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
    hour: NaiveDateTime,
    i: usize,
    j: usize,
) -> TripRecord {
    let start_time = hour + Duration::seconds(rng.random_range(0..3600));
    let minutes = config.mean_trip_minutes * rng.random_range(0.5..1.5);
    let end_time = start_time + Duration::seconds((minutes * 60.0).round() as i64);
    let disp = config.max_displacement as i64;
    let shift = |x: usize, n: usize, rng: &mut ChaCha8Rng| {
        (x as i64 + rng.random_range(-disp..=disp)).clamp(0, n as i64 - 1) as usize
    };
    let (ei, ej) = (shift(i, grid.rows, rng), shift(j, grid.cols, rng));
    let (start_lon, start_lat) = point_in_cell(grid, rng, i, j);
    let (end_lon, end_lat) = point_in_cell(grid, rng, ei, ej);
    TripRecord {
        order_id: String::new(),
        user_id: format!("u{}", rng.random_range(0..config.users)),
        start_time,
        end_time,
        start_lon,
        start_lat,
        end_lon,
        end_lat,
    }
}
