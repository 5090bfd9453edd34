//! One-hot external factors for an hour: weather, workday/weekend, period.
//!
//! Concatenated layout (length [`EXTERNAL_DIM`]):
//! `[sunny, cloudy, rainy, workday, weekend, morning rush, day, evening rush, night]`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EXTERNAL_DIM: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Sunny,
    Cloudy,
    Rainy,
}

impl Weather {
    pub const ALL: [Weather; 3] = [Weather::Sunny, Weather::Cloudy, Weather::Rainy];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Weather::Sunny => "sunny",
            Weather::Cloudy => "cloudy",
            Weather::Rainy => "rainy",
        }
    }
}

impl FromStr for Weather {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sunny" => Ok(Weather::Sunny),
            "cloudy" => Ok(Weather::Cloudy),
            "rainy" => Ok(Weather::Rainy),
            other => Err(Error::InvalidInput(format!("unknown weather condition `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayType {
    Workday,
    Weekend,
}

impl DayType {
    pub fn of(date: NaiveDate) -> Self {
        match date.weekday() {
            Weekday::Sat | Weekday::Sun => DayType::Weekend,
            _ => DayType::Workday,
        }
    }

    pub fn code(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Period {
    MorningRush,
    Day,
    EveningRush,
    Night,
}

impl Period {
    pub fn code(self) -> usize {
        self as usize
    }
}

/// Start hours of each period; night wraps past midnight to the morning rush.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeriodBoundaries {
    pub morning_rush: u32,
    pub day: u32,
    pub evening_rush: u32,
    pub night: u32,
}

impl Default for PeriodBoundaries {
    fn default() -> Self {
        PeriodBoundaries {
            morning_rush: 7,
            day: 10,
            evening_rush: 15,
            night: 21,
        }
    }
}

impl PeriodBoundaries {
    pub fn validate(&self) -> Result<()> {
        if !(self.morning_rush < self.day && self.day < self.evening_rush && self.evening_rush < self.night && self.night < 24) {
            return Err(Error::InvalidConfig(format!(
                "period boundaries must increase within a day, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn period(&self, hour: u32) -> Period {
        if hour >= self.morning_rush && hour < self.day {
            Period::MorningRush
        } else if hour >= self.day && hour < self.evening_rush {
            Period::Day
        } else if hour >= self.evening_rush && hour < self.night {
            Period::EveningRush
        } else {
            Period::Night
        }
    }
}

/// Daytime covers hours 06–17, night the rest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayHalf {
    Day,
    Night,
}

impl DayHalf {
    pub fn of(hour: u32) -> Self {
        if (6..18).contains(&hour) {
            DayHalf::Day
        } else {
            DayHalf::Night
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DayHalf::Day => "day",
            DayHalf::Night => "night",
        }
    }
}

impl fmt::Display for DayHalf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DayHalf {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "day" => Ok(DayHalf::Day),
            "night" => Ok(DayHalf::Night),
            other => Err(Error::InvalidInput(format!("unknown day half `{other}`"))),
        }
    }
}

/// Observed weather per date and half day.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WeatherTable {
    entries: BTreeMap<(NaiveDate, DayHalf), Weather>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeatherRow {
    date: NaiveDate,
    half: String,
    condition: String,
}

impl WeatherTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, date: NaiveDate, half: DayHalf, weather: Weather) {
        self.entries.insert((date, half), weather);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, hour: &NaiveDateTime) -> Result<Weather> {
        let half = DayHalf::of(hour.hour());
        self.entries
            .get(&(hour.date(), half))
            .copied()
            .ok_or(Error::MissingWeather {
                date: hour.date(),
                half: half.name(),
            })
    }

    /// CSV with header `date,half,condition`.
    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut table = WeatherTable::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let row: WeatherRow = row?;
            table.insert(row.date, row.half.parse()?, row.condition.parse()?);
        }
        Ok(table)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for (&(date, half), weather) in &self.entries {
            wtr.serialize(WeatherRow {
                date,
                half: half.name().into(),
                condition: weather.name().into(),
            })?;
        }
        wtr.flush().map_err(|e| Error::io("<weather>", e))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalFactors {
    pub weather: Weather,
    pub day_type: DayType,
    pub period: Period,
}

impl ExternalFactors {
    pub fn one_hot(&self) -> [f64; EXTERNAL_DIM] {
        let mut v = [0.0; EXTERNAL_DIM];
        v[self.weather.code()] = 1.0;
        v[3 + self.day_type.code()] = 1.0;
        v[5 + self.period.code()] = 1.0;
        v
    }
}

pub fn encode_externals(
    hour: &NaiveDateTime,
    weather: &WeatherTable,
    periods: &PeriodBoundaries,
) -> Result<ExternalFactors> {
    Ok(ExternalFactors {
        weather: weather.lookup(hour)?,
        day_type: DayType::of(hour.date()),
        period: periods.period(hour.hour()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::trip::parse_time;

    fn sunny_table(date: &str) -> WeatherTable {
        let d = NaiveDate::parse_from_str(date, "%Y-%m-%d").unwrap();
        let mut t = WeatherTable::new();
        t.insert(d, DayHalf::Day, Weather::Sunny);
        t.insert(d, DayHalf::Night, Weather::Sunny);
        t
    }

    #[test]
    fn rush_hour_periods() {
        let table = sunny_table("2016-08-01");
        let b = PeriodBoundaries::default();
        let at = |s| encode_externals(&parse_time(s).unwrap(), &table, &b).unwrap();
        assert_eq!(at("2016-08-01T08:00:00").period, Period::MorningRush);
        assert_eq!(at("2016-08-01T08:00:00").period.code(), 0);
        assert_eq!(at("2016-08-01T18:00:00").period.code(), 2);
        assert_eq!(at("2016-08-01T12:00:00").period, Period::Day);
        assert_eq!(at("2016-08-01T03:00:00").period, Period::Night);
    }

    #[test]
    fn saturday_night() {
        // 2016-08-06 is a Saturday.
        let table = sunny_table("2016-08-06");
        let f = encode_externals(
            &parse_time("2016-08-06T23:00:00").unwrap(),
            &table,
            &PeriodBoundaries::default(),
        )
        .unwrap();
        assert_eq!(f.day_type, DayType::Weekend);
        assert_eq!(f.weather, Weather::Sunny);
        assert_eq!(f.period, Period::Night);
        assert_eq!(f.one_hot(), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn missing_weather_names_the_date() {
        let err = encode_externals(
            &parse_time("2016-08-02T09:00:00").unwrap(),
            &sunny_table("2016-08-01"),
            &PeriodBoundaries::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("2016-08-02"));
    }

    #[test]
    fn weather_csv_round_trip() {
        let csv = "date,half,condition\n2016-08-01,day,rainy\n2016-08-01,night,cloudy\n";
        let table = WeatherTable::read(csv.as_bytes()).unwrap();
        assert_eq!(table.len(), 2);
        let mut out = Vec::new();
        table.write(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), csv);
        assert!(WeatherTable::read("date,half,condition\n2016-08-01,day,snowy\n".as_bytes()).is_err());
    }

    #[test]
    fn boundaries_must_increase() {
        let b = PeriodBoundaries {
            day: 6,
            ..PeriodBoundaries::default()
        };
        assert!(b.validate().is_err());
    }
}
