use std::io::{Read, Write};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// One rental, as exported by the operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub order_id: String,
    pub user_id: String,
    #[serde(with = "iso_time")]
    pub start_time: NaiveDateTime,
    #[serde(with = "iso_time")]
    pub end_time: NaiveDateTime,
    pub start_lon: f64,
    pub start_lat: f64,
    pub end_lon: f64,
    pub end_lat: f64,
}

impl TripRecord {
    pub fn validate(&self) -> Result<()> {
        if self.end_time < self.start_time {
            return Err(Error::InvalidInput(format!(
                "trip {} ends before it starts",
                self.order_id
            )));
        }
        Ok(())
    }
}

pub(crate) mod iso_time {
    use chrono::NaiveDateTime;
    use serde::{Deserialize, Deserializer, Serializer};

    use super::TIME_FORMAT;

    pub fn serialize<S: Serializer>(t: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&t.format(TIME_FORMAT))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDateTime, D::Error> {
        let raw = String::deserialize(d)?;
        parse(&raw).map_err(serde::de::Error::custom)
    }

    /// Accepts `T` or space separated ISO-8601 local timestamps, with
    /// optional seconds.
    pub fn parse(raw: &str) -> Result<NaiveDateTime, String> {
        let raw = raw.trim();
        for fmt in [TIME_FORMAT, "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
            if let Ok(t) = NaiveDateTime::parse_from_str(raw, fmt) {
                return Ok(t);
            }
        }
        Err(format!("invalid timestamp `{raw}`"))
    }
}

pub use iso_time::parse as parse_time;

pub fn format_time(t: &NaiveDateTime) -> String {
    t.format(TIME_FORMAT).to_string()
}

pub fn read_trips<R: Read>(reader: R) -> Result<Vec<TripRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut trips = Vec::new();
    for row in rdr.deserialize() {
        let trip: TripRecord = row?;
        trip.validate()?;
        trips.push(trip);
    }
    Ok(trips)
}

/// Writes the trips CSV with a fixed header and six-decimal coordinates.
pub fn write_trips<W: Write>(writer: W, trips: &[TripRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "order_id",
        "user_id",
        "start_time",
        "end_time",
        "start_lon",
        "start_lat",
        "end_lon",
        "end_lat",
    ])?;
    for t in trips {
        wtr.write_record([
            t.order_id.clone(),
            t.user_id.clone(),
            format_time(&t.start_time),
            format_time(&t.end_time),
            format!("{:.6}", t.start_lon),
            format!("{:.6}", t.start_lat),
            format!("{:.6}", t.end_lon),
            format!("{:.6}", t.end_lat),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<trips>", e))?;
    Ok(())
}
