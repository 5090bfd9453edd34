use std::ops::Range;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First dates of the validation and test splits; everything earlier trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitBoundaries {
    pub validation_start: NaiveDate,
    pub test_start: NaiveDate,
}

/// Contiguous, chronological index ranges into an hourly series.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn named(&self) -> [(&'static str, Range<usize>); 3] {
        [
            ("train", self.train.clone()),
            ("validation", self.validation.clone()),
            ("test", self.test.clone()),
        ]
    }
}

/// Partitions chronologically ordered hours by date. Every split must hold at
/// least `min_hours` hours (look-back + 1 for windowing).
pub fn split_by_date(hours: &[NaiveDateTime], boundaries: &SplitBoundaries, min_hours: usize) -> Result<Splits> {
    if boundaries.test_start <= boundaries.validation_start {
        return Err(Error::InvalidConfig(format!(
            "split.test_start {} must come after split.validation_start {}",
            boundaries.test_start, boundaries.validation_start
        )));
    }
    if hours.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("hours are not strictly increasing".into()));
    }
    let val = hours.partition_point(|h| h.date() < boundaries.validation_start);
    let test = hours.partition_point(|h| h.date() < boundaries.test_start);
    let splits = Splits {
        train: 0..val,
        validation: val..test,
        test: test..hours.len(),
    };
    for (name, range) in splits.named() {
        if range.len() < min_hours {
            return Err(Error::SplitTooSmall {
                name,
                hours: range.len(),
                needed: min_hours,
            });
        }
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    fn august() -> Vec<NaiveDateTime> {
        let start = NaiveDate::from_ymd_opt(2016, 8, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        (0..31 * 24).map(|h| start + Duration::hours(h)).collect()
    }

    fn date(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2016, 8, d).unwrap()
    }

    #[test]
    fn august_23_4_4() {
        let hours = august();
        let b = SplitBoundaries {
            validation_start: date(24),
            test_start: date(28),
        };
        let s = split_by_date(&hours, &b, 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (23 * 24, 4 * 24, 4 * 24));
        let mut seen = vec![0; hours.len()];
        for (_, r) in s.named() {
            r.for_each(|i| seen[i] += 1);
        }
        assert!(seen.iter().all(|&n| n == 1));
    }

    #[test]
    fn empty_train_rejected() {
        let b = SplitBoundaries {
            validation_start: date(1),
            test_start: date(28),
        };
        let err = split_by_date(&august(), &b, 7).unwrap_err();
        assert!(matches!(err, Error::SplitTooSmall { name: "train", hours: 0, .. }));
    }

    #[test]
    fn too_short_split_rejected() {
        let b = SplitBoundaries {
            validation_start: date(24),
            test_start: date(31),
        };
        assert!(split_by_date(&august(), &b, 25).is_err());
        assert!(split_by_date(&august(), &b, 24).is_ok());
    }
}
