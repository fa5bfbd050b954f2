//! Calendar handling: ISO-8601 parsing to epoch days and the four
//! calendar covariates (month, ISO week, day of week, scaled year).

use chrono::{Datelike, Days, NaiveDate};
use epicast_core::panel::NamedSeries;

use crate::error::{AppError, Result};

const EPOCH: fn() -> NaiveDate = || NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch");

/// Parse `YYYY-MM-DD` into days since the Unix epoch.
pub fn parse_day(text: &str) -> Result<i64> {
    let date = NaiveDate::parse_from_str(text, "%Y-%m-%d")
        .map_err(|e| AppError::Other(format!("invalid date `{text}`: {e}")))?;
    Ok((date - EPOCH()).num_days())
}

/// Format an epoch day as `YYYY-MM-DD`.
pub fn format_day(day: i64) -> String {
    let date = if day >= 0 {
        EPOCH() + Days::new(day as u64)
    } else {
        EPOCH() - Days::new((-day) as u64)
    };
    date.format("%Y-%m-%d").to_string()
}

fn date_of(day: i64) -> NaiveDate {
    if day >= 0 {
        EPOCH() + Days::new(day as u64)
    } else {
        EPOCH() - Days::new((-day) as u64)
    }
}

/// The four calendar covariates over a contiguous daily axis: month/12,
/// ISO-week/53, day-of-week/7 (Monday = 1), and min-max-scaled year.
pub fn calendar_covariates(start_day: i64, len: usize) -> Vec<NamedSeries> {
    let dates: Vec<NaiveDate> = (0..len).map(|i| date_of(start_day + i as i64)).collect();
    let years: Vec<f64> = dates.iter().map(|d| d.year() as f64).collect();
    let (ymin, ymax) = years
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
            (lo.min(y), hi.max(y))
        });
    let year_scaled: Vec<f64> = years
        .iter()
        .map(|&y| if ymax == ymin { 0.0 } else { (y - ymin) / (ymax - ymin) })
        .collect();
    vec![
        NamedSeries {
            name: "year".into(),
            values: year_scaled,
        },
        NamedSeries {
            name: "month".into(),
            values: dates.iter().map(|d| d.month() as f64 / 12.0).collect(),
        },
        NamedSeries {
            name: "week_of_year".into(),
            values: dates
                .iter()
                .map(|d| d.iso_week().week() as f64 / 53.0)
                .collect(),
        },
        NamedSeries {
            name: "day_of_week".into(),
            values: dates
                .iter()
                .map(|d| d.weekday().number_from_monday() as f64 / 7.0)
                .collect(),
        },
    ]
}
