//! Timestamps are UTC instants at second resolution.

use alloc::string::String;

use chrono::{DateTime, NaiveDate, SecondsFormat, TimeDelta, Utc};

use crate::error::{Error, Result};

pub type Timestamp = DateTime<Utc>;

const SECONDS_PER_YEAR: f64 = 365.25 * 86_400.0;

pub fn days(n: i64) -> TimeDelta {
    TimeDelta::days(n)
}

pub fn from_unix(secs: i64) -> Timestamp {
    DateTime::from_timestamp(secs, 0).expect("timestamp within chrono range")
}

pub fn ymd(year: i32, month: u32, day: u32) -> Timestamp {
    NaiveDate::from_ymd_opt(year, month, day)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid calendar date")
        .and_utc()
}

/// Canonical wire form: `2021-03-04T05:06:07Z`.
pub fn format_rfc3339(t: Timestamp) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn parse_rfc3339(s: &str) -> Result<Timestamp> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| Error::InvalidInput(alloc::format!("bad timestamp `{s}`: {e}")))
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|e| Error::InvalidInput(alloc::format!("bad date `{s}`: {e}")))
}

/// Age in fractional years between midnight of `birth_date` and `at`.
pub fn age_years(birth_date: NaiveDate, at: Timestamp) -> f64 {
    let born = birth_date.and_hms_opt(0, 0, 0).unwrap().and_utc();
    (at - born).num_seconds() as f64 / SECONDS_PER_YEAR
}

/// Serde adapter storing a [`TimeDelta`] as whole seconds.
pub mod delta_secs {
    use chrono::TimeDelta;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &TimeDelta, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(d.num_seconds())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<TimeDelta, D::Error> {
        let secs = i64::deserialize(d)?;
        Ok(TimeDelta::seconds(secs))
    }
}
