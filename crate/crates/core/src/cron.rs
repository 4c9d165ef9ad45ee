//! Classic five-field cron: minute hour day-of-month month day-of-week.
//!
//! Each field accepts `*`, numbers, ranges `a-b`, steps `*/s`, `a-b/s` and
//! `a/s`, and comma lists of these. Day-of-week is 0-7 with both 0 and 7
//! meaning Sunday. When both day fields are restricted a day matches if
//! either does, as in Vixie cron.

use alloc::format;
use alloc::string::{String, ToString};

use chrono::{Datelike, NaiveDate, TimeDelta, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::Timestamp;

/// Years searched before deciding an expression never fires. Every
/// satisfiable day/month combination recurs within eight years.
const SEARCH_YEARS: i32 = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Schedule {
    expr: String,
    minutes: u64,
    hours: u64,
    days: u64,
    months: u64,
    weekdays: u64,
    days_any: bool,
    weekdays_any: bool,
}

impl TryFrom<String> for Schedule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Schedule::parse(&s)
    }
}

impl From<Schedule> for String {
    fn from(s: Schedule) -> String {
        s.expr
    }
}

impl core::fmt::Display for Schedule {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.expr)
    }
}

fn syntax(expr: &str, reason: impl Into<String>) -> Error {
    Error::CronSyntax { expr: expr.to_string(), reason: reason.into() }
}

fn parse_field(expr: &str, field: &str, name: &str, lo: u32, hi: u32) -> Result<u64> {
    let num = |s: &str| -> Result<u32> {
        let v: u32 = s
            .parse()
            .map_err(|_| syntax(expr, format!("{name}: `{s}` is not a number")))?;
        if v < lo || v > hi {
            return Err(syntax(expr, format!("{name}: {v} outside {lo}-{hi}")));
        }
        Ok(v)
    };
    let mut mask = 0u64;
    for part in field.split(',') {
        let (range, step) = match part.split_once('/') {
            Some((r, s)) => {
                let step: u32 = s
                    .parse()
                    .map_err(|_| syntax(expr, format!("{name}: bad step `{s}`")))?;
                if step == 0 {
                    return Err(syntax(expr, format!("{name}: step must be positive")));
                }
                (r, Some(step))
            }
            None => (part, None),
        };
        let (a, b) = if range == "*" {
            (lo, hi)
        } else if let Some((a, b)) = range.split_once('-') {
            let (a, b) = (num(a)?, num(b)?);
            if a > b {
                return Err(syntax(expr, format!("{name}: reversed range {a}-{b}")));
            }
            (a, b)
        } else {
            let a = num(range)?;
            (a, if step.is_some() { hi } else { a })
        };
        let mut v = a;
        while v <= b {
            mask |= 1 << v;
            v += step.unwrap_or(1);
        }
    }
    Ok(mask)
}

impl Schedule {
    pub fn parse(expr: &str) -> Result<Self> {
        let fields: alloc::vec::Vec<&str> = expr.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(syntax(expr, format!("expected 5 fields, found {}", fields.len())));
        }
        let mut weekdays = parse_field(expr, fields[4], "day-of-week", 0, 7)?;
        if weekdays & (1 << 7) != 0 {
            weekdays = (weekdays | 1) & !(1 << 7);
        }
        let s = Schedule {
            expr: fields.join(" "),
            minutes: parse_field(expr, fields[0], "minute", 0, 59)?,
            hours: parse_field(expr, fields[1], "hour", 0, 23)?,
            days: parse_field(expr, fields[2], "day-of-month", 1, 31)?,
            months: parse_field(expr, fields[3], "month", 1, 12)?,
            weekdays,
            days_any: fields[2].starts_with('*'),
            weekdays_any: fields[4].starts_with('*'),
        };
        if s.next_after(crate::time::ymd(2000, 1, 1)).is_none() {
            return Err(syntax(expr, "expression never matches a calendar date"));
        }
        Ok(s)
    }

    pub fn expr(&self) -> &str {
        &self.expr
    }

    fn day_matches(&self, d: NaiveDate) -> bool {
        if self.months & (1 << d.month()) == 0 {
            return false;
        }
        let dom = self.days & (1 << d.day()) != 0;
        let dow = self.weekdays & (1 << d.weekday().num_days_from_sunday()) != 0;
        match (self.days_any, self.weekdays_any) {
            (false, false) => dom || dow,
            _ => dom && dow,
        }
    }

    /// Does the minute containing `t` fire?
    pub fn matches(&self, t: Timestamp) -> bool {
        self.day_matches(t.date_naive())
            && self.hours & (1 << t.hour()) != 0
            && self.minutes & (1 << t.minute()) != 0
    }

    /// Smallest whole minute strictly after `after` that fires.
    pub fn next_after(&self, after: Timestamp) -> Option<Timestamp> {
        let floor = after.with_second(0)?.with_nanosecond(0)?;
        let mut t = floor + TimeDelta::minutes(1);
        let limit = t.year() + SEARCH_YEARS;
        while t.year() <= limit {
            let date = t.date_naive();
            if !self.day_matches(date) {
                t = date.succ_opt()?.and_hms_opt(0, 0, 0)?.and_utc();
                continue;
            }
            let h = t.hour();
            if self.hours & (1 << h) == 0 {
                match (h + 1..24).find(|x| self.hours & (1 << x) != 0) {
                    Some(nh) => t = date.and_hms_opt(nh, 0, 0)?.and_utc(),
                    None => t = date.succ_opt()?.and_hms_opt(0, 0, 0)?.and_utc(),
                }
                continue;
            }
            match (t.minute()..60).find(|m| self.minutes & (1 << m) != 0) {
                Some(m) => return date.and_hms_opt(h, m, 0).map(|x| x.and_utc()),
                None => t = date.and_hms_opt(h, 0, 0)?.and_utc() + TimeDelta::hours(1),
            }
        }
        None
    }

    /// Every firing in `(from, to]`, in order.
    pub fn firings(&self, from: Timestamp, to: Timestamp) -> impl Iterator<Item = Timestamp> + '_ {
        let mut cur = from;
        core::iter::from_fn(move || {
            let n = self.next_after(cur).filter(|n| *n <= to)?;
            cur = n;
            Some(n)
        })
    }
}
