//! Per-year cohort sampling and calendar-year splits.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use chrono::Datelike;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::time::Timestamp;
use crate::warehouse::{Warehouse, WarehouseIndex};
use crate::world::Panel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortRow {
    pub order_id: String,
    pub patient_id: String,
    pub panel_code: Panel,
    pub component_code: String,
    pub inference_time: Timestamp,
    pub label: bool,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cohort {
    pub rows: Vec<CohortRow>,
    /// Sampled orders dropped because the component result was missing.
    pub missing_results: usize,
}

impl Cohort {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CohortRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }
}

/// Split of a calendar year: the last listed year is Test, the one before
/// it Validation, every earlier year Train.
pub fn split_for_year(years: &[i32], year: i32) -> Option<Split> {
    let pos = years.iter().position(|&y| y == year)?;
    let n = years.len();
    Some(if pos + 1 == n {
        Split::Test
    } else if pos + 2 == n {
        Split::Validation
    } else {
        Split::Train
    })
}

/// Sample up to `per_year` orders of `panel` uniformly without replacement
/// in each year and label them from the component result.
pub fn build_cohort(
    warehouse: &Warehouse,
    panel: Panel,
    component: &str,
    per_year: usize,
    years: &[i32],
    seed: u64,
) -> Result<Cohort> {
    if !panel.components().contains(&component) {
        return Err(Error::InvalidTask(format!("{component} is not a component of {}", panel.as_str())));
    }
    if per_year < 1 {
        return Err(Error::InvalidInput("per_year must be at least 1".into()));
    }
    if years.len() < 3 {
        return Err(Error::InvalidInput("need at least three years for train/validation/test".into()));
    }
    let mut sorted = years.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != years.len() || sorted != years {
        return Err(Error::InvalidInput("years must be strictly increasing".into()));
    }

    let mut by_year: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, o) in warehouse.orders.iter().enumerate() {
        let y = o.order_time.year();
        if o.panel_code == panel && years.contains(&y) {
            by_year.entry(y).or_default().push(i);
        }
    }
    let idx = WarehouseIndex::new(warehouse);
    let mut rows = Vec::new();
    let mut missing_results = 0;
    for &year in years {
        let mut pool = by_year.remove(&year).unwrap_or_default();
        pool.sort_by(|&a, &b| warehouse.orders[a].order_id.cmp(&warehouse.orders[b].order_id));
        let take = per_year.min(pool.len());
        let mut r = rng::stream(seed, "cohort", year as u64);
        let mut picked: Vec<usize> = index::sample(&mut r, pool.len(), take).into_iter().map(|k| pool[k]).collect();
        picked.sort_unstable_by(|&a, &b| {
            let (oa, ob) = (&warehouse.orders[a], &warehouse.orders[b]);
            (oa.order_time, &oa.order_id).cmp(&(ob.order_time, &ob.order_id))
        });
        let split = split_for_year(years, year).expect("listed year");
        for oi in picked {
            let o = &warehouse.orders[oi];
            match idx.result(&o.order_id, component) {
                Some(res) => rows.push(CohortRow {
                    order_id: o.order_id.clone(),
                    patient_id: o.patient_id.clone(),
                    panel_code: panel,
                    component_code: component.into(),
                    inference_time: o.order_time,
                    label: res.abnormal,
                    split,
                }),
                None => missing_results += 1,
            }
        }
    }
    Ok(Cohort { rows, missing_results })
}
