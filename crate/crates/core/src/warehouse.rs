//! In-memory form of the warehouse export and the train-time history adapter.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{PatientHistory, Windows};
use crate::time::Timestamp;
use crate::world::{ClinicalEvent, DiagnosticOrder, LabResult, Race, Sex};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRow {
    pub patient_id: String,
    pub birth_date: NaiveDate,
    pub sex: Sex,
    pub race: Race,
    pub unit_id: String,
}

/// The four flat tables of a warehouse export.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Warehouse {
    pub patients: Vec<PatientRow>,
    pub events: Vec<ClinicalEvent>,
    pub orders: Vec<DiagnosticOrder>,
    pub results: Vec<LabResult>,
}

/// Per-patient lookup over a [`Warehouse`], built once and queried per
/// cohort row.
#[derive(Debug)]
pub struct WarehouseIndex<'a> {
    warehouse: &'a Warehouse,
    patients: BTreeMap<&'a str, usize>,
    events: BTreeMap<&'a str, Vec<usize>>,
    results: BTreeMap<(&'a str, &'a str), usize>,
}

impl<'a> WarehouseIndex<'a> {
    pub fn new(warehouse: &'a Warehouse) -> Self {
        let patients = warehouse
            .patients
            .iter()
            .enumerate()
            .map(|(i, p)| (p.patient_id.as_str(), i))
            .collect();
        let mut events: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in warehouse.events.iter().enumerate() {
            events.entry(e.patient_id.as_str()).or_default().push(i);
        }
        let results = warehouse
            .results
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.order_id.as_str(), r.component_code.as_str()), i))
            .collect();
        Self { warehouse, patients, events, results }
    }

    pub fn patient(&self, patient_id: &str) -> Option<&'a PatientRow> {
        self.patients.get(patient_id).map(|&i| &self.warehouse.patients[i])
    }

    pub fn result(&self, order_id: &str, component: &str) -> Option<&'a LabResult> {
        self.results.get(&(order_id, component)).map(|&i| &self.warehouse.results[i])
    }

    /// Assemble the history of `patient_id` as seen strictly before
    /// `inference_time`.
    pub fn load_history(&self, patient_id: &str, inference_time: Timestamp, windows: Windows) -> Result<PatientHistory> {
        let row = self
            .patient(patient_id)
            .ok_or_else(|| Error::PatientNotFound(patient_id.into()))?;
        let events = self
            .events
            .get(patient_id)
            .into_iter()
            .flatten()
            .map(|&i| &self.warehouse.events[i]);
        Ok(PatientHistory::assemble(row, events, inference_time, windows))
    }
}
