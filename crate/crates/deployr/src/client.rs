//! HTTP client for the EMR API and the inference-time history adapter.

use std::time::Duration;

use deployr_core::features::{PatientHistory, Windows};
use deployr_core::time::format_rfc3339;
use deployr_core::warehouse::PatientRow;
use deployr_core::world::{ClinicalEvent, LabResult, Panel};
use deployr_core::Timestamp;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::emr::{Subscription, SubscriptionRequest, WritebackEntry, WritebackPayload, WritebackTarget};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EmrClient {
    base: String,
    http: reqwest::Client,
}

impl EmrClient {
    pub fn new(base_url: &str) -> Self {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .expect("http client");
        Self { base: base_url.trim_end_matches('/').to_string(), http }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(what: &str, resp: reqwest::Result<reqwest::Response>) -> Result<T> {
        let resp = resp.map_err(|e| Error::Unavailable(format!("{what}: {e}")))?;
        match resp.status() {
            s if s.is_success() => resp.json().await.map_err(|e| Error::Unavailable(format!("{what}: {e}"))),
            StatusCode::NOT_FOUND => Err(Error::NotFound(what.to_string())),
            StatusCode::BAD_REQUEST => Err(Error::BadRequest(format!("{what}: {}", resp.text().await.unwrap_or_default()))),
            s => Err(Error::Unavailable(format!("{what}: HTTP {s}"))),
        }
    }

    async fn get<T: DeserializeOwned>(&self, path: &str, query: &[(&str, String)]) -> Result<T> {
        let resp = self.http.get(format!("{}{path}", self.base)).query(query).send().await;
        Self::decode(path, resp).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await;
        Self::decode(path, resp).await
    }

    pub async fn patient(&self, patient_id: &str) -> Result<PatientRow> {
        self.get(&format!("/Patient/{patient_id}"), &[]).await
    }

    pub async fn conditions(&self, patient_id: &str) -> Result<Vec<ClinicalEvent>> {
        self.get("/Condition", &[("patient", patient_id.to_string())]).await
    }

    pub async fn medications(&self, patient_id: &str, since: Timestamp) -> Result<Vec<ClinicalEvent>> {
        self.get("/MedicationRequest", &[("patient", patient_id.to_string()), ("since", format_rfc3339(since))]).await
    }

    pub async fn observations(&self, patient_id: &str, since: Timestamp) -> Result<Vec<ClinicalEvent>> {
        self.get("/Observation", &[("patient", patient_id.to_string()), ("since", format_rfc3339(since))]).await
    }

    /// The result of one order component, if it is available yet.
    pub async fn result(&self, order_id: &str, component: &str) -> Result<Option<LabResult>> {
        let rs: Vec<LabResult> = self
            .get("/Observation", &[("order", order_id.to_string()), ("component", component.to_string())])
            .await?;
        Ok(rs.into_iter().next())
    }

    pub async fn unit_roster(&self, unit_id: &str) -> Result<Vec<String>> {
        self.get(&format!("/Unit/{unit_id}/patients"), &[]).await
    }

    pub async fn subscribe(&self, panel_code: Panel, callback_url: &str) -> Result<Subscription> {
        self.post("/Subscription", &SubscriptionRequest { panel_code, callback_url: callback_url.to_string() })
            .await
    }

    pub async fn writeback(&self, target: WritebackTarget, payload: &WritebackPayload) -> Result<WritebackEntry> {
        self.post(&format!("/writeback/{}", target.path()), payload).await
    }

    pub async fn writeback_log(&self, target: WritebackTarget) -> Result<Vec<WritebackEntry>> {
        self.get(&format!("/writeback/{}", target.path()), &[]).await
    }
}

/// Read a patient's history through the transactional API. The mapping to
/// [`PatientHistory`] is the same one the warehouse adapter uses.
pub async fn fetch_history_transactional(
    client: &EmrClient,
    patient_id: &str,
    inference_time: Timestamp,
    windows: Windows,
) -> Result<PatientHistory> {
    let since = inference_time - windows.max_lookback();
    let patient = client.patient(patient_id).await?;
    let mut events = client.conditions(patient_id).await?;
    events.extend(client.medications(patient_id, since).await?);
    events.extend(client.observations(patient_id, since).await?);
    Ok(PatientHistory::assemble(&patient, &events, inference_time, windows))
}
