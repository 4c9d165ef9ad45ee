//! Simulated EMR service: the transactional read API, order signature with
//! webhook dispatch, write-back logs and the alert log.
//!
//! All mutations go through one `RwLock` writer; reads take a snapshot under
//! the read lock and filter by the injected clock.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use deployr_core::time::parse_rfc3339;
use deployr_core::world::{DiagnosticOrder, EventKind, Panel, World};
use deployr_core::Timestamp;
use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WritebackTarget {
    Score,
    Flowsheet,
    Inbasket,
}

impl WritebackTarget {
    pub const ALL: [WritebackTarget; 3] = [WritebackTarget::Score, WritebackTarget::Flowsheet, WritebackTarget::Inbasket];

    pub fn path(self) -> &'static str {
        match self {
            WritebackTarget::Score => "score",
            WritebackTarget::Flowsheet => "flowsheet",
            WritebackTarget::Inbasket => "inbasket",
        }
    }

    pub fn from_path(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.path() == s)
    }
}

/// Read and write endpoints that can be switched off by tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Endpoint {
    Patient,
    Condition,
    MedicationRequest,
    Observation,
    UnitRoster,
    Writeback(WritebackTarget),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WritebackPayload {
    pub packet_id: String,
    pub patient_id: String,
    pub model_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WritebackEntry {
    pub received_at: Timestamp,
    pub payload: WritebackPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriptionRequest {
    pub panel_code: Panel,
    pub callback_url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub subscription_id: String,
    pub panel_code: Panel,
    pub callback_url: String,
}

/// Body POSTed to a subscriber when a matching order is signed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderEvent {
    pub patient_id: String,
    pub order_id: String,
    pub panel_code: Panel,
    pub order_time: Timestamp,
}

/// An alert document returned by a subscriber, i.e. a displayed BPA.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub received_at: Timestamp,
    pub subscription_id: String,
    pub order_id: String,
    pub body: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchStats {
    pub orders_signed: u64,
    pub callbacks_attempted: u64,
    /// Callbacks answered with a 2xx status.
    pub callbacks_delivered: u64,
    pub callbacks_failed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub subscription_id: String,
    pub status: Option<u16>,
    pub alert: bool,
}

#[derive(Debug, Clone)]
pub struct SignedOrder {
    pub order: DiagnosticOrder,
    pub deliveries: Vec<Delivery>,
}

#[derive(Debug)]
struct EmrState {
    world: World,
    subscriptions: Vec<Subscription>,
    writebacks: BTreeMap<WritebackTarget, Vec<WritebackEntry>>,
    alerts: Vec<AlertRecord>,
    down: BTreeSet<Endpoint>,
    hidden_patients: BTreeSet<String>,
    stats: DispatchStats,
}

#[derive(Debug)]
struct Inner {
    state: RwLock<EmrState>,
    clock: SharedClock,
    http: reqwest::Client,
}

/// Handle to the simulated EMR; cheap to clone.
#[derive(Debug, Clone)]
pub struct Emr(Arc<Inner>);

impl Emr {
    pub fn new(world: World, clock: SharedClock) -> Self {
        let state = EmrState {
            world,
            subscriptions: Vec::new(),
            writebacks: WritebackTarget::ALL.into_iter().map(|t| (t, Vec::new())).collect(),
            alerts: Vec::new(),
            down: BTreeSet::new(),
            hidden_patients: BTreeSet::new(),
            stats: DispatchStats::default(),
        };
        Emr(Arc::new(Inner { state: RwLock::new(state), clock, http: reqwest::Client::new() }))
    }

    pub fn now(&self) -> Timestamp {
        self.0.clock.now()
    }

    pub fn clock(&self) -> &SharedClock {
        &self.0.clock
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, EmrState> {
        self.0.state.read().expect("emr state poisoned")
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, EmrState> {
        self.0.state.write().expect("emr state poisoned")
    }

    /// Run `f` against the world under the read lock.
    pub fn with_world<T>(&self, f: impl FnOnce(&World) -> T) -> T {
        f(&self.read().world)
    }

    pub fn set_endpoint_down(&self, endpoint: Endpoint, down: bool) {
        let mut s = self.write();
        if down {
            s.down.insert(endpoint);
        } else {
            s.down.remove(&endpoint);
        }
    }

    /// Make every read for `patient_id` answer 404.
    pub fn hide_patient(&self, patient_id: &str) {
        self.write().hidden_patients.insert(patient_id.to_string());
    }

    pub fn withhold_results(&self, order_id: &str) -> Result<()> {
        Ok(self.write().world.withhold_results(order_id)?)
    }

    pub fn subscribe(&self, req: SubscriptionRequest) -> Subscription {
        let mut s = self.write();
        let sub = Subscription {
            subscription_id: format!("SUB{:04}", s.subscriptions.len() + 1),
            panel_code: req.panel_code,
            callback_url: req.callback_url,
        };
        s.subscriptions.push(sub.clone());
        sub
    }

    pub fn subscriptions(&self) -> Vec<Subscription> {
        self.read().subscriptions.clone()
    }

    pub fn writeback_log(&self, target: WritebackTarget) -> Vec<WritebackEntry> {
        self.read().writebacks[&target].clone()
    }

    pub fn alert_log(&self) -> Vec<AlertRecord> {
        self.read().alerts.clone()
    }

    pub fn stats(&self) -> DispatchStats {
        self.read().stats
    }

    fn check(&self, s: &EmrState, endpoint: Endpoint, patient_id: Option<&str>) -> Result<()> {
        if s.down.contains(&endpoint) {
            return Err(Error::Unavailable(format!("{endpoint:?} endpoint is down")));
        }
        if let Some(p) = patient_id {
            if s.hidden_patients.contains(p) || s.world.patient(p, self.now()).is_none() {
                return Err(Error::NotFound(format!("patient {p}")));
            }
        }
        Ok(())
    }

    pub fn apply_writeback(&self, target: WritebackTarget, payload: WritebackPayload) -> Result<WritebackEntry> {
        let mut s = self.write();
        self.check(&s, Endpoint::Writeback(target), Some(&payload.patient_id))?;
        let entry = WritebackEntry { received_at: self.now(), payload };
        s.writebacks.get_mut(&target).expect("all targets present").push(entry.clone());
        Ok(entry)
    }

    /// Persist a new order, then POST it to every matching subscriber in
    /// subscription order. Delivery is at most once: a failed callback is
    /// logged and not retried.
    pub async fn sign_order(&self, patient_id: &str, panel: Panel, time: Timestamp) -> Result<SignedOrder> {
        let (order, targets) = {
            let mut s = self.write();
            if s.hidden_patients.contains(patient_id) {
                return Err(Error::NotFound(format!("patient {patient_id}")));
            }
            let order = s.world.place_order(patient_id, panel, time)?;
            let targets: Vec<Subscription> = s.subscriptions.iter().filter(|x| x.panel_code == panel).cloned().collect();
            s.stats.orders_signed += 1;
            s.stats.callbacks_attempted += targets.len() as u64;
            (order, targets)
        };
        let event = OrderEvent {
            patient_id: order.patient_id.clone(),
            order_id: order.order_id.clone(),
            panel_code: panel,
            order_time: order.order_time,
        };
        let mut deliveries = Vec::with_capacity(targets.len());
        for sub in targets {
            let outcome = self.0.http.post(&sub.callback_url).json(&event).send().await;
            let (status, body) = match outcome {
                Ok(resp) => {
                    let status = resp.status();
                    let body = resp.text().await.unwrap_or_default();
                    (Some(status), body)
                }
                Err(e) => {
                    log::warn!("callback to {} failed: {e}", sub.callback_url);
                    (None, String::new())
                }
            };
            let ok = status.is_some_and(|s| s.is_success());
            let alert = ok && body.trim_start().starts_with("<alert");
            {
                let mut s = self.write();
                if ok {
                    s.stats.callbacks_delivered += 1;
                } else {
                    s.stats.callbacks_failed += 1;
                }
                if alert {
                    s.alerts.push(AlertRecord {
                        received_at: self.now(),
                        subscription_id: sub.subscription_id.clone(),
                        order_id: order.order_id.clone(),
                        body,
                    });
                }
            }
            deliveries.push(Delivery { subscription_id: sub.subscription_id, status: status.map(|s| s.as_u16()), alert });
        }
        Ok(SignedOrder { order, deliveries })
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/Patient/{id}", get(get_patient))
            .route("/Condition", get(get_conditions))
            .route("/MedicationRequest", get(get_medications))
            .route("/Observation", get(get_observations))
            .route("/Unit/{id}/patients", get(get_roster))
            .route("/Subscription", post(post_subscription))
            .route("/writeback/{target}", post(post_writeback).get(get_writeback))
            .route("/alerts", get(get_alerts))
            .route("/orders", post(post_order))
            .with_state(self.clone())
    }

    /// Serve on `addr` (port 0 picks a free port) in a background task.
    pub async fn serve(&self, addr: &str) -> Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
        serve_router(self.router(), addr).await
    }
}

pub async fn serve_router(router: Router, addr: &str) -> Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(addr, e))?;
    let local = listener.local_addr().map_err(|e| Error::io(addr, e))?;
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router).await {
            log::error!("server on {local} stopped: {e}");
        }
    });
    Ok((local, handle))
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NotFound(_) | Error::Core(deployr_core::Error::PatientNotFound(_)) | Error::Core(deployr_core::Error::OrderNotFound(_)) => {
                StatusCode::NOT_FOUND
            }
            Error::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            Error::BadRequest(_) | Error::Core(deployr_core::Error::InvalidInput(_)) => StatusCode::BAD_REQUEST,
            Error::Conflict(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

type Params = Query<HashMap<String, String>>;
type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

fn param<'a>(q: &'a HashMap<String, String>, name: &str) -> std::result::Result<&'a str, ApiError> {
    q.get(name)
        .map(String::as_str)
        .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, format!("missing query parameter `{name}`")))
}

fn since(q: &HashMap<String, String>) -> std::result::Result<Option<Timestamp>, ApiError> {
    q.get("since")
        .map(|s| parse_rfc3339(s).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string())))
        .transpose()
}

async fn get_patient(State(emr): State<Emr>, Path(id): Path<String>) -> ApiResult<deployr_core::warehouse::PatientRow> {
    let s = emr.read();
    emr.check(&s, Endpoint::Patient, Some(&id))?;
    let p = s.world.patient(&id, emr.now()).ok_or_else(|| Error::NotFound(format!("patient {id}")))?;
    Ok(Json(p.row()))
}

fn events(emr: &Emr, endpoint: Endpoint, kind: EventKind, q: &HashMap<String, String>) -> ApiResult<Vec<deployr_core::world::ClinicalEvent>> {
    let patient = param(q, "patient")?;
    let since = since(q)?;
    let s = emr.read();
    emr.check(&s, endpoint, Some(patient))?;
    Ok(Json(s.world.events(patient, kind, since, emr.now()).map_err(Error::from)?))
}

async fn get_conditions(State(emr): State<Emr>, Query(q): Params) -> ApiResult<Vec<deployr_core::world::ClinicalEvent>> {
    events(&emr, Endpoint::Condition, EventKind::Condition, &q)
}

async fn get_medications(State(emr): State<Emr>, Query(q): Params) -> ApiResult<Vec<deployr_core::world::ClinicalEvent>> {
    events(&emr, Endpoint::MedicationRequest, EventKind::Medication, &q)
}

/// Either a patient's lab stream (`patient`, `since`) or the result of one
/// order component (`order`, `component`), returned as a list of 0 or 1.
async fn get_observations(State(emr): State<Emr>, Query(q): Params) -> Response {
    if q.contains_key("order") {
        let r = (|| -> ApiResult<Vec<deployr_core::world::LabResult>> {
            let order = param(&q, "order")?;
            let component = param(&q, "component")?;
            let s = emr.read();
            emr.check(&s, Endpoint::Observation, None)?;
            let r = s.world.result(order, component, emr.now()).map_err(Error::from)?;
            Ok(Json(r.into_iter().collect()))
        })();
        return r.into_response();
    }
    events(&emr, Endpoint::Observation, EventKind::LabResult, &q).into_response()
}

async fn get_roster(State(emr): State<Emr>, Path(unit): Path<String>) -> ApiResult<Vec<String>> {
    let s = emr.read();
    emr.check(&s, Endpoint::UnitRoster, None)?;
    Ok(Json(s.world.unit_roster(&unit, emr.now())))
}

async fn post_subscription(State(emr): State<Emr>, Json(req): Json<SubscriptionRequest>) -> ApiResult<Subscription> {
    Ok(Json(emr.subscribe(req)))
}

fn target(s: &str) -> std::result::Result<WritebackTarget, ApiError> {
    WritebackTarget::from_path(s).ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, format!("unknown write-back target `{s}`")))
}

async fn post_writeback(State(emr): State<Emr>, Path(t): Path<String>, Json(payload): Json<WritebackPayload>) -> ApiResult<WritebackEntry> {
    let t = target(&t)?;
    Ok(Json(emr.apply_writeback(t, payload)?))
}

async fn get_writeback(State(emr): State<Emr>, Path(t): Path<String>) -> ApiResult<Vec<WritebackEntry>> {
    Ok(Json(emr.writeback_log(target(&t)?)))
}

async fn get_alerts(State(emr): State<Emr>) -> ApiResult<Vec<AlertRecord>> {
    Ok(Json(emr.alert_log()))
}

#[derive(Debug, Deserialize)]
struct NewOrder {
    patient_id: String,
    panel_code: Panel,
}

/// Sign an order at the current clock time.
async fn post_order(State(emr): State<Emr>, Json(req): Json<NewOrder>) -> ApiResult<DiagnosticOrder> {
    let now = emr.now();
    Ok(Json(emr.sign_order(&req.patient_id, req.panel_code, now).await?.order))
}
