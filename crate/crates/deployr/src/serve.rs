//! Deployment runtime: event and timer triggers feeding the
//! fetch → featurize → infer → route → append pipeline.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use deployr_core::arm::{Arm, ArmSequence};
use deployr_core::cron::Schedule;
use deployr_core::model::ModelBundle;
use deployr_core::packet::{InferencePacket, Mode, Route, RouteAction, Trigger, TriggerConfig};
use deployr_core::Timestamp;
use serde::{Deserialize, Serialize};

use crate::client::{fetch_history_transactional, EmrClient};
use crate::emr::{OrderEvent, WritebackPayload, WritebackTarget};
use crate::error::{Error, Result};
use crate::store::{PacketFilter, PacketStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Active,
    Paused,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentStats {
    pub packets: u64,
    pub fetch_errors: u64,
    pub model_errors: u64,
    pub store_errors: u64,
    pub route_failures: u64,
    pub ticks_fired: u64,
    pub ticks_skipped: u64,
    pub rejected_paused: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Handle {
    Subscription(String),
    Schedule(Schedule),
}

#[derive(Debug)]
pub struct Deployment {
    pub model_id: String,
    pub bundle: ModelBundle,
    pub trigger: TriggerConfig,
    pub endpoint: String,
    handle: Mutex<Option<Handle>>,
    /// `true` while paused. Pipelines hold the read side for their whole
    /// run, so taking the write side waits out in-flight inferences.
    gate: tokio::sync::RwLock<bool>,
    arms: Mutex<ArmSequence>,
    stats: Mutex<DeploymentStats>,
}

impl Deployment {
    pub fn stats(&self) -> DeploymentStats {
        *self.stats.lock().unwrap()
    }

    pub fn handle(&self) -> Option<Handle> {
        self.handle.lock().unwrap().clone()
    }

    pub async fn status(&self) -> Status {
        if *self.gate.read().await {
            Status::Paused
        } else {
            Status::Active
        }
    }

    fn bump(&self, f: impl FnOnce(&mut DeploymentStats)) {
        f(&mut self.stats.lock().unwrap());
    }
}

/// What a pipeline run produced.
#[derive(Debug, Clone)]
pub struct Inference {
    pub packet: InferencePacket,
    pub alert: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct TickOutcome {
    pub fired: bool,
    pub roster_failed: bool,
    pub packets: Vec<InferencePacket>,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub packet_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub arm: Arm,
}

#[derive(Debug)]
struct Inner {
    emr: EmrClient,
    store: Arc<PacketStore>,
    public_url: Mutex<Option<String>>,
    deployments: Mutex<BTreeMap<String, Arc<Deployment>>>,
    next_packet: AtomicU64,
}

#[derive(Debug, Clone)]
pub struct ServeEngine(Arc<Inner>);

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;").replace('\'', "&apos;")
}

pub fn alert_document(model_id: &str, score: f64, threshold: f64, message: &str) -> String {
    format!(
        "<alert><model_id>{}</model_id><score>{score}</score><threshold>{threshold}</threshold><message>{}</message></alert>",
        xml_escape(model_id),
        xml_escape(message)
    )
}

impl ServeEngine {
    /// New engine over `store`. Packet numbering continues after the
    /// packets already in the store.
    pub fn new(emr: EmrClient, store: Arc<PacketStore>) -> Result<Self> {
        let existing = store.read_packets(&PacketFilter::default())?.len() as u64;
        Ok(ServeEngine(Arc::new(Inner {
            emr,
            store,
            public_url: Mutex::new(None),
            deployments: Mutex::new(BTreeMap::new()),
            next_packet: AtomicU64::new(existing),
        })))
    }

    pub fn store(&self) -> &Arc<PacketStore> {
        &self.0.store
    }

    pub fn emr(&self) -> &EmrClient {
        &self.0.emr
    }

    /// Base URL the EMR should call back on.
    pub fn set_public_url(&self, url: &str) {
        *self.0.public_url.lock().unwrap() = Some(url.trim_end_matches('/').to_string());
    }

    pub fn deployment(&self, model_id: &str) -> Option<Arc<Deployment>> {
        self.0.deployments.lock().unwrap().get(model_id).cloned()
    }

    pub fn deployments(&self) -> Vec<Arc<Deployment>> {
        self.0.deployments.lock().unwrap().values().cloned().collect()
    }

    /// Expose `bundle` behind `trigger`. Event triggers subscribe with the
    /// EMR; timer triggers check that the unit roster is reachable. Either
    /// failure leaves nothing registered.
    pub async fn register_deployment(&self, bundle: ModelBundle, trigger: TriggerConfig) -> Result<Arc<Deployment>> {
        bundle.validate()?;
        trigger.validate()?;
        let model_id = bundle.model_id.clone();
        if let Trigger::Event { panel_code } = &trigger.trigger {
            if *panel_code != bundle.panel_code {
                return Err(Error::Config(format!(
                    "event trigger panel {} does not match model panel {}",
                    panel_code.as_str(),
                    bundle.panel_code.as_str()
                )));
            }
        }
        let endpoint = format!("/models/{model_id}/infer");
        let drawn = self.0.store.read_packets(&PacketFilter::model(&model_id))?.len() as u64;
        let dep = Arc::new(Deployment {
            model_id: model_id.clone(),
            arms: Mutex::new(ArmSequence::resume(trigger.rng_seed, trigger.randomization_p, drawn)),
            bundle,
            trigger,
            endpoint: endpoint.clone(),
            handle: Mutex::new(None),
            gate: tokio::sync::RwLock::new(false),
            stats: Mutex::new(DeploymentStats::default()),
        });
        {
            let mut map = self.0.deployments.lock().unwrap();
            if map.contains_key(&model_id) {
                return Err(Error::Conflict(format!("model {model_id} is already deployed")));
            }
            map.insert(model_id.clone(), dep.clone());
        }
        let handle = match &dep.trigger.trigger {
            Trigger::Event { panel_code } => {
                let base = self.0.public_url.lock().unwrap().clone();
                let sub = match base {
                    Some(base) => self.0.emr.subscribe(*panel_code, &format!("{base}{endpoint}")).await,
                    None => Err(Error::Config("serve engine has no public URL for callbacks".into())),
                };
                sub.map(|s| Handle::Subscription(s.subscription_id))
            }
            Trigger::Timer { cron, unit_id } => self.0.emr.unit_roster(unit_id).await.map(|_| Handle::Schedule(cron.clone())),
        };
        match handle {
            Ok(h) => {
                *dep.handle.lock().unwrap() = Some(h);
                Ok(dep)
            }
            Err(e) => {
                self.0.deployments.lock().unwrap().remove(&model_id);
                Err(e)
            }
        }
    }

    /// Stop new inferences. Returns once every in-flight pipeline finished.
    pub async fn pause(&self, model_id: &str) -> Result<()> {
        let dep = self.deployment(model_id).ok_or_else(|| Error::NotFound(format!("model {model_id}")))?;
        *dep.gate.write().await = true;
        Ok(())
    }

    pub async fn resume(&self, model_id: &str) -> Result<()> {
        let dep = self.deployment(model_id).ok_or_else(|| Error::NotFound(format!("model {model_id}")))?;
        *dep.gate.write().await = false;
        Ok(())
    }

    /// One full pipeline run. Either a packet is appended or an error is
    /// returned and nothing is stored.
    pub async fn infer(&self, dep: &Deployment, patient_id: &str, order_id: Option<&str>, inference_time: Timestamp) -> Result<Inference> {
        let gate = dep.gate.read().await;
        if *gate {
            dep.bump(|s| s.rejected_paused += 1);
            return Err(Error::Paused(dep.model_id.clone()));
        }
        let windows = dep.bundle.vocabulary.windows();
        let history = match fetch_history_transactional(&self.0.emr, patient_id, inference_time, windows).await {
            Ok(h) => h,
            Err(e) => {
                dep.bump(|s| s.fetch_errors += 1);
                return Err(match e {
                    Error::NotFound(m) => Error::Unavailable(format!("feature source: {m} not found")),
                    other => Error::Unavailable(format!("feature source: {other}")),
                });
            }
        };
        let scored = dep.bundle.score_history(&history).inspect_err(|_| dep.bump(|s| s.model_errors += 1))?;
        let (arm, arm_draw) = dep.arms.lock().unwrap().assign();
        let packet_id = format!("PKT{:08}", self.0.next_packet.fetch_add(1, Ordering::SeqCst) + 1);

        let mut routed = Vec::new();
        let mut alert = None;
        for &route in dep.trigger.active_routes(arm) {
            let target = match route {
                Route::Alert => {
                    let above = scored.score >= dep.bundle.decision_threshold;
                    let message = format!(
                        "{} {} result predicted {}",
                        dep.bundle.panel_code.as_str(),
                        dep.bundle.component_code,
                        if above { "abnormal" } else { "normal" }
                    );
                    alert = Some(alert_document(&dep.model_id, scored.score, dep.bundle.decision_threshold, &message));
                    routed.push(RouteAction { route, ok: true });
                    continue;
                }
                Route::ScoreColumn => WritebackTarget::Score,
                Route::Flowsheet => WritebackTarget::Flowsheet,
                Route::Inbasket => WritebackTarget::Inbasket,
            };
            let payload = WritebackPayload {
                packet_id: packet_id.clone(),
                patient_id: patient_id.to_string(),
                model_id: dep.model_id.clone(),
                score: scored.score,
                message: (route == Route::Inbasket).then(|| {
                    format!("{} risk score {:.3} for {}", dep.bundle.component_code, scored.score, order_id.unwrap_or("scheduled review"))
                }),
            };
            let ok = match self.0.emr.writeback(target, &payload).await {
                Ok(_) => true,
                Err(e) => {
                    log::warn!("{}: {route:?} write-back failed: {e}", dep.model_id);
                    dep.bump(|s| s.route_failures += 1);
                    false
                }
            };
            routed.push(RouteAction { route, ok });
        }

        let packet = InferencePacket {
            packet_id,
            model_id: dep.model_id.clone(),
            patient_id: patient_id.to_string(),
            order_id: order_id.map(str::to_string),
            inference_time,
            features: scored.features.vector,
            oov_count: scored.features.oov_count,
            score: scored.score,
            arm,
            arm_draw,
            mode: dep.trigger.mode,
            routed,
            label: None,
            label_time: None,
            attributes: None,
        };
        self.0.store.append_packet(&packet).inspect_err(|_| dep.bump(|s| s.store_errors += 1))?;
        dep.bump(|s| s.packets += 1);
        drop(gate);
        Ok(Inference { packet, alert })
    }

    /// Handle one order-signature callback.
    pub async fn handle_event(&self, model_id: &str, event: &OrderEvent) -> Result<Inference> {
        let dep = self.deployment(model_id).ok_or_else(|| Error::NotFound(format!("model {model_id}")))?;
        match &dep.trigger.trigger {
            Trigger::Event { panel_code } if *panel_code == event.panel_code => {}
            _ => return Err(Error::BadRequest(format!("model {model_id} does not accept {} orders", event.panel_code.as_str()))),
        }
        self.infer(&dep, &event.patient_id, Some(&event.order_id), event.order_time).await
    }

    /// Run a timer deployment's batch if its schedule fires at `now`.
    pub async fn run_timer_tick(&self, model_id: &str, now: Timestamp) -> Result<TickOutcome> {
        let dep = self.deployment(model_id).ok_or_else(|| Error::NotFound(format!("model {model_id}")))?;
        let Trigger::Timer { cron, unit_id } = &dep.trigger.trigger else {
            return Err(Error::BadRequest(format!("model {model_id} has no timer trigger")));
        };
        let mut out = TickOutcome::default();
        if !cron.matches(now) {
            return Ok(out);
        }
        out.fired = true;
        dep.bump(|s| s.ticks_fired += 1);
        let roster = match self.0.emr.unit_roster(unit_id).await {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{model_id}: roster fetch for {unit_id} failed, tick skipped: {e}");
                dep.bump(|s| s.ticks_skipped += 1);
                out.roster_failed = true;
                return Ok(out);
            }
        };
        for patient in roster {
            match self.infer(&dep, &patient, None, now).await {
                Ok(inf) => out.packets.push(inf.packet),
                Err(e) => {
                    log::warn!("{model_id}: {patient} skipped: {e}");
                    out.errors += 1;
                }
            }
        }
        Ok(out)
    }

    /// Fire every timer deployment at each of its schedule times in
    /// `(from, to]`, in time order.
    pub async fn run_due_ticks(&self, from: Timestamp, to: Timestamp) -> Result<Vec<TickOutcome>> {
        let mut due: Vec<(Timestamp, String)> = Vec::new();
        for dep in self.deployments() {
            if let Trigger::Timer { cron, .. } = &dep.trigger.trigger {
                due.extend(cron.firings(from, to).map(|t| (t, dep.model_id.clone())));
            }
        }
        due.sort();
        let mut out = Vec::with_capacity(due.len());
        for (t, id) in due {
            out.push(self.run_timer_tick(&id, t).await?);
        }
        Ok(out)
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/models", get(list_models))
            .route("/models/{id}/infer", post(post_infer))
            .route("/models/{id}/pause", post(post_pause))
            .route("/models/{id}/resume", post(post_resume))
            .with_state(self.clone())
    }

    /// Serve on `addr` and point callbacks at the bound address.
    pub async fn serve(&self, addr: &str) -> Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
        let (local, handle) = crate::emr::serve_router(self.router(), addr).await?;
        self.set_public_url(&format!("http://{local}"));
        Ok((local, handle))
    }
}

fn error_response(e: Error) -> Response {
    let code = match &e {
        Error::NotFound(_) => StatusCode::NOT_FOUND,
        Error::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        Error::BadRequest(_) => StatusCode::BAD_REQUEST,
        Error::Paused(_) | Error::Conflict(_) => StatusCode::CONFLICT,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    if code == StatusCode::INTERNAL_SERVER_ERROR {
        log::error!("inference failed: {e}");
    }
    (code, Json(serde_json::json!({ "error": e.to_string() }))).into_response()
}

async fn post_infer(State(engine): State<ServeEngine>, Path(id): Path<String>, Json(event): Json<OrderEvent>) -> Response {
    match engine.handle_event(&id, &event).await {
        Ok(Inference { alert: Some(xml), .. }) => ([(header::CONTENT_TYPE, "application/xml; charset=utf-8")], xml).into_response(),
        Ok(Inference { packet, .. }) => {
            let score = (packet.mode != Mode::Silent).then_some(packet.score);
            Json(Ack { packet_id: packet.packet_id, score, arm: packet.arm }).into_response()
        }
        Err(e) => error_response(e),
    }
}

#[derive(Debug, Serialize)]
struct DeploymentView {
    model_id: String,
    endpoint: String,
    status: Status,
    trigger: TriggerConfig,
    stats: DeploymentStats,
}

async fn list_models(State(engine): State<ServeEngine>) -> Json<Vec<DeploymentView>> {
    let mut out = Vec::new();
    for d in engine.deployments() {
        out.push(DeploymentView {
            model_id: d.model_id.clone(),
            endpoint: d.endpoint.clone(),
            status: d.status().await,
            trigger: d.trigger.clone(),
            stats: d.stats(),
        });
    }
    Json(out)
}

async fn post_pause(State(engine): State<ServeEngine>, Path(id): Path<String>) -> Response {
    match engine.pause(&id).await {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => error_response(e),
    }
}

async fn post_resume(State(engine): State<ServeEngine>, Path(id): Path<String>) -> Response {
    match engine.resume(&id).await {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => error_response(e),
    }
}
