//! Virtual-time simulation: an in-process EMR and serving engine talking
//! over loopback HTTP, seeded order arrivals, scheduled label extraction.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use chrono::TimeDelta;
use deployr_core::cron::Schedule;
use deployr_core::drift::DriftSnapshot;
use deployr_core::metrics::{metric_report, LabeledSample, Window};
use deployr_core::model::{train_model, ModelBundle, TrainedModel};
use deployr_core::packet::{InferencePacket, Trigger, TriggerConfig};
use deployr_core::rng;
use deployr_core::warehouse::Warehouse;
use deployr_core::world::{generate_world, Panel, World};
use deployr_core::Timestamp;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::client::EmrClient;
use crate::clock::VirtualClock;
use crate::config::Config;
use crate::emr::{Emr, OrderEvent, WritebackTarget};
use crate::error::{Error, Result};
use crate::monitor::{
    baseline_snapshot, drift_windows, window_baseline, DriftBaseline, extract_labels, prospective_report, retrospective_samples, ExtractOutcome,
    MonitorReport, METRICS_FORMAT,
};
use crate::serve::ServeEngine;
use crate::store::{PacketFilter, PacketStore};

/// EMR and serving engine bound to loopback ports, sharing one virtual clock.
#[derive(Debug)]
pub struct Services {
    pub clock: VirtualClock,
    pub emr: Emr,
    pub client: EmrClient,
    pub engine: ServeEngine,
    tasks: Vec<tokio::task::JoinHandle<()>>,
}

impl Services {
    pub async fn start(world: World, store: Arc<PacketStore>, now: Timestamp) -> Result<Self> {
        let clock = VirtualClock::new(now);
        let emr = Emr::new(world, Arc::new(clock.clone()));
        let (emr_addr, emr_task) = emr.serve("127.0.0.1:0").await?;
        let client = EmrClient::new(&format!("http://{emr_addr}"));
        let engine = ServeEngine::new(client.clone(), store)?;
        let (_, engine_task) = engine.serve("127.0.0.1:0").await?;
        Ok(Self { clock, emr, client, engine, tasks: vec![emr_task, engine_task] })
    }
}

impl Drop for Services {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub time: Timestamp,
    pub patient_id: String,
}

/// Poisson arrivals at `rate_per_day` over `[start, start + duration)`,
/// each for a patient drawn the way the world draws its own orders.
/// Patients not yet registered at their arrival are skipped.
pub fn plan_arrivals(world: &World, start: Timestamp, duration: TimeDelta, rate_per_day: f64, seed: u64) -> Vec<Arrival> {
    let mut r = rng::stream(seed, "arrivals", 0);
    let mut out = Vec::new();
    if world.patients().is_empty() {
        return out;
    }
    let end = (start + duration).timestamp() as f64;
    let mut t = start.timestamp() as f64;
    loop {
        let gap: f64 = Exp1.sample(&mut r);
        t += gap * 86_400.0 / rate_per_day;
        if t >= end {
            break;
        }
        let time = deployr_core::time::from_unix(t as i64);
        let p = world.presenting_patient(&mut r, time);
        if world.patient(&p.patient_id, time).is_some() {
            out.push(Arrival { time, patient_id: p.patient_id.clone() });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Step {
    // Same-second ordering: extraction sees the state before new orders.
    Extract,
    Tick(usize),
    Order(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub start: Option<Timestamp>,
    pub end: Option<Timestamp>,
    pub orders_signed: u64,
    pub callbacks_attempted: u64,
    pub callbacks_delivered: u64,
    pub callbacks_failed: u64,
    pub ticks: u64,
    pub tick_packets: u64,
    pub packets: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub extraction_runs: u64,
    pub extraction_errors: usize,
    pub writebacks: BTreeMap<String, usize>,
    pub alerts: usize,
}

/// One simulation run over `[start, end)`.
#[derive(Debug, Clone)]
pub struct SimRun<'a> {
    pub panel: Panel,
    pub arrivals: &'a [Arrival],
    pub start: Timestamp,
    pub end: Timestamp,
    /// When the label extractor runs.
    pub extract: Schedule,
    pub maturation: TimeDelta,
    /// Real-time pacing: `Some(s)` sleeps between steps so that one wall
    /// second covers `s` virtual seconds. `None` runs as fast as possible.
    pub pace: Option<f64>,
}

/// Drive `services` through the run: sign each arrival's order, fire timer
/// deployments on their schedule, run the label extractor, then once more
/// at `end + maturation` so every order that can be labeled is. Signed
/// orders are appended to `order_log` when given.
pub async fn run_simulation(
    services: &Services,
    run: &SimRun<'_>,
    mut order_log: Option<&mut Vec<OrderEvent>>,
) -> Result<SimSummary> {
    let SimRun { panel, arrivals, start, end, ref extract, maturation, pace } = *run;
    let components: BTreeMap<String, String> = services
        .engine
        .deployments()
        .iter()
        .map(|d| (d.model_id.clone(), d.bundle.component_code.clone()))
        .collect();
    let timers: Vec<(String, Schedule)> = services
        .engine
        .deployments()
        .iter()
        .filter_map(|d| match &d.trigger.trigger {
            Trigger::Timer { cron, .. } => Some((d.model_id.clone(), cron.clone())),
            Trigger::Event { .. } => None,
        })
        .collect();

    let before = start - TimeDelta::seconds(1);
    let mut steps: Vec<(Timestamp, Step)> = arrivals.iter().enumerate().map(|(i, a)| (a.time, Step::Order(i))).collect();
    steps.extend(extract.firings(before, end - TimeDelta::seconds(1)).map(|t| (t, Step::Extract)));
    for (i, (_, cron)) in timers.iter().enumerate() {
        steps.extend(cron.firings(before, end - TimeDelta::seconds(1)).map(|t| (t, Step::Tick(i))));
    }
    steps.sort();

    let mut sum = SimSummary { start: Some(start), end: Some(end), ..Default::default() };
    let store = services.engine.store().clone();
    let extract_at = |t: Timestamp| {
        services.clock.set(t);
        let (store, client, components) = (store.clone(), services.client.clone(), components.clone());
        async move { extract_labels(&store, &client, &components, maturation, t).await }
    };
    let tally = |sum: &mut SimSummary, o: ExtractOutcome| {
        sum.extraction_runs += 1;
        sum.extraction_errors += o.errors;
    };

    let mut prev = start;
    for (t, step) in steps {
        if let Some(speed) = pace {
            let secs = (t - prev).num_milliseconds().max(0) as f64 / 1000.0 / speed;
            tokio::time::sleep(std::time::Duration::from_secs_f64(secs)).await;
        }
        prev = t;
        services.clock.set(t);
        match step {
            Step::Extract => {
                let o = extract_at(t).await?;
                tally(&mut sum, o);
            }
            Step::Tick(i) => {
                let out = services.engine.run_timer_tick(&timers[i].0, t).await?;
                sum.ticks += u64::from(out.fired);
                sum.tick_packets += out.packets.len() as u64;
            }
            Step::Order(i) => {
                let a = &arrivals[i];
                match services.emr.sign_order(&a.patient_id, panel, a.time).await {
                    Ok(signed) => {
                        if let Some(log) = order_log.as_deref_mut() {
                            log.push(OrderEvent {
                                patient_id: a.patient_id.clone(),
                                order_id: signed.order.order_id.clone(),
                                panel_code: panel,
                                order_time: a.time,
                            });
                        }
                    }
                    Err(e) => log::warn!("order for {} at {t} not signed: {e}", a.patient_id),
                }
            }
        }
    }
    let drain = end + maturation;
    let o = extract_at(drain).await?;
    tally(&mut sum, o);

    let stats = services.emr.stats();
    sum.orders_signed = stats.orders_signed;
    sum.callbacks_attempted = stats.callbacks_attempted;
    sum.callbacks_delivered = stats.callbacks_delivered;
    sum.callbacks_failed = stats.callbacks_failed;
    let packets = store.read_packets(&PacketFilter::default())?;
    sum.packets = packets.len();
    sum.labeled = packets.iter().filter(|p| p.label.is_some()).count();
    sum.unlabeled = sum.packets - sum.labeled;
    for target in WritebackTarget::ALL {
        sum.writebacks.insert(target.path().to_string(), services.emr.writeback_log(target).len());
    }
    sum.alerts = services.emr.alert_log().len();
    Ok(sum)
}

/// What training leaves behind for monitoring: the retrospective test set
/// as labeled samples and the drift baseline built from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrospective {
    pub format: String,
    pub model_id: String,
    pub threshold: f64,
    pub samples: Vec<LabeledSample>,
    pub baseline: DriftSnapshot,
}

pub const RETROSPECTIVE_FORMAT: &str = "deployr.retrospective/1";

impl Retrospective {
    pub fn from_trained(trained: &TrainedModel, warehouse: &Warehouse) -> Self {
        let id = &trained.bundle.model_id;
        Retrospective {
            format: RETROSPECTIVE_FORMAT.into(),
            model_id: id.clone(),
            threshold: trained.bundle.decision_threshold,
            samples: retrospective_samples(&trained.test, warehouse),
            baseline: baseline_snapshot(id, &trained.test),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Retrospective = read_json(path)?;
        if r.format != RETROSPECTIVE_FORMAT {
            return Err(Error::Integrity(format!("{}: unsupported format {}", path.display(), r.format)));
        }
        Ok(r)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Integrity(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), reason: e.to_string() })
}

/// Metric reports (retrospective, whole prospective window, then each drift
/// window) plus flagged drift snapshots.
pub fn build_monitor_report(
    cfg: &Config,
    bundle: &ModelBundle,
    retro: &Retrospective,
    packets: &[InferencePacket],
    window: Window,
) -> Result<MonitorReport> {
    let rc = &cfg.monitor.report;
    let id = &bundle.model_id;
    let mut reports = vec![metric_report(id, "retrospective", None, &retro.samples, bundle.decision_threshold, rc)?];
    reports.push(prospective_report(id, packets, window, bundle.decision_threshold, rc)?);
    let len = TimeDelta::days(cfg.monitor.drift_window_days);
    let baseline = match cfg.monitor.drift_baseline {
        DriftBaseline::Retrospective => retro.baseline.clone(),
        DriftBaseline::Windows { count } => window_baseline(id, packets, window.start, len, count),
    };
    let drift = drift_windows(
        id,
        packets,
        &baseline,
        window.start,
        window.end,
        len,
        cfg.monitor.drift_k,
        Some(&bundle.vocabulary),
    );
    Ok(MonitorReport {
        format: METRICS_FORMAT.into(),
        model_id: id.clone(),
        component_code: bundle.component_code.clone(),
        generated_at: window.end,
        reports,
        drift,
    })
}

/// Everything one end-to-end trial produced.
#[derive(Debug, Clone)]
pub struct Trial {
    pub trained: TrainedModel,
    pub retrospective: Retrospective,
    pub summary: SimSummary,
    pub packets: Vec<InferencePacket>,
    pub orders: Vec<OrderEvent>,
    pub report: MonitorReport,
}

impl Trial {
    pub fn retrospective_auroc(&self) -> f64 {
        self.report.reports[0].auroc.point
    }

    pub fn prospective_auroc(&self) -> f64 {
        self.report.reports[1].auroc.point
    }
}

/// Generate the world, train on the warehouse up to the prospective start,
/// deploy under `cfg.trigger`, simulate and report. `store_path` must not
/// hold packets from an earlier run.
pub async fn run_trial(cfg: &Config, store_path: &Path) -> Result<Trial> {
    cfg.validate()?;
    let world = generate_world(&cfg.world_with_drift())?;
    let start = cfg.sim_start();
    let end = cfg.sim_end();
    let warehouse = world.warehouse(start);
    let trained = train_model(&warehouse, &cfg.task, &cfg.train, start)?;
    let retrospective = Retrospective::from_trained(&trained, &warehouse);
    drop(warehouse);

    let arrivals = plan_arrivals(&world, start, cfg.sim.duration, cfg.sim.rate_per_day, cfg.sim.seed);
    let store = Arc::new(PacketStore::open(store_path)?);
    let services = Services::start(world, store.clone(), start).await?;
    services.engine.register_deployment(trained.bundle.clone(), cfg.trigger.clone()).await?;
    let extract = Schedule::parse(&cfg.monitor.extract_cron)?;
    let mut orders = Vec::new();
    let run = SimRun {
        panel: cfg.task.panel_code,
        arrivals: &arrivals,
        start,
        end,
        extract,
        maturation: cfg.monitor.maturation,
        pace: None,
    };
    let summary = run_simulation(&services, &run, Some(&mut orders)).await?;
    drop(services);

    let packets = store.read_packets(&PacketFilter::default())?;
    let report = build_monitor_report(cfg, &trained.bundle, &retrospective, &packets, Window { start, end })?;
    Ok(Trial { trained, retrospective, summary, packets, orders, report })
}

/// Rebuild the EMR a simulation ran against: the same world with the
/// logged orders signed again in order. Order ids must come out the same.
pub fn replay_world(cfg: &Config, orders: &[OrderEvent]) -> Result<World> {
    let mut world = generate_world(&cfg.world_with_drift())?;
    for o in orders {
        let placed = world.place_order(&o.patient_id, o.panel_code, o.order_time)?;
        if placed.order_id != o.order_id {
            return Err(Error::Integrity(format!(
                "order log replay diverged: expected {} but world assigned {}",
                o.order_id, placed.order_id
            )));
        }
    }
    Ok(world)
}

/// One-line description of a trigger for CLI output.
pub fn describe_trigger(t: &TriggerConfig) -> String {
    match &t.trigger {
        Trigger::Event { panel_code } => format!("event: {} order signed", panel_code.as_str()),
        Trigger::Timer { cron, unit_id } => format!("timer: `{}` on {unit_id}", cron.expr()),
    }
}
