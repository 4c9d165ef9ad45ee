//! Label extraction and assembly of metric and drift reports.

use std::collections::BTreeMap;

use chrono::TimeDelta;
use deployr_core::drift::{drift_flag, drift_snapshot, DriftSnapshot, Observation};
use deployr_core::features::Vocabulary;
use deployr_core::metrics::{metric_report, LabeledSample, MetricReport, ReportConfig, Window};
use deployr_core::model::ScoredRow;
use deployr_core::packet::{InferencePacket, LabelUpdate, SubgroupAttributes};
use deployr_core::time::{self, age_years};
use deployr_core::warehouse::{PatientRow, Warehouse, WarehouseIndex};
use deployr_core::Timestamp;
use serde::{Deserialize, Serialize};

use crate::client::EmrClient;
use crate::error::Result;
use crate::store::{PacketFilter, PacketStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    /// How long after inference a label may exist.
    #[serde(with = "deployr_core::time::delta_secs")]
    pub maturation: TimeDelta,
    pub drift_k: f64,
    pub drift_window_days: i64,
    pub drift_baseline: DriftBaseline,
    pub report: ReportConfig,
    /// When the label extractor runs during a simulation.
    pub extract_cron: String,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            maturation: TimeDelta::hours(2),
            drift_k: deployr_core::drift::DEFAULT_K,
            drift_window_days: 15,
            drift_baseline: DriftBaseline::default(),
            report: ReportConfig::default(),
            extract_cron: "0 */6 * * *".to_string(),
        }
    }
}

/// What prospective drift windows are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DriftBaseline {
    /// The retrospective test set. Picks up slow drift between the test
    /// years and deployment as well.
    Retrospective,
    /// The first `count` prospective windows.
    Windows { count: usize },
}

impl Default for DriftBaseline {
    fn default() -> Self {
        DriftBaseline::Windows { count: 1 }
    }
}

pub fn attributes(patient: &PatientRow, at: Timestamp) -> SubgroupAttributes {
    SubgroupAttributes {
        sex: patient.sex,
        race: patient.race,
        age_over_40: age_years(patient.birth_date, at) > 40.0,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractOutcome {
    pub labeled: usize,
    /// Matured packets whose result is not available yet.
    pub pending: usize,
    /// Packets not yet past the maturation window.
    pub immature: usize,
    /// Packets without an order or with an unknown model.
    pub unlabelable: usize,
    pub errors: usize,
}

/// Pair every matured, unlabeled packet with its order result. Running it
/// again with nothing new to find appends nothing.
pub async fn extract_labels(
    store: &PacketStore,
    emr: &EmrClient,
    components: &BTreeMap<String, String>,
    maturation: TimeDelta,
    now: Timestamp,
) -> Result<ExtractOutcome> {
    let mut out = ExtractOutcome::default();
    for p in store.read_packets(&PacketFilter::default())? {
        if p.label.is_some() {
            continue;
        }
        let (Some(order_id), Some(component)) = (&p.order_id, components.get(&p.model_id)) else {
            out.unlabelable += 1;
            continue;
        };
        if p.inference_time + maturation > now {
            out.immature += 1;
            continue;
        }
        let result = match emr.result(order_id, component).await {
            Ok(Some(r)) => r,
            Ok(None) => {
                out.pending += 1;
                continue;
            }
            Err(e) => {
                log::warn!("label lookup for {} failed: {e}", p.packet_id);
                out.errors += 1;
                continue;
            }
        };
        let patient = match emr.patient(&p.patient_id).await {
            Ok(row) => row,
            Err(e) => {
                log::warn!("demographics for {} failed: {e}", p.packet_id);
                out.errors += 1;
                continue;
            }
        };
        store.append_label(&LabelUpdate {
            packet_id: p.packet_id.clone(),
            label: result.abnormal,
            label_time: result.result_time,
            attributes: attributes(&patient, p.inference_time),
        })?;
        out.labeled += 1;
    }
    Ok(out)
}

pub fn packet_samples(packets: &[InferencePacket]) -> Vec<LabeledSample> {
    packets
        .iter()
        .filter_map(|p| {
            Some(LabeledSample {
                packet_id: p.packet_id.clone(),
                score: p.score,
                label: p.label?,
                inference_time: p.inference_time,
                attributes: p.attributes.clone()?,
                weight: 1.0,
            })
        })
        .collect()
}

/// Retrospective test-set rows as samples, demographics from the warehouse.
pub fn retrospective_samples(rows: &[ScoredRow], warehouse: &Warehouse) -> Vec<LabeledSample> {
    let idx = WarehouseIndex::new(warehouse);
    rows.iter()
        .filter_map(|s| {
            let patient = idx.patient(&s.row.patient_id)?;
            Some(LabeledSample {
                packet_id: s.row.order_id.clone(),
                score: s.score,
                label: s.row.label,
                inference_time: s.row.inference_time,
                attributes: attributes(patient, s.row.inference_time),
                weight: 1.0,
            })
        })
        .collect()
}

pub fn baseline_snapshot(model_id: &str, rows: &[ScoredRow]) -> DriftSnapshot {
    let window = rows.first().zip(rows.last()).map(|(a, b)| Window {
        start: a.row.inference_time,
        end: b.row.inference_time + TimeDelta::seconds(1),
    });
    drift_snapshot(
        model_id,
        window,
        rows.iter().map(|s| Observation { features: &s.features.vector, score: s.score, label: Some(s.row.label) }),
    )
}

/// Baseline over the packets in `[start, start + count * len)`.
pub fn window_baseline(model_id: &str, packets: &[InferencePacket], start: Timestamp, len: TimeDelta, count: usize) -> DriftSnapshot {
    let w = Window { start, end: start + len * count as i32 };
    let obs = packets
        .iter()
        .filter(|p| p.model_id == model_id && p.inference_time >= w.start && p.inference_time < w.end)
        .map(|p| Observation { features: &p.features, score: p.score, label: p.label });
    drift_snapshot(model_id, Some(w), obs)
}

/// Consecutive windows of `len` from `start` to `end`, each snapshot
/// flagged against `baseline`.
pub fn drift_windows(
    model_id: &str,
    packets: &[InferencePacket],
    baseline: &DriftSnapshot,
    start: Timestamp,
    end: Timestamp,
    len: TimeDelta,
    k: f64,
    vocab: Option<&Vocabulary>,
) -> Vec<DriftSnapshot> {
    let mut out = Vec::new();
    let mut t = start;
    while t < end {
        let w = Window { start: t, end: (t + len).min(end) };
        let obs = packets
            .iter()
            .filter(|p| p.model_id == model_id && p.inference_time >= w.start && p.inference_time < w.end)
            .map(|p| Observation { features: &p.features, score: p.score, label: p.label });
        let mut snap = drift_snapshot(model_id, Some(w), obs);
        snap.flags = drift_flag(&snap, baseline, k, vocab);
        out.push(snap);
        t = w.end;
    }
    out
}

/// Full monitoring output for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorReport {
    pub format: String,
    pub model_id: String,
    pub component_code: String,
    pub generated_at: Timestamp,
    pub reports: Vec<MetricReport>,
    pub drift: Vec<DriftSnapshot>,
}

pub const METRICS_FORMAT: &str = "deployr.metrics/1";

pub fn prospective_report(
    model_id: &str,
    packets: &[InferencePacket],
    window: Window,
    threshold: f64,
    cfg: &ReportConfig,
) -> Result<MetricReport> {
    let in_window: Vec<InferencePacket> = packets
        .iter()
        .filter(|p| p.model_id == model_id && p.inference_time >= window.start && p.inference_time < window.end)
        .cloned()
        .collect();
    Ok(metric_report(model_id, "prospective", Some(window), &packet_samples(&in_window), threshold, cfg)?)
}

pub fn now_label(t: Timestamp) -> String {
    time::format_rfc3339(t)
}
