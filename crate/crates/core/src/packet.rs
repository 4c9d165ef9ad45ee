//! Trigger configuration, inference packets and store records.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::arm::Arm;
use crate::cron::Schedule;
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::time::Timestamp;
use crate::world::{Panel, Race, Sex};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trigger {
    Event { panel_code: Panel },
    Timer { cron: Schedule, unit_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Silent,
    Loud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Route {
    ScoreColumn,
    Flowsheet,
    Inbasket,
    Alert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerConfig {
    pub trigger: Trigger,
    pub mode: Mode,
    #[serde(default)]
    pub routes: Vec<Route>,
    #[serde(default)]
    pub randomization_p: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.randomization_p) {
            return Err(Error::InvalidConfig(format!("randomization_p {} outside [0, 1]", self.randomization_p)));
        }
        let mut seen = self.routes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.routes.len() {
            return Err(Error::InvalidConfig("routes must not repeat".into()));
        }
        Ok(())
    }

    /// Routes that actually run for an inference in `arm`.
    pub fn active_routes(&self, arm: Arm) -> &[Route] {
        match (self.mode, arm) {
            (Mode::Loud, Arm::Display) => &self.routes,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteAction {
    pub route: Route,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupAttributes {
    pub sex: Sex,
    pub race: Race,
    pub age_over_40: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferencePacket {
    pub packet_id: String,
    pub model_id: String,
    pub patient_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_id: Option<String>,
    pub inference_time: Timestamp,
    pub features: FeatureVector,
    pub oov_count: u32,
    pub score: f64,
    pub arm: Arm,
    /// Index of the randomization draw that produced `arm`.
    pub arm_draw: u64,
    pub mode: Mode,
    pub routed: Vec<RouteAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_time: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<SubgroupAttributes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelUpdate {
    pub packet_id: String,
    pub label: bool,
    pub label_time: Timestamp,
    pub attributes: SubgroupAttributes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum StoreRecord {
    Packet(InferencePacket),
    LabelUpdate(LabelUpdate),
}

/// Fold records into packets in append order. The first label update for a
/// packet wins; later ones and updates for unknown packets are ignored.
pub fn merge_records<I: IntoIterator<Item = StoreRecord>>(records: I) -> Vec<InferencePacket> {
    let mut packets = Vec::new();
    let mut at: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        match r {
            StoreRecord::Packet(p) => {
                at.insert(p.packet_id.clone(), packets.len());
                packets.push(p);
            }
            StoreRecord::LabelUpdate(u) => {
                if let Some(&i) = at.get(&u.packet_id) {
                    let p: &mut InferencePacket = &mut packets[i];
                    if p.label.is_none() {
                        p.label = Some(u.label);
                        p.label_time = Some(u.label_time);
                        p.attributes = Some(u.attributes);
                    }
                }
            }
        }
    }
    packets
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::Fingerprint;
    use crate::time::ymd;

    fn packet(id: &str) -> InferencePacket {
        InferencePacket {
            packet_id: id.into(),
            model_id: "m".into(),
            patient_id: "PAT000001".into(),
            order_id: Some("ORD00000001".into()),
            inference_time: ymd(2022, 1, 1),
            features: FeatureVector { entries: vec![(0, 1)], vocab_fingerprint: Fingerprint(5) },
            oov_count: 0,
            score: 0.25,
            arm: Arm::Display,
            arm_draw: 0,
            mode: Mode::Silent,
            routed: vec![],
            label: None,
            label_time: None,
            attributes: None,
        }
    }

    fn update(id: &str, label: bool) -> LabelUpdate {
        LabelUpdate {
            packet_id: id.into(),
            label,
            label_time: ymd(2022, 1, 2),
            attributes: SubgroupAttributes { sex: Sex::Male, race: Race::Other, age_over_40: true },
        }
    }

    #[test]
    fn record_json_shape() {
        let json = serde_json::to_string(&StoreRecord::Packet(packet("p1"))).unwrap();
        assert!(json.starts_with("{\"record\":\"packet\""));
        let back: StoreRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, StoreRecord::Packet(packet("p1")));
        let json = serde_json::to_string(&StoreRecord::LabelUpdate(update("p1", true))).unwrap();
        assert!(json.starts_with("{\"record\":\"label_update\""));
    }

    #[test]
    fn first_label_wins() {
        let merged = merge_records([
            StoreRecord::Packet(packet("a")),
            StoreRecord::Packet(packet("b")),
            StoreRecord::LabelUpdate(update("a", true)),
            StoreRecord::LabelUpdate(update("a", false)),
            StoreRecord::LabelUpdate(update("zzz", false)),
        ]);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].label, Some(true));
        assert_eq!(merged[1].label, None);
    }

    #[test]
    fn silent_or_suppressed_routes_nothing() {
        let mut c = TriggerConfig {
            trigger: Trigger::Event { panel_code: Panel::Cbc },
            mode: Mode::Silent,
            routes: vec![Route::ScoreColumn, Route::Alert],
            randomization_p: 0.0,
            rng_seed: 0,
        };
        assert!(c.active_routes(Arm::Display).is_empty());
        c.mode = Mode::Loud;
        assert_eq!(c.active_routes(Arm::Display).len(), 2);
        assert!(c.active_routes(Arm::Suppress).is_empty());
        c.randomization_p = 1.5;
        assert!(c.validate().is_err());
    }
}
