//! The single versioned run configuration document.

use std::path::Path;

use chrono::TimeDelta;
use deployr_core::model::{Task, TrainConfig};
use deployr_core::packet::{Mode, Trigger, TriggerConfig};
use deployr_core::world::{DriftConfig, Panel, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::monitor::MonitorConfig;

pub const CONFIG_FORMAT: &str = "deployr.config/1";

/// Distribution shift switched on partway through a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDrift {
    /// Offset from the simulation start.
    #[serde(with = "deployr_core::time::delta_secs")]
    pub at: TimeDelta,
    #[serde(default)]
    pub covariate_shift: f64,
    #[serde(default)]
    pub concept_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    #[serde(with = "deployr_core::time::delta_secs")]
    pub duration: TimeDelta,
    /// Expected signed orders per day for the model's panel.
    pub rate_per_day: f64,
    pub seed: u64,
    pub drift: Option<SimDrift>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { duration: TimeDelta::days(30), rate_per_day: 150.0, seed: 7, drift: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub format: String,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_trigger")]
    pub trigger: TriggerConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default)]
    pub sim: SimConfig,
}

fn default_task() -> Task {
    Task { model_id: "cbc-hgb".into(), panel_code: Panel::Cbc, component_code: "HGB".into() }
}

fn default_trigger() -> TriggerConfig {
    TriggerConfig {
        trigger: Trigger::Event { panel_code: Panel::Cbc },
        mode: Mode::Silent,
        routes: Vec::new(),
        randomization_p: 0.5,
        rng_seed: 7,
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            format: CONFIG_FORMAT.into(),
            world: WorldConfig::default(),
            task: default_task(),
            train: TrainConfig::default(),
            trigger: default_trigger(),
            monitor: MonitorConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Config = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), reason: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Set every seed in the document from one value.
    pub fn reseed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.train.seed = seed;
        self.trigger.rng_seed = seed;
        self.monitor.report.seed = seed;
        self.sim.seed = seed;
    }

    pub fn sim_start(&self) -> deployr_core::Timestamp {
        self.world.prospective_start
    }

    pub fn sim_end(&self) -> deployr_core::Timestamp {
        self.world.prospective_start + self.sim.duration
    }

    /// World configuration with the simulation's drift folded in.
    pub fn world_with_drift(&self) -> WorldConfig {
        let mut w = self.world.clone();
        if let Some(d) = &self.sim.drift {
            w.drift = Some(DriftConfig {
                start_time: self.sim_start() + d.at,
                covariate_shift: d.covariate_shift,
                prevalence_shift: Default::default(),
                concept_shift: d.concept_shift,
            });
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CONFIG_FORMAT {
            return Err(Error::Config(format!("unsupported config format {:?}, expected {CONFIG_FORMAT}", self.format)));
        }
        self.world.validate()?;
        self.trigger.validate()?;
        if !self.task.panel_code.components().contains(&self.task.component_code.as_str()) {
            return Err(Error::Config(format!(
                "{} is not a component of {}",
                self.task.component_code,
                self.task.panel_code.as_str()
            )));
        }
        if self.sim.duration <= TimeDelta::zero() {
            return Err(Error::Config("sim duration must be positive".into()));
        }
        if self.sim_end() > self.world.end {
            return Err(Error::Config("simulation runs past the end of the generated world".into()));
        }
        if !(self.sim.rate_per_day.is_finite() && self.sim.rate_per_day > 0.0) {
            return Err(Error::Config("rate_per_day must be positive".into()));
        }
        if let Some(d) = &self.sim.drift {
            if d.at < TimeDelta::zero() || d.at > self.sim.duration {
                return Err(Error::Config("drift must start within the simulation".into()));
            }
        }
        if self.monitor.drift_window_days < 1 {
            return Err(Error::Config("drift_window_days must be at least 1".into()));
        }
        if self.monitor.drift_baseline == (crate::monitor::DriftBaseline::Windows { count: 0 }) {
            return Err(Error::Config("drift baseline needs at least one window".into()));
        }
        if self.monitor.maturation < TimeDelta::zero() {
            return Err(Error::Config("maturation must be non-negative".into()));
        }
        deployr_core::cron::Schedule::parse(&self.monitor.extract_cron)?;
        Ok(())
    }
}

/// Parse durations like `30d`, `12h`, `15m`, `90s`.
pub fn parse_duration(s: &str) -> Result<TimeDelta> {
    let s = s.trim();
    let bad = || Error::Config(format!("bad duration {s:?}, expected e.g. 30d, 12h, 15m"));
    let split = s.find(|c: char| !c.is_ascii_digit()).ok_or_else(bad)?;
    let (n, unit) = s.split_at(split);
    let n: i64 = n.parse().map_err(|_| bad())?;
    match unit {
        "d" => Ok(TimeDelta::days(n)),
        "h" => Ok(TimeDelta::hours(n)),
        "m" => Ok(TimeDelta::minutes(n)),
        "s" => Ok(TimeDelta::seconds(n)),
        _ => Err(bad()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        let back: Config = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn minimal_document_fills_defaults() {
        let c: Config = serde_json::from_str(r#"{"format":"deployr.config/1"}"#).unwrap();
        assert_eq!(c, Config::default());
    }

    #[test]
    fn wrong_format_is_rejected() {
        let mut c = Config::default();
        c.format = "other/2".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn durations() {
        assert_eq!(parse_duration("30d").unwrap(), TimeDelta::days(30));
        assert_eq!(parse_duration("15m").unwrap(), TimeDelta::minutes(15));
        assert!(parse_duration("d").is_err());
        assert!(parse_duration("3w").is_err());
        assert!(parse_duration("").is_err());
    }

    #[test]
    fn drift_lands_at_offset() {
        let mut c = Config::default();
        c.sim.drift = Some(SimDrift { at: TimeDelta::days(15), covariate_shift: 0.5, concept_shift: 0.5 });
        let w = c.world_with_drift();
        assert_eq!(w.drift.unwrap().start_time, c.world.prospective_start + TimeDelta::days(15));
    }
}
