//! Run manifest: which stages ran, on what inputs, producing what.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use deployr_core::fingerprint::fnv1a;
use deployr_core::metrics::Window;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::sim::{read_json, write_json};

pub const MANIFEST_FORMAT: &str = "deployr.manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub world: u64,
    pub train: u64,
    pub trigger: u64,
    pub sim: u64,
    pub report: u64,
}

impl Seeds {
    pub fn of(cfg: &Config) -> Self {
        Seeds {
            world: cfg.world.seed,
            train: cfg.train.seed,
            trigger: cfg.trigger.rng_seed,
            sim: cfg.sim.seed,
            report: cfg.monitor.report.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub config_digest: String,
    pub seeds: Seeds,
    /// File name to FNV-1a digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub virtual_span: Option<Window>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    pub stages: Vec<StageRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest { format: MANIFEST_FORMAT.into(), version: env!("CARGO_PKG_VERSION").into(), stages: Vec::new() }
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    fnv1a(bytes).to_string()
}

/// Digest of a file, or of every file in a directory in name order.
pub fn digest_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        names.sort();
        let mut acc = Vec::new();
        for p in names {
            acc.extend(p.file_name().unwrap_or_default().as_encoded_bytes());
            acc.push(0);
            acc.extend(digest_path(&p)?.as_bytes());
            acc.push(b'\n');
        }
        return Ok(digest_bytes(&acc));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(digest_bytes(&bytes))
}

pub fn config_digest(cfg: &Config) -> String {
    digest_bytes(serde_json::to_string(cfg).unwrap_or_default().as_bytes())
}

impl RunManifest {
    /// The manifest in `dir`, or an empty one.
    pub fn load_or_default(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            read_json(&path)
        } else {
            Ok(RunManifest::default())
        }
    }

    /// Record a stage, replacing an earlier record of the same name.
    /// Paths are digested now and recorded relative to `dir`.
    pub fn record(
        &mut self,
        dir: &Path,
        name: &str,
        cfg: &Config,
        inputs: &[&Path],
        outputs: &[&Path],
        wall: std::time::Duration,
        virtual_span: Option<Window>,
    ) -> Result<()> {
        let digest_all = |paths: &[&Path]| -> Result<BTreeMap<String, String>> {
            paths
                .iter()
                .filter(|p| p.exists())
                .map(|p| {
                    let key = p.strip_prefix(dir).unwrap_or(p).display().to_string();
                    Ok((key, digest_path(p)?))
                })
                .collect()
        };
        let rec = StageRecord {
            name: name.into(),
            config_digest: config_digest(cfg),
            seeds: Seeds::of(cfg),
            inputs: digest_all(inputs)?,
            outputs: digest_all(outputs)?,
            wall_ms: wall.as_millis() as u64,
            virtual_span,
        };
        self.stages.retain(|s| s.name != name);
        self.stages.push(rec);
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_digest_tracks_contents() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("a"), "1").unwrap();
        std::fs::write(d.path().join("b"), "2").unwrap();
        let first = digest_path(d.path()).unwrap();
        assert_eq!(first, digest_path(d.path()).unwrap());
        std::fs::write(d.path().join("b"), "3").unwrap();
        assert_ne!(first, digest_path(d.path()).unwrap());
    }

    #[test]
    fn rerecording_a_stage_replaces_it() {
        let d = tempfile::tempdir().unwrap();
        let out = d.path().join("x.json");
        std::fs::write(&out, "{}").unwrap();
        let cfg = Config::default();
        let mut m = RunManifest::default();
        m.record(d.path(), "train", &cfg, &[], &[&out], Default::default(), None).unwrap();
        m.record(d.path(), "train", &cfg, &[], &[&out], Default::default(), None).unwrap();
        assert_eq!(m.stages.len(), 1);
        assert!(m.stages[0].outputs.contains_key("x.json"));
        m.save(d.path()).unwrap();
        assert_eq!(RunManifest::load_or_default(d.path()).unwrap(), m);
    }
}
