//! Feature parity between the warehouse (training) and transactional
//! (inference) sources.

use std::path::Path;
use std::sync::Arc;

use deployr_core::features::{build_vocabulary, featurize, Vocabulary};
use deployr_core::rng;
use deployr_core::warehouse::WarehouseIndex;
use deployr_core::world::World;
use deployr_core::Timestamp;
use rand::Rng;

use crate::client::{fetch_history_transactional, EmrClient};
use crate::clock::VirtualClock;
use crate::config::Config;
use crate::emr::Emr;
use crate::error::Result;
use crate::warehouse_io::{read_warehouse, write_warehouse};

/// Vocabulary fitted on every tenth retrospective order, for checks run
/// before any model exists.
pub fn parity_vocabulary(world: &World, cfg: &Config) -> Result<Vocabulary> {
    let wh = world.warehouse(cfg.sim_start());
    let idx = WarehouseIndex::new(&wh);
    let windows = cfg.train.windows;
    let hist = wh
        .orders
        .iter()
        .step_by(10)
        .map(|o| idx.load_history(&o.patient_id, o.order_time, windows))
        .collect::<deployr_core::Result<Vec<_>>>()?;
    Ok(build_vocabulary(&hist, windows)?)
}

#[derive(Debug, Clone, Default)]
pub struct ParityReport {
    pub checked: usize,
    pub mismatches: Vec<(String, Timestamp)>,
}

/// Seeded (patient, time) pairs with times in the retrospective span.
pub fn parity_pairs(world: &World, cfg: &Config, n: usize) -> Vec<(String, Timestamp)> {
    let ids: Vec<&str> = world.patients().iter().map(|p| p.patient_id.as_str()).collect();
    let mut r = rng::stream(cfg.world.seed, "parity", 0);
    let (lo, hi) = (cfg.world.order_start.timestamp(), cfg.sim_start().timestamp());
    (0..n)
        .map(|_| {
            let p = ids[r.random_range(0..ids.len())].to_string();
            (p, deployr_core::time::from_unix(r.random_range(lo..hi)))
        })
        .collect()
}

/// Featurize `n` random pairs from the flat-file warehouse (written to and
/// read back from `scratch`) and from the EMR API over HTTP.
pub async fn parity_check(world: World, cfg: &Config, vocab: &Vocabulary, n: usize, scratch: &Path) -> Result<ParityReport> {
    let start = cfg.sim_start();
    write_warehouse(scratch, &world.warehouse(start))?;
    let wh = read_warehouse(scratch);
    let _ = std::fs::remove_dir_all(scratch);
    let wh = wh?;
    let idx = WarehouseIndex::new(&wh);
    let pairs = parity_pairs(&world, cfg, n);

    let emr = Emr::new(world, Arc::new(VirtualClock::new(start)));
    let (addr, task) = emr.serve("127.0.0.1:0").await?;
    let client = EmrClient::new(&format!("http://{addr}"));
    let windows = vocab.windows();
    let mut report = ParityReport::default();
    let result = async {
        for (pid, t) in pairs {
            let a = featurize(&idx.load_history(&pid, t, windows)?, vocab);
            let b = featurize(&fetch_history_transactional(&client, &pid, t, windows).await?, vocab);
            report.checked += 1;
            if a != b {
                log::warn!("parity mismatch for {pid} at {t}");
                report.mismatches.push((pid, t));
            }
        }
        Ok::<_, crate::Error>(())
    }
    .await;
    task.abort();
    result.map(|_| report)
}
