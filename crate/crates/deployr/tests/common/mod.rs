#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use deployr::sim::Services;
use deployr::store::PacketStore;
use deployr_core::forest::ForestParams;
use deployr_core::model::{train_model, ModelBundle, Task, TrainConfig};
use deployr_core::packet::{Mode, Route, Trigger, TriggerConfig};
use deployr_core::world::{generate_world, Panel, World, WorldConfig};

pub fn small_world_config() -> WorldConfig {
    WorldConfig { n_patients: 1200, n_units: 20, ..Default::default() }
}

pub fn task() -> Task {
    Task { model_id: "cbc-hgb".into(), panel_code: Panel::Cbc, component_code: "HGB".into() }
}

/// A quickly trained HGB bundle, shared by every test in the binary.
pub fn bundle() -> &'static ModelBundle {
    static B: OnceLock<ModelBundle> = OnceLock::new();
    B.get_or_init(|| {
        let cfg = small_world_config();
        let world = generate_world(&cfg).unwrap();
        let wh = world.warehouse(cfg.prospective_start);
        let train = TrainConfig {
            per_year: 300,
            forest: ForestParams { n_trees: 20, ..Default::default() },
            ..Default::default()
        };
        train_model(&wh, &task(), &train, cfg.prospective_start).unwrap().bundle
    })
}

pub fn world() -> World {
    generate_world(&small_world_config()).unwrap()
}

pub fn event_trigger(mode: Mode, routes: Vec<Route>, p: f64) -> TriggerConfig {
    TriggerConfig { trigger: Trigger::Event { panel_code: Panel::Cbc }, mode, routes, randomization_p: p, rng_seed: 11 }
}

pub struct Rig {
    pub services: Services,
    pub store: Arc<PacketStore>,
    _dir: tempfile::TempDir,
}

/// EMR plus serve engine over `world`, clock at its prospective start.
pub async fn rig(world: World) -> Rig {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(PacketStore::open(dir.path().join("packets.jsonl")).unwrap());
    let start = world.config().prospective_start;
    let services = Services::start(world, store.clone(), start).await.unwrap();
    Rig { services, store, _dir: dir }
}

/// Patients registered and eligible for orders at the prospective start.
pub fn some_patients(world: &World, n: usize) -> Vec<String> {
    let t = world.config().prospective_start;
    world.patients().iter().filter(|p| world.patient(&p.patient_id, t).is_some()).take(n).map(|p| p.patient_id.clone()).collect()
}
