use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use deployr_core::cohort::build_cohort;
use deployr_core::cron::Schedule;
use deployr_core::metrics::Window;
use deployr_core::model::train_model;
use deployr_core::packet::{Mode, TriggerConfig};
use deployr_core::time::{format_rfc3339, parse_rfc3339};
use deployr_core::warehouse::Warehouse;
use deployr_core::world::generate_world;
use deployr_core::Timestamp;
use deployr::bundle_io::{load_bundle, save_bundle};
use deployr::client::EmrClient;
use deployr::clock::{VirtualClock, WallClock};
use deployr::config::{parse_duration, Config, SimDrift};
use deployr::emr::{Emr, OrderEvent};
use deployr::manifest::{digest_path, RunManifest};
use deployr::monitor::extract_labels;
use deployr::report::write_report;
use deployr::serve::ServeEngine;
use deployr::sim::{
    build_monitor_report, describe_trigger, plan_arrivals, read_json, replay_world, run_simulation, run_trial,
    write_json, Retrospective, Services, SimRun,
};
use deployr::store::{PacketFilter, PacketStore};
use deployr::parity::{parity_check, parity_vocabulary};
use deployr::warehouse_io::{read_warehouse, write_warehouse};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "deployr", version, about = "Train, deploy and monitor clinical lab-result models against a simulated EMR")]
struct Cli {
    /// Run configuration JSON. Defaults to <out>/config.json when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Set every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Log at info level (RUST_LOG overrides).
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Silent,
    Loud,
}

#[derive(Debug, clap::Args)]
struct SimArgs {
    /// Simulated span, e.g. 30d.
    #[arg(long)]
    duration: Option<String>,
    /// Expected orders per day.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Offset from the simulation start where drift begins, e.g. 15d.
    #[arg(long)]
    drift_at: Option<String>,
    #[arg(long, default_value_t = 0.5, requires = "drift_at")]
    covariate_shift: f64,
    #[arg(long, default_value_t = 0.5, requires = "drift_at")]
    concept_shift: f64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic world and record its configuration and size.
    GenWorld,
    /// Write the warehouse snapshot as TSV files under <out>/warehouse.
    ExportWarehouse,
    /// Sample the labeled cohort for the configured task.
    BuildCohort,
    /// Train the model and record the retrospective test set.
    Train,
    /// Check a bundle against a trigger configuration and record the deployment.
    Deploy {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Also serve the model against this EMR until interrupted.
        #[arg(long, requires = "listen")]
        emr_url: Option<String>,
        #[arg(long)]
        listen: Option<String>,
    },
    /// Serve the simulated EMR API on a wall clock until interrupted.
    ServeEmr {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
    },
    /// Run the deployed model against simulated order traffic.
    RunSim {
        #[command(flatten)]
        sim: SimArgs,
        /// Pace the run in real time; one wall second covers <speed> virtual seconds.
        #[arg(long)]
        wall_clock: bool,
        #[arg(long, default_value_t = 1.0, requires = "wall_clock")]
        speed: f64,
    },
    /// Label matured packets from the EMR.
    ExtractLabels {
        /// Extraction time, RFC 3339. Defaults to the end of the simulation plus maturation.
        #[arg(long)]
        now: Option<String>,
        /// Query a running EMR instead of rebuilding the simulated one.
        #[arg(long)]
        emr_url: Option<String>,
    },
    /// Write metrics.json and report.html.
    Report,
    /// Compare warehouse and transactional features for random patients.
    ParityCheck {
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Generate, train, deploy silently, simulate, label and report in one go.
    Demo {
        #[command(flatten)]
        sim: SimArgs,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::GenWorld => "gen-world",
            Command::ExportWarehouse => "export-warehouse",
            Command::BuildCohort => "build-cohort",
            Command::Train => "train",
            Command::Deploy { .. } => "deploy",
            Command::ServeEmr { .. } => "serve-emr",
            Command::RunSim { .. } => "run-sim",
            Command::ExtractLabels { .. } => "extract-labels",
            Command::Report => "report",
            Command::ParityCheck { .. } => "parity-check",
            Command::Demo { .. } => "demo",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let stage = cli.command.stage();
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: stage={stage}: cannot start runtime: {e}");
            return ExitCode::from(1);
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: stage={stage}: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Artifact paths inside the output directory.
struct Paths(PathBuf);

impl Paths {
    fn config(&self) -> PathBuf {
        self.0.join("config.json")
    }
    fn world(&self) -> PathBuf {
        self.0.join("world.json")
    }
    fn warehouse(&self) -> PathBuf {
        self.0.join("warehouse")
    }
    fn cohort(&self) -> PathBuf {
        self.0.join("cohort.json")
    }
    fn bundle(&self) -> PathBuf {
        self.0.join("bundle.json")
    }
    fn retrospective(&self) -> PathBuf {
        self.0.join("retrospective.json")
    }
    fn deployment(&self) -> PathBuf {
        self.0.join("deployment.json")
    }
    fn packets(&self) -> PathBuf {
        self.0.join("packets.jsonl")
    }
    fn orders(&self) -> PathBuf {
        self.0.join("orders.jsonl")
    }
    fn sim(&self) -> PathBuf {
        self.0.join("sim.json")
    }
    fn report_dir(&self) -> PathBuf {
        self.0.clone()
    }
    fn metrics(&self) -> PathBuf {
        self.0.join("metrics.json")
    }
    fn html(&self) -> PathBuf {
        self.0.join("report.html")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WorldSummary {
    config: deployr_core::world::WorldConfig,
    counts: deployr_core::world::FactCounts,
}

#[derive(Debug, Serialize, Deserialize)]
struct CohortFile {
    model_id: String,
    missing_results: usize,
    rows: Vec<deployr_core::cohort::CohortRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DeploymentFile {
    model_id: String,
    bundle_digest: String,
    endpoint: String,
    trigger: TriggerConfig,
}

fn resolve_config(cli: &Cli, paths: &Paths) -> anyhow::Result<Config> {
    let mut cfg = match (&cli.config, paths.config().exists()) {
        (Some(p), _) => Config::load(p)?,
        (None, true) => Config::load(&paths.config())?,
        (None, false) => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

fn apply_sim_args(cfg: &mut Config, a: &SimArgs) -> anyhow::Result<()> {
    if let Some(d) = &a.duration {
        cfg.sim.duration = parse_duration(d)?;
    }
    if let Some(r) = a.rate {
        cfg.sim.rate_per_day = r;
    }
    if let Some(m) = a.mode {
        cfg.trigger.mode = mode(m);
    }
    if let Some(at) = &a.drift_at {
        cfg.sim.drift =
            Some(SimDrift { at: parse_duration(at)?, covariate_shift: a.covariate_shift, concept_shift: a.concept_shift });
    }
    cfg.validate()?;
    Ok(())
}

fn mode(m: ModeArg) -> Mode {
    match m {
        ModeArg::Silent => Mode::Silent,
        ModeArg::Loud => Mode::Loud,
    }
}

/// The warehouse from `<out>/warehouse` when exported, else from the world.
fn load_warehouse(paths: &Paths, cfg: &Config) -> anyhow::Result<Warehouse> {
    if paths.warehouse().join("patients.tsv").exists() {
        Ok(read_warehouse(&paths.warehouse())?)
    } else {
        Ok(generate_world(&cfg.world)?.warehouse(cfg.sim_start()))
    }
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it)?);
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| path.display().to_string())
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn fresh_store(path: &Path) -> anyhow::Result<PacketStore> {
    if path.exists() {
        std::fs::remove_file(path).with_context(|| path.display().to_string())?;
    }
    Ok(PacketStore::open(path)?)
}

async fn run(cli: Cli) -> anyhow::Result<()> {
    let paths = Paths(cli.out.clone());
    std::fs::create_dir_all(&paths.0).with_context(|| paths.0.display().to_string())?;
    let mut cfg = resolve_config(&cli, &paths)?;
    let mut manifest = RunManifest::load_or_default(&paths.0)?;
    let began = Instant::now();
    let stage = cli.command.stage();

    match &cli.command {
        Command::GenWorld => {
            cfg.save(&paths.config())?;
            let world = generate_world(&cfg.world)?;
            let counts = world.counts();
            write_json(&paths.world(), &WorldSummary { config: cfg.world.clone(), counts })?;
            println!(
                "world: {} patients, {} events, {} orders, {} results",
                counts.patients, counts.events, counts.orders, counts.results
            );
            manifest.record(&paths.0, stage, &cfg, &[], &[&paths.world()], began.elapsed(), None)?;
        }
        Command::ExportWarehouse => {
            cfg.save(&paths.config())?;
            let wh = generate_world(&cfg.world)?.warehouse(cfg.sim_start());
            write_warehouse(&paths.warehouse(), &wh)?;
            println!(
                "warehouse: {} patients, {} events, {} orders, {} results -> {}",
                wh.patients.len(),
                wh.events.len(),
                wh.orders.len(),
                wh.results.len(),
                paths.warehouse().display()
            );
            manifest.record(&paths.0, stage, &cfg, &[], &[&paths.warehouse()], began.elapsed(), None)?;
        }
        Command::BuildCohort => {
            let wh = load_warehouse(&paths, &cfg)?;
            let t = &cfg.task;
            let c = build_cohort(&wh, t.panel_code, &t.component_code, cfg.train.per_year, &cfg.train.years, cfg.train.seed)?;
            let positives = c.rows.iter().filter(|r| r.label).count();
            println!("cohort: {} rows, {} positive, {} orders without a result", c.rows.len(), positives, c.missing_results);
            write_json(&paths.cohort(), &CohortFile { model_id: t.model_id.clone(), missing_results: c.missing_results, rows: c.rows })?;
            manifest.record(&paths.0, stage, &cfg, &[&paths.warehouse()], &[&paths.cohort()], began.elapsed(), None)?;
        }
        Command::Train => {
            cfg.save(&paths.config())?;
            let wh = load_warehouse(&paths, &cfg)?;
            let trained = train_model(&wh, &cfg.task, &cfg.train, cfg.sim_start())?;
            save_bundle(&trained.bundle, &paths.bundle())?;
            let retro = Retrospective::from_trained(&trained, &wh);
            retro.save(&paths.retrospective())?;
            let auroc = deployr_core::metrics::auroc(&retro.samples.iter().map(|s| s.point()).collect::<Vec<_>>());
            println!(
                "trained {}: {} features, threshold {:.4}{}, test AUROC {:.4} on {} orders",
                trained.bundle.model_id,
                trained.bundle.vocabulary.len(),
                trained.bundle.decision_threshold,
                if trained.threshold.fallback { " (fallback)" } else { "" },
                auroc,
                retro.samples.len()
            );
            manifest.record(
                &paths.0,
                stage,
                &cfg,
                &[&paths.warehouse()],
                &[&paths.bundle(), &paths.retrospective()],
                began.elapsed(),
                None,
            )?;
        }
        Command::Deploy { mode: m, emr_url, listen } => {
            if let Some(m) = m {
                cfg.trigger.mode = mode(*m);
            }
            cfg.validate()?;
            cfg.save(&paths.config())?;
            let bundle = load_bundle(&paths.bundle())?;
            cfg.trigger.validate()?;
            if let deployr_core::packet::Trigger::Event { panel_code } = &cfg.trigger.trigger {
                if *panel_code != bundle.panel_code {
                    bail!("trigger panel {} does not match model panel {}", panel_code.as_str(), bundle.panel_code.as_str());
                }
            }
            let dep = DeploymentFile {
                model_id: bundle.model_id.clone(),
                bundle_digest: digest_path(&paths.bundle())?,
                endpoint: format!("/models/{}/infer", bundle.model_id),
                trigger: cfg.trigger.clone(),
            };
            write_json(&paths.deployment(), &dep)?;
            println!("deployed {} ({:?}, {})", dep.model_id, cfg.trigger.mode, describe_trigger(&cfg.trigger));
            manifest.record(&paths.0, stage, &cfg, &[&paths.bundle()], &[&paths.deployment()], began.elapsed(), None)?;
            manifest.save(&paths.0)?;
            if let (Some(url), Some(addr)) = (emr_url, listen) {
                let store = Arc::new(PacketStore::open(paths.packets())?);
                let engine = ServeEngine::new(EmrClient::new(url), store)?;
                let (local, task) = engine.serve(addr).await?;
                engine.register_deployment(bundle, cfg.trigger.clone()).await?;
                println!("serving on http://{local}");
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = task => bail!("server stopped"),
                }
            }
            return Ok(());
        }
        Command::ServeEmr { listen } => {
            let world = generate_world(&cfg.world_with_drift())?;
            let emr = Emr::new(world, Arc::new(WallClock::starting_at(cfg.sim_start())));
            let (local, task) = emr.serve(listen).await?;
            println!("EMR on http://{local}, clock starting at {}", format_rfc3339(cfg.sim_start()));
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = task => bail!("server stopped"),
            }
            return Ok(());
        }
        Command::RunSim { sim, wall_clock, speed } => {
            apply_sim_args(&mut cfg, sim)?;
            if *wall_clock && !(*speed > 0.0) {
                bail!("--speed must be positive");
            }
            cfg.save(&paths.config())?;
            let bundle = load_bundle(&paths.bundle())?;
            if paths.deployment().exists() {
                let dep: DeploymentFile = read_json(&paths.deployment())?;
                if dep.bundle_digest != digest_path(&paths.bundle())? {
                    bail!("bundle changed since deploy; run deploy again");
                }
                let mode = cfg.trigger.mode;
                cfg.trigger = dep.trigger;
                if sim.mode.is_some() {
                    cfg.trigger.mode = mode;
                }
            }
            let (start, end) = (cfg.sim_start(), cfg.sim_end());
            let world = generate_world(&cfg.world_with_drift())?;
            let arrivals = plan_arrivals(&world, start, cfg.sim.duration, cfg.sim.rate_per_day, cfg.sim.seed);
            let store = Arc::new(fresh_store(&paths.packets())?);
            let services = Services::start(world, store, start).await?;
            services.engine.register_deployment(bundle, cfg.trigger.clone()).await?;
            let run = SimRun {
                panel: cfg.task.panel_code,
                arrivals: &arrivals,
                start,
                end,
                extract: Schedule::parse(&cfg.monitor.extract_cron)?,
                maturation: cfg.monitor.maturation,
                pace: wall_clock.then_some(*speed),
            };
            let mut orders = Vec::new();
            let summary = run_simulation(&services, &run, Some(&mut orders)).await?;
            write_lines(&paths.orders(), &orders)?;
            write_json(&paths.sim(), &summary)?;
            println!(
                "simulated {} to {}: {} orders, {} callbacks delivered, {} packets ({} labeled)",
                format_rfc3339(start),
                format_rfc3339(end),
                summary.orders_signed,
                summary.callbacks_delivered,
                summary.packets,
                summary.labeled
            );
            manifest.record(
                &paths.0,
                stage,
                &cfg,
                &[&paths.bundle(), &paths.deployment()],
                &[&paths.packets(), &paths.orders(), &paths.sim()],
                began.elapsed(),
                Some(Window { start, end }),
            )?;
        }
        Command::ExtractLabels { now, emr_url } => {
            let now: Timestamp = match now {
                Some(s) => parse_rfc3339(s)?,
                None => cfg.sim_end() + cfg.monitor.maturation,
            };
            let bundle = load_bundle(&paths.bundle())?;
            let components = [(bundle.model_id.clone(), bundle.component_code.clone())].into_iter().collect();
            let store = PacketStore::open(paths.packets())?;
            let outcome = match emr_url {
                Some(url) => extract_labels(&store, &EmrClient::new(url), &components, cfg.monitor.maturation, now).await?,
                None => {
                    let orders: Vec<OrderEvent> =
                        if paths.orders().exists() { read_lines(&paths.orders())? } else { Vec::new() };
                    let world = replay_world(&cfg, &orders)?;
                    let emr = Emr::new(world, Arc::new(VirtualClock::new(now)));
                    let (addr, task) = emr.serve("127.0.0.1:0").await?;
                    let client = EmrClient::new(&format!("http://{addr}"));
                    let out = extract_labels(&store, &client, &components, cfg.monitor.maturation, now).await;
                    task.abort();
                    out?
                }
            };
            println!(
                "labels at {}: {} new, {} pending, {} immature, {} errors",
                format_rfc3339(now),
                outcome.labeled,
                outcome.pending,
                outcome.immature,
                outcome.errors
            );
            manifest.record(&paths.0, stage, &cfg, &[&paths.orders()], &[&paths.packets()], began.elapsed(), None)?;
        }
        Command::Report => {
            let bundle = load_bundle(&paths.bundle())?;
            let retro = Retrospective::load(&paths.retrospective())?;
            let packets = deployr::store::read_packets(&paths.packets(), &PacketFilter::model(&bundle.model_id))?;
            let window = Window { start: cfg.sim_start(), end: cfg.sim_end() };
            let doc = build_monitor_report(&cfg, &bundle, &retro, &packets, window)?;
            write_report(&paths.report_dir(), &doc)?;
            print_report(&doc);
            manifest.record(
                &paths.0,
                stage,
                &cfg,
                &[&paths.bundle(), &paths.retrospective(), &paths.packets()],
                &[&paths.metrics(), &paths.html()],
                began.elapsed(),
                Some(window),
            )?;
        }
        Command::ParityCheck { n } => {
            let world = generate_world(&cfg.world)?;
            let vocab = match load_bundle(&paths.bundle()) {
                Ok(b) => b.vocabulary,
                Err(_) => parity_vocabulary(&world, &cfg)?,
            };
            let scratch = paths.0.join("parity-warehouse");
            let report = parity_check(world, &cfg, &vocab, *n, &scratch).await?;
            println!("parity: {}/{} feature vectors identical", report.checked - report.mismatches.len(), report.checked);
            if !report.mismatches.is_empty() {
                bail!(
                    "{} of {} feature vectors differ between warehouse and transactional sources",
                    report.mismatches.len(),
                    report.checked
                );
            }
            return Ok(());
        }
        Command::Demo { sim } => {
            apply_sim_args(&mut cfg, sim)?;
            cfg.save(&paths.config())?;
            let trial = run_trial(&cfg, &fresh_store_path(&paths.packets())?).await?;
            save_bundle(&trial.trained.bundle, &paths.bundle())?;
            trial.retrospective.save(&paths.retrospective())?;
            write_lines(&paths.orders(), &trial.orders)?;
            write_json(&paths.sim(), &trial.summary)?;
            write_report(&paths.report_dir(), &trial.report)?;
            let s = &trial.summary;
            println!(
                "demo: {} orders, {} callbacks delivered, {} packets, {} labeled, write-backs {}, alerts {}",
                s.orders_signed,
                s.callbacks_delivered,
                s.packets,
                s.labeled,
                s.writebacks.values().sum::<usize>(),
                s.alerts
            );
            print_report(&trial.report);
            println!("metrics digest {}", digest_path(&paths.metrics())?);
            manifest.record(
                &paths.0,
                stage,
                &cfg,
                &[],
                &[&paths.bundle(), &paths.retrospective(), &paths.packets(), &paths.metrics(), &paths.html()],
                began.elapsed(),
                Some(Window { start: cfg.sim_start(), end: cfg.sim_end() }),
            )?;
        }
    }
    manifest.save(&paths.0)?;
    Ok(())
}

fn fresh_store_path(path: &Path) -> anyhow::Result<PathBuf> {
    drop(fresh_store(path)?);
    Ok(path.to_path_buf())
}

fn print_report(doc: &deployr::monitor::MonitorReport) {
    for r in &doc.reports {
        println!(
            "{:>13}: n={} AUROC {:.4} [{:.4}, {:.4}] prevalence {:.3}",
            r.source, r.n, r.auroc.point, r.auroc.lo, r.auroc.hi, r.prevalence.point
        );
    }
    for d in &doc.drift {
        let Some(w) = d.window else { continue };
        let names: Vec<String> = d.flags.iter().take(5).map(|f| f.quantity.name()).collect();
        let more = d.flags.len().saturating_sub(names.len());
        println!(
            "drift {} to {}: n={} flags={}{}{}",
            w.start.format("%Y-%m-%d"),
            w.end.format("%Y-%m-%d"),
            d.n,
            d.flags.len(),
            if names.is_empty() { String::new() } else { format!(" ({}", names.join(", ")) },
            if names.is_empty() { String::new() } else if more > 0 { format!(", +{more})") } else { ")".into() }
        );
    }
}
