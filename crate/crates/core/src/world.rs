//! Synthetic EMR world.
//!
//! A latent-severity factor model: every patient carries a hidden severity
//! `z ~ N(0, 1)`. Problem-list conditions, medication orders and routine lab
//! draws are sampled so that their presence and values move with `z`, and
//! diagnostic-order results are thresholded on a latent that loads on `z`
//! with strength `signal_strength`. The same world plays both the warehouse
//! (via [`World::warehouse`]) and the transactional store (the query methods
//! taking `now`).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::str::FromStr;

use chrono::{NaiveDate, TimeDelta};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::time::{self, Timestamp};
use crate::warehouse::{PatientRow, Warehouse};

const SECONDS_PER_YEAR: f64 = 365.25 * 86_400.0;
/// Label latent loading on severity, per unit of `signal_strength`.
const COUPLING: f64 = 4.0;
/// Result value = ref_high + sd * (latent - threshold) / RESULT_SPREAD.
const RESULT_SPREAD: f64 = 8.0;
const CONDITION_MEAN: f64 = 4.0;
const CONDITION_SEVERITY: f64 = 0.4;
const MEDICATION_RATE: f64 = 12.0;
const LAB_DRAW_RATE: f64 = 8.0;
const RATE_SEVERITY: f64 = 0.5;
const LAB_NOISE: f64 = 0.5;
/// Probability that a routine lab draw is a CBC, metabolic or magnesium panel.
const LAB_PANEL_WEIGHTS: [f64; 3] = [0.45, 0.35, 0.20];
const SEX_WEIGHTS: [f64; 3] = [0.531, 0.467, 0.002];
const RACE_WEIGHTS: [f64; 7] = [0.515, 0.215, 0.183, 0.042, 0.029, 0.013, 0.003];
const REGISTRATION_WINDOW_SECS: f64 = 30.0 * 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
    Unknown,
}

impl Sex {
    pub const ALL: [Sex; 3] = [Sex::Female, Sex::Male, Sex::Unknown];

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "Female",
            Sex::Male => "Male",
            Sex::Unknown => "Unknown",
        }
    }
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sex::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown sex `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Race {
    White,
    Other,
    Asian,
    Black,
    Unknown,
    #[serde(rename = "Pacific Islander")]
    PacificIslander,
    #[serde(rename = "Native American")]
    NativeAmerican,
}

impl Race {
    pub const ALL: [Race; 7] = [
        Race::White,
        Race::Other,
        Race::Asian,
        Race::Black,
        Race::Unknown,
        Race::PacificIslander,
        Race::NativeAmerican,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Race::White => "White",
            Race::Other => "Other",
            Race::Asian => "Asian",
            Race::Black => "Black",
            Race::Unknown => "Unknown",
            Race::PacificIslander => "Pacific Islander",
            Race::NativeAmerican => "Native American",
        }
    }
}

impl FromStr for Race {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Race::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown race `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Panel {
    #[serde(rename = "CBC")]
    Cbc,
    #[serde(rename = "METABOLIC")]
    Metabolic,
    #[serde(rename = "MAGNESIUM")]
    Magnesium,
}

impl Panel {
    pub const ALL: [Panel; 3] = [Panel::Cbc, Panel::Metabolic, Panel::Magnesium];

    pub fn as_str(self) -> &'static str {
        match self {
            Panel::Cbc => "CBC",
            Panel::Metabolic => "METABOLIC",
            Panel::Magnesium => "MAGNESIUM",
        }
    }

    pub fn components(self) -> &'static [&'static str] {
        match self {
            Panel::Cbc => &["HCT", "HGB", "PLT", "WBC"],
            Panel::Metabolic => &["ALB", "BUN", "CA", "CO2", "CREAT", "K", "NA"],
            Panel::Magnesium => &["MG"],
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Panel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Panel::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown panel `{s}`")))
    }
}

/// Reference range and generative parameters of one lab analyte.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Analyte {
    pub code: &'static str,
    pub panel: Panel,
    pub ref_low: f64,
    pub ref_high: f64,
    pub sd: f64,
    /// Latent cut above which an order result is abnormal.
    pub threshold: f64,
}

impl Analyte {
    pub fn is_abnormal(&self, value: f64) -> bool {
        value < self.ref_low || value > self.ref_high
    }
}

/// Thresholds put the no-drift prevalence near the retrospective
/// prevalences of the corresponding deployed models.
pub const ANALYTES: [Analyte; 12] = [
    Analyte { code: "HCT", panel: Panel::Cbc, ref_low: 36.0, ref_high: 50.0, sd: 4.0, threshold: 0.35 },
    Analyte { code: "HGB", panel: Panel::Cbc, ref_low: 12.0, ref_high: 17.5, sd: 1.5, threshold: 0.0 },
    Analyte { code: "PLT", panel: Panel::Cbc, ref_low: 150.0, ref_high: 400.0, sd: 60.0, threshold: 2.8 },
    Analyte { code: "WBC", panel: Panel::Cbc, ref_low: 4.0, ref_high: 11.0, sd: 2.0, threshold: 2.4 },
    Analyte { code: "ALB", panel: Panel::Metabolic, ref_low: 3.5, ref_high: 5.0, sd: 0.4, threshold: 3.7 },
    Analyte { code: "BUN", panel: Panel::Metabolic, ref_low: 7.0, ref_high: 20.0, sd: 4.0, threshold: 3.4 },
    Analyte { code: "CA", panel: Panel::Metabolic, ref_low: 8.5, ref_high: 10.5, sd: 0.5, threshold: 5.4 },
    Analyte { code: "CO2", panel: Panel::Metabolic, ref_low: 22.0, ref_high: 29.0, sd: 2.0, threshold: 4.4 },
    Analyte { code: "CREAT", panel: Panel::Metabolic, ref_low: 0.6, ref_high: 1.2, sd: 0.2, threshold: 2.2 },
    Analyte { code: "K", panel: Panel::Metabolic, ref_low: 3.5, ref_high: 5.0, sd: 0.4, threshold: 6.8 },
    Analyte { code: "NA", panel: Panel::Metabolic, ref_low: 135.0, ref_high: 145.0, sd: 3.0, threshold: 5.2 },
    Analyte { code: "MG", panel: Panel::Magnesium, ref_low: 1.7, ref_high: 2.2, sd: 0.15, threshold: 4.5 },
];

pub fn analyte(code: &str) -> Option<&'static Analyte> {
    ANALYTES.iter().find(|a| a.code == code)
}

fn analyte_index(code: &str) -> usize {
    ANALYTES.iter().position(|a| a.code == code).expect("known analyte")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Condition,
    Medication,
    LabResult,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Condition => "Condition",
            EventKind::Medication => "Medication",
            EventKind::LabResult => "LabResult",
        }
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Condition" => Ok(EventKind::Condition),
            "Medication" => Ok(EventKind::Medication),
            "LabResult" => Ok(EventKind::LabResult),
            other => Err(Error::InvalidInput(format!("unknown event kind `{other}`"))),
        }
    }
}

/// A patient as the world knows them. `severity` is the hidden latent and
/// has no serialized form anywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub birth_date: NaiveDate,
    pub sex: Sex,
    pub race: Race,
    pub unit_id: String,
    severity: f64,
}

impl PatientRecord {
    pub fn severity(&self) -> f64 {
        self.severity
    }

    pub fn row(&self) -> PatientRow {
        PatientRow {
            patient_id: self.patient_id.clone(),
            birth_date: self.birth_date,
            sex: self.sex,
            race: self.race,
            unit_id: self.unit_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEvent {
    pub patient_id: String,
    pub kind: EventKind,
    pub code: String,
    pub numeric_value: Option<f64>,
    pub abnormal: Option<bool>,
    pub effective_time: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticOrder {
    pub order_id: String,
    pub patient_id: String,
    pub panel_code: Panel,
    pub component_codes: Vec<String>,
    pub order_time: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabResult {
    pub order_id: String,
    pub component_code: String,
    pub value: f64,
    pub ref_low: f64,
    pub ref_high: f64,
    pub abnormal: bool,
    pub result_time: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    pub start_time: Timestamp,
    #[serde(default)]
    pub covariate_shift: f64,
    #[serde(default)]
    pub prevalence_shift: BTreeMap<String, f64>,
    /// 0 leaves the label model untouched; `c` moves a fraction `c` of the
    /// severity loading onto a latent the features cannot see.
    #[serde(default)]
    pub concept_shift: f64,
}

/// Expected orders per patient-year for each panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRates {
    pub cbc: f64,
    pub metabolic: f64,
    pub magnesium: f64,
}

impl Default for OrderRates {
    fn default() -> Self {
        Self { cbc: 0.6, metabolic: 0.6, magnesium: 0.5 }
    }
}

impl OrderRates {
    pub fn get(&self, panel: Panel) -> f64 {
        match panel {
            Panel::Cbc => self.cbc,
            Panel::Metabolic => self.metabolic,
            Panel::Magnesium => self.magnesium,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub condition_vocab_size: usize,
    pub medication_vocab_size: usize,
    pub signal_strength: f64,
    #[serde(with = "time::delta_secs")]
    pub result_delay: TimeDelta,
    pub drift: Option<DriftConfig>,
    /// History begins here; no fact is at or before it.
    pub start: Timestamp,
    /// First day of retrospective diagnostic orders.
    pub order_start: Timestamp,
    /// Retrospective orders stop here; later orders come from the simulator.
    pub prospective_start: Timestamp,
    /// Background events are generated up to here.
    pub end: Timestamp,
    pub n_units: usize,
    pub order_rates: OrderRates,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_patients: 5000,
            condition_vocab_size: 200,
            medication_vocab_size: 100,
            signal_strength: 1.0,
            result_delay: TimeDelta::hours(2),
            drift: None,
            start: time::ymd(2014, 1, 1),
            order_start: time::ymd(2015, 1, 1),
            prospective_start: time::ymd(2022, 1, 1),
            end: time::ymd(2022, 7, 1),
            n_units: 50,
            order_rates: OrderRates::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.condition_vocab_size < 1 || self.medication_vocab_size < 1 {
            return bad("vocabulary sizes must be at least 1");
        }
        if self.n_patients < 1 {
            return bad("n_patients must be at least 1");
        }
        if self.n_units < 1 {
            return bad("n_units must be at least 1");
        }
        if !self.signal_strength.is_finite() || self.signal_strength < 0.0 {
            return bad("signal_strength must be finite and non-negative");
        }
        if self.result_delay < TimeDelta::zero() {
            return bad("result_delay must be non-negative");
        }
        if (self.order_start - self.start).num_seconds() as f64 <= REGISTRATION_WINDOW_SECS {
            return bad("order_start must be more than 30 days after start");
        }
        if !(self.order_start <= self.prospective_start && self.prospective_start <= self.end) {
            return bad("timeline must satisfy order_start <= prospective_start <= end");
        }
        let rates = [self.order_rates.cbc, self.order_rates.metabolic, self.order_rates.magnesium];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return bad("order rates must be finite and non-negative");
        }
        if let Some(d) = &self.drift {
            let shifts = [d.covariate_shift, d.concept_shift];
            if shifts.iter().chain(d.prevalence_shift.values()).any(|v| !v.is_finite()) {
                return bad("drift shifts must be finite");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Fact {
    time: i64,
    code: u32,
    kind: EventKind,
    value: f64,
    abnormal: bool,
}

#[derive(Debug, Clone)]
struct CodeParams {
    slope: Vec<f64>,
    offset: Vec<f64>,
}

impl CodeParams {
    fn sample<R: Rng>(rng: &mut R, n: usize) -> Self {
        let slope = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let offset = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self { slope, offset }
    }

    fn weights(&self, z: f64) -> WeightedIndex<f64> {
        let w: Vec<f64> = self
            .slope
            .iter()
            .zip(&self.offset)
            .map(|(a, b)| libm::exp(a * z + b))
            .collect();
        WeightedIndex::new(w).expect("positive finite weights")
    }
}

/// Counts of every fact family, for reporting and export checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactCounts {
    pub patients: usize,
    pub events: usize,
    pub orders: usize,
    pub results: usize,
}

#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    patients: Vec<PatientRecord>,
    by_id: BTreeMap<String, usize>,
    registered: Vec<i64>,
    facts: Vec<Vec<Fact>>,
    codes: Vec<String>,
    orders: Vec<DiagnosticOrder>,
    order_patient: Vec<usize>,
    results: Vec<Vec<LabResult>>,
    order_by_id: BTreeMap<String, usize>,
    withheld: BTreeSet<String>,
    units: BTreeMap<String, Vec<usize>>,
    /// Severity-tilted patient draw for orders after a covariate shift.
    tilted: Option<WeightedIndex<f64>>,
}

fn round2(v: f64) -> f64 {
    libm::round(v * 100.0) / 100.0
}

fn secs(t: Timestamp) -> i64 {
    t.timestamp()
}

pub fn condition_code(j: usize) -> String {
    const LETTERS: &[u8; 26] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";
    format!("{}{:03}", LETTERS[j % 26] as char, j / 26)
}

pub fn medication_code(j: usize) -> String {
    format!("RX{j:04}")
}

/// Build the world. Identical configs give bit-identical worlds.
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    World::generate(config.clone())
}

impl World {
    fn generate(config: WorldConfig) -> Result<World> {
        let seed = config.seed;
        let n_cond = config.condition_vocab_size;
        let n_med = config.medication_vocab_size;

        let mut params_rng = rng::stream(seed, "code-params", 0);
        let conditions = CodeParams::sample(&mut params_rng, n_cond);
        let medications = CodeParams::sample(&mut params_rng, n_med);
        let lab_beta: Vec<f64> = ANALYTES.iter().map(|_| params_rng.random_range(0.5..1.0)).collect();

        let mut codes: Vec<String> = (0..n_cond).map(condition_code).collect();
        codes.extend((0..n_med).map(medication_code));
        codes.extend(ANALYTES.iter().map(|a| a.code.to_string()));
        let med_base = n_cond as u32;
        let lab_base = (n_cond + n_med) as u32;

        let sex_dist = WeightedIndex::new(SEX_WEIGHTS).unwrap();
        let race_dist = WeightedIndex::new(RACE_WEIGHTS).unwrap();
        let panel_dist = WeightedIndex::new(LAB_PANEL_WEIGHTS).unwrap();
        let age_dist = Normal::<f64>::new(51.4, 23.7).unwrap();

        let start = secs(config.start);
        let order_start = secs(config.order_start);
        let end = secs(config.end);

        let mut world = World {
            patients: Vec::with_capacity(config.n_patients),
            by_id: BTreeMap::new(),
            registered: Vec::with_capacity(config.n_patients),
            facts: Vec::with_capacity(config.n_patients),
            codes,
            orders: Vec::new(),
            order_patient: Vec::new(),
            results: Vec::new(),
            order_by_id: BTreeMap::new(),
            withheld: BTreeSet::new(),
            units: BTreeMap::new(),
            tilted: None,
            config,
        };

        for i in 0..world.config.n_patients {
            let mut prng = rng::stream(seed, "patient", i as u64);
            let sex = Sex::ALL[sex_dist.sample(&mut prng)];
            let race = Race::ALL[race_dist.sample(&mut prng)];
            let age: f64 = age_dist.sample(&mut prng).clamp(0.5, 99.0);
            let z: f64 = prng.sample(StandardNormal);
            let unit = prng.random_range(0..world.config.n_units);
            let reg_offset: f64 = prng.random_range(1.0..REGISTRATION_WINDOW_SECS);
            let registered = start + reg_offset as i64;
            let birth = world.config.order_start
                - TimeDelta::seconds((age * SECONDS_PER_YEAR) as i64);
            let patient_id = format!("PAT{:06}", i + 1);
            let unit_id = format!("UNIT-{unit:02}");

            let mut facts = Vec::new();

            // Problem list, all onsets before the first order year.
            let mut crng = rng::stream(seed, "conditions", i as u64);
            let lambda = CONDITION_MEAN * libm::exp(CONDITION_SEVERITY * z);
            let k = Poisson::new(lambda).unwrap().sample(&mut crng) as usize;
            let mut onsets: Vec<i64> = (0..k)
                .map(|_| crng.random_range(registered + 1..order_start))
                .collect();
            onsets.sort_unstable();
            let cond_dist = conditions.weights(z);
            for t in onsets {
                let code = cond_dist.sample(&mut crng) as u32;
                facts.push(Fact { time: t, code, kind: EventKind::Condition, value: 0.0, abnormal: false });
            }

            // Medication orders as a severity-modulated Poisson process.
            let mut mrng = rng::stream(seed, "medications", i as u64);
            let med_dist = medications.weights(z);
            let med_rate = MEDICATION_RATE * libm::exp(RATE_SEVERITY * z) / SECONDS_PER_YEAR;
            let mut t = registered as f64;
            loop {
                let gap: f64 = Exp1.sample(&mut mrng);
                t += gap / med_rate;
                if t >= end as f64 {
                    break;
                }
                let ts = t as i64;
                let code = med_base + med_dist.sample(&mut mrng) as u32;
                facts.push(Fact { time: ts, code, kind: EventKind::Medication, value: 0.0, abnormal: false });
            }

            // Routine lab draws; each draw reports every analyte of one panel.
            let mut lrng = rng::stream(seed, "labs", i as u64);
            let lab_rate = LAB_DRAW_RATE * libm::exp(RATE_SEVERITY * z) / SECONDS_PER_YEAR;
            let mut t = registered as f64;
            loop {
                let gap: f64 = Exp1.sample(&mut lrng);
                t += gap / lab_rate;
                if t >= end as f64 {
                    break;
                }
                let ts = t as i64;
                let panel = Panel::ALL[panel_dist.sample(&mut lrng)];
                for code in panel.components() {
                    let ai = analyte_index(code);
                    let a = &ANALYTES[ai];
                    let noise: f64 = lrng.sample(StandardNormal);
                    let mid = 0.5 * (a.ref_low + a.ref_high);
                    let value = round2(mid + a.sd * (lab_beta[ai] * z + LAB_NOISE * noise));
                    facts.push(Fact {
                        time: ts,
                        code: lab_base + ai as u32,
                        kind: EventKind::LabResult,
                        value,
                        abnormal: a.is_abnormal(value),
                    });
                }
            }

            facts.sort_by_key(|f| f.time);
            world.units.entry(unit_id.clone()).or_default().push(i);
            world.by_id.insert(patient_id.clone(), i);
            world.patients.push(PatientRecord {
                patient_id,
                birth_date: birth.date_naive(),
                sex,
                race,
                unit_id,
                severity: z,
            });
            world.registered.push(registered);
            world.facts.push(facts);
        }

        world.tilted = match world.drift() {
            Some(d) if d.covariate_shift != 0.0 => {
                let w: Vec<f64> = world.patients.iter().map(|p| libm::exp(d.covariate_shift * p.severity)).collect();
                Some(WeightedIndex::new(w).map_err(|_| Error::InvalidConfig("covariate_shift too large".into()))?)
            }
            _ => None,
        };

        // Retrospective diagnostic orders: one Poisson stream per panel,
        // patients drawn as `draw_order_patient` does, merged by time.
        let mut pending: Vec<(i64, usize, usize)> = Vec::new();
        let n = world.config.n_patients;
        for panel in Panel::ALL {
            let per_year = world.config.order_rates.get(panel) * n as f64;
            if per_year <= 0.0 {
                continue;
            }
            let mut orng = rng::stream(seed, "orders", panel.index() as u64);
            let mut t = order_start as f64;
            let stop = secs(world.config.prospective_start) as f64;
            loop {
                let gap: f64 = Exp1.sample(&mut orng);
                t += gap * SECONDS_PER_YEAR / per_year;
                if t >= stop {
                    break;
                }
                let p = world.draw_order_patient(&mut orng, t as i64);
                pending.push((t as i64, panel.index(), p));
            }
        }
        pending.sort_unstable();
        for (t, pi, p) in pending {
            world.insert_order(p, Panel::ALL[pi], time::from_unix(t));
        }
        Ok(world)
    }

    fn drift(&self) -> Option<&DriftConfig> {
        self.config.drift.as_ref()
    }

    fn drift_active(&self, t: i64) -> bool {
        self.drift().is_some_and(|d| t >= secs(d.start_time))
    }

    /// Index of the patient behind a new order at `t`. Uniform, except that
    /// under covariate shift patients are drawn with weight `exp(δ z)`, which
    /// moves the presenting population's severity from N(0, 1) to N(δ, 1)
    /// while leaving each patient's own record and outcome model alone.
    fn draw_order_patient<R: Rng + ?Sized>(&self, rng: &mut R, t: i64) -> usize {
        match &self.tilted {
            Some(dist) if self.drift_active(t) => dist.sample(rng),
            _ => rng.random_range(0..self.patients.len()),
        }
    }

    /// A patient for a new order signed at `t`, drawn the way the world
    /// draws its own orders.
    pub fn presenting_patient<R: Rng + ?Sized>(&self, rng: &mut R, t: Timestamp) -> &PatientRecord {
        &self.patients[self.draw_order_patient(rng, secs(t))]
    }

    fn insert_order(&mut self, patient: usize, panel: Panel, order_time: Timestamp) -> DiagnosticOrder {
        let seq = self.orders.len() as u64;
        let order_id = format!("ORD{:08}", seq + 1);
        let order = DiagnosticOrder {
            order_id: order_id.clone(),
            patient_id: self.patients[patient].patient_id.clone(),
            panel_code: panel,
            component_codes: panel.components().iter().map(|c| c.to_string()).collect(),
            order_time,
        };
        let results = self.draw_results(seq, patient, panel, &order_id, order_time);
        self.order_by_id.insert(order_id, self.orders.len());
        self.orders.push(order.clone());
        self.order_patient.push(patient);
        self.results.push(results);
        order
    }

    fn draw_results(&self, seq: u64, patient: usize, panel: Panel, order_id: &str, order_time: Timestamp) -> Vec<LabResult> {
        let t = secs(order_time);
        let z = self.patients[patient].severity;
        let active = self.drift().filter(|_| self.drift_active(t));
        let concept = active.map_or(0.0, |d| d.concept_shift);
        let loading = COUPLING * self.config.signal_strength;
        let result_time = order_time + self.config.result_delay;
        panel
            .components()
            .iter()
            .enumerate()
            .map(|(ci, code)| {
                let a = analyte(code).unwrap();
                let mut r = rng::stream(self.config.seed, "result", seq * 16 + ci as u64);
                let hidden: f64 = r.sample(StandardNormal);
                let u: f64 = r.sample(Open01);
                let logistic = libm::log(u / (1.0 - u));
                let shift = active.and_then(|d| d.prevalence_shift.get(*code)).copied().unwrap_or(0.0);
                let latent = loading * (1.0 - concept) * z + loading * concept * hidden + logistic + shift;
                let value = round2(a.ref_high + a.sd * (latent - a.threshold) / RESULT_SPREAD);
                LabResult {
                    order_id: order_id.to_string(),
                    component_code: code.to_string(),
                    value,
                    ref_low: a.ref_low,
                    ref_high: a.ref_high,
                    abnormal: a.is_abnormal(value),
                    result_time,
                }
            })
            .collect()
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn patient_index(&self, patient_id: &str) -> Option<usize> {
        self.by_id.get(patient_id).copied()
    }

    /// Demographics visible at `now`; unregistered patients do not exist yet.
    pub fn patient(&self, patient_id: &str, now: Timestamp) -> Option<&PatientRecord> {
        let i = self.patient_index(patient_id)?;
        (self.registered[i] <= secs(now)).then(|| &self.patients[i])
    }

    fn event(&self, patient: usize, f: &Fact) -> ClinicalEvent {
        let lab = f.kind == EventKind::LabResult;
        ClinicalEvent {
            patient_id: self.patients[patient].patient_id.clone(),
            kind: f.kind,
            code: self.codes[f.code as usize].clone(),
            numeric_value: lab.then_some(f.value),
            abnormal: lab.then_some(f.abnormal),
            effective_time: time::from_unix(f.time),
        }
    }

    /// Events of one kind with `since <= effective_time <= now`.
    pub fn events(&self, patient_id: &str, kind: EventKind, since: Option<Timestamp>, now: Timestamp) -> Result<Vec<ClinicalEvent>> {
        let i = self
            .patient(patient_id, now)
            .and_then(|p| self.patient_index(&p.patient_id))
            .ok_or_else(|| Error::PatientNotFound(patient_id.to_string()))?;
        let lo = since.map_or(i64::MIN, secs);
        let hi = secs(now);
        let facts = &self.facts[i];
        let first = facts.partition_point(|f| f.time < lo);
        Ok(facts[first..]
            .iter()
            .take_while(|f| f.time <= hi)
            .filter(|f| f.kind == kind)
            .map(|f| self.event(i, f))
            .collect())
    }

    /// Result of one order component, if it has matured by `now`.
    pub fn result(&self, order_id: &str, component: &str, now: Timestamp) -> Result<Option<LabResult>> {
        let oi = *self
            .order_by_id
            .get(order_id)
            .ok_or_else(|| Error::OrderNotFound(order_id.to_string()))?;
        if self.orders[oi].order_time > now || self.withheld.contains(order_id) {
            return Ok(None);
        }
        Ok(self.results[oi]
            .iter()
            .find(|r| r.component_code == component && r.result_time <= now)
            .cloned())
    }

    pub fn order(&self, order_id: &str) -> Option<&DiagnosticOrder> {
        self.order_by_id.get(order_id).map(|&i| &self.orders[i])
    }

    pub fn orders(&self) -> &[DiagnosticOrder] {
        &self.orders
    }

    /// Patient ids assigned to `unit_id`, visible at `now`.
    pub fn unit_roster(&self, unit_id: &str, now: Timestamp) -> Vec<String> {
        self.units
            .get(unit_id)
            .map(|members| {
                members
                    .iter()
                    .filter(|&&i| self.registered[i] <= secs(now))
                    .map(|&i| self.patients[i].patient_id.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn unit_ids(&self) -> impl Iterator<Item = &str> {
        self.units.keys().map(String::as_str)
    }

    /// Sign a new diagnostic order. Results are drawn immediately and become
    /// visible at `time + result_delay`.
    pub fn place_order(&mut self, patient_id: &str, panel: Panel, time: Timestamp) -> Result<DiagnosticOrder> {
        let i = self
            .patient_index(patient_id)
            .filter(|&i| self.registered[i] <= secs(time))
            .ok_or_else(|| Error::PatientNotFound(patient_id.to_string()))?;
        Ok(self.insert_order(i, panel, time))
    }

    /// Hide an order's results from every query, as if the lab never reported.
    pub fn withhold_results(&mut self, order_id: &str) -> Result<()> {
        if !self.order_by_id.contains_key(order_id) {
            return Err(Error::OrderNotFound(order_id.to_string()));
        }
        self.withheld.insert(order_id.to_string());
        Ok(())
    }

    pub fn counts(&self) -> FactCounts {
        FactCounts {
            patients: self.patients.len(),
            events: self.facts.iter().map(Vec::len).sum(),
            orders: self.orders.len(),
            results: self.results.iter().map(Vec::len).sum(),
        }
    }

    /// Warehouse snapshot: every fact with its timestamp at or before `up_to`.
    /// Rows are ordered by patient then time, orders by id.
    pub fn warehouse(&self, up_to: Timestamp) -> Warehouse {
        let cut = secs(up_to);
        let mut wh = Warehouse::default();
        for (i, p) in self.patients.iter().enumerate() {
            if self.registered[i] > cut {
                continue;
            }
            wh.patients.push(p.row());
            wh.events.extend(
                self.facts[i]
                    .iter()
                    .take_while(|f| f.time <= cut)
                    .map(|f| self.event(i, f)),
            );
        }
        for (o, rs) in self.orders.iter().zip(&self.results) {
            if o.order_time > up_to {
                continue;
            }
            wh.orders.push(o.clone());
            if !self.withheld.contains(&o.order_id) {
                wh.results.extend(rs.iter().filter(|r| r.result_time <= up_to).cloned());
            }
        }
        wh
    }
}
