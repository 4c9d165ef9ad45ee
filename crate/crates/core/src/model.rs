//! Threshold selection, the deployable bundle and the training pipeline.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cohort::{build_cohort, Cohort, CohortRow, Split};
use crate::error::{Error, Result};
use crate::features::{build_vocabulary, featurize, PatientHistory, Vectorized, Vocabulary, Windows};
use crate::fingerprint::{CanonicalHasher, Fingerprint};
use crate::forest::{train_forest, Classifier, Forest, ForestParams};
use crate::serde_float;
use crate::time::Timestamp;
use crate::warehouse::{Warehouse, WarehouseIndex};
use crate::world::Panel;

pub const FALLBACK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f64,
    /// True when the validation data could not support a cut and 0.5 was used.
    pub fallback: bool,
}

/// Maximize Youden's J over midpoints between consecutive distinct scores.
/// Equal J goes to the higher specificity, which is the higher cut.
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> Result<ThresholdChoice> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    let p = labels.iter().filter(|&&l| l).count() as u128;
    let n = labels.len() as u128 - p;
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    if pairs.iter().any(|s| s.0.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let fallback = ThresholdChoice { threshold: FALLBACK_THRESHOLD, fallback: true };
    if p == 0 || n == 0 {
        return Ok(fallback);
    }
    // Walk cuts from low to high; at each gap, everything above is positive.
    let (mut tp, mut fp) = (p, n);
    let mut best: Option<(u128, u128, f64)> = None;
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        if i == pairs.len() {
            break;
        }
        let cut = 0.5 * (s + pairs[i].0);
        let tn = n - fp;
        // J + 1 scaled by p * n, exact in integers.
        let j = tp * n + tn * p;
        let better = match best {
            None => true,
            Some((bj, btn, _)) => j > bj || (j == bj && tn >= btn),
        };
        if better {
            best = Some((j, tn, cut));
        }
    }
    Ok(match best {
        Some((_, _, threshold)) => ThresholdChoice { threshold, fallback: false },
        None => fallback,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub model_id: String,
    pub panel_code: Panel,
    pub component_code: String,
    pub vocabulary: Vocabulary,
    pub forest: Forest,
    #[serde(with = "serde_float")]
    pub decision_threshold: f64,
    pub created_at: Timestamp,
    pub training_fingerprint: Fingerprint,
}

impl Classifier for ModelBundle {
    fn vocab_fingerprint(&self) -> Fingerprint {
        self.vocabulary.fingerprint()
    }

    fn score_unchecked(&self, x: &crate::features::FeatureVector) -> f64 {
        self.forest.score_unchecked(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub features: Vectorized,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        if !self.panel_code.components().contains(&self.component_code.as_str()) {
            return Err(Error::Integrity(format!(
                "component {} is not part of panel {}",
                self.component_code,
                self.panel_code.as_str()
            )));
        }
        if self.vocabulary.len() != self.forest.n_features {
            return Err(Error::Integrity(format!(
                "vocabulary has {} tokens but forest expects {} features",
                self.vocabulary.len(),
                self.forest.n_features
            )));
        }
        if self.vocabulary.fingerprint() != self.forest.vocab_fingerprint {
            return Err(Error::VocabularyMismatch {
                expected: self.forest.vocab_fingerprint,
                actual: self.vocabulary.fingerprint(),
            });
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(Error::Integrity(format!("decision threshold {} outside (0, 1)", self.decision_threshold)));
        }
        self.forest.validate()
    }

    pub fn score_history(&self, history: &PatientHistory) -> Result<Scored> {
        let features = featurize(history, &self.vocabulary);
        let score = self.predict_proba(&features.vector)?;
        Ok(Scored { score, features })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub per_year: usize,
    pub years: Vec<i32>,
    pub forest: ForestParams,
    pub windows: Windows,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            per_year: 2000,
            years: (2015..=2021).collect(),
            forest: ForestParams::default(),
            windows: Windows::default(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub model_id: String,
    pub panel_code: Panel,
    pub component_code: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRow {
    pub row: CohortRow,
    pub score: f64,
    pub features: Vectorized,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub bundle: ModelBundle,
    pub cohort: Cohort,
    pub threshold: ThresholdChoice,
    pub validation: Vec<ScoredRow>,
    pub test: Vec<ScoredRow>,
}

fn training_fingerprint(rows: &[CohortRow], cfg: &TrainConfig) -> Fingerprint {
    let mut h = CanonicalHasher::new();
    h.str("deployr.training/1").u64(rows.len() as u64);
    for r in rows {
        h.str(&r.order_id).str(&r.component_code).u64(r.label as u64).u64(r.split as u64);
    }
    let f = &cfg.forest;
    h.u64(f.n_trees as u64)
        .u64(f.max_depth as u64)
        .u64(f.min_leaf as u64)
        .u64(f.mtry.map_or(u64::MAX, |m| m as u64))
        .u64(cfg.windows.medication_days as u64)
        .u64(cfg.windows.lab_days as u64)
        .u64(cfg.seed);
    h.finish()
}

/// Build the cohort, fit vocabulary and forest on the training years, pick
/// the threshold on validation and score the test year.
pub fn train_model(warehouse: &Warehouse, task: &Task, cfg: &TrainConfig, created_at: Timestamp) -> Result<TrainedModel> {
    let cohort = build_cohort(warehouse, task.panel_code, &task.component_code, cfg.per_year, &cfg.years, cfg.seed)?;
    let idx = WarehouseIndex::new(warehouse);
    let history = |r: &CohortRow| idx.load_history(&r.patient_id, r.inference_time, cfg.windows);

    let train_rows: Vec<&CohortRow> = cohort.split(Split::Train).collect();
    let train_hist = train_rows.iter().map(|r| history(r)).collect::<Result<Vec<_>>>()?;
    let vocabulary = build_vocabulary(&train_hist, cfg.windows)?;
    let x: Vec<_> = train_hist.iter().map(|h| featurize(h, &vocabulary).vector).collect();
    let y: Vec<bool> = train_rows.iter().map(|r| r.label).collect();
    let forest = train_forest(&x, &y, vocabulary.len(), cfg.forest, cfg.seed)?;

    let score_split = |split: Split| -> Result<Vec<ScoredRow>> {
        cohort
            .split(split)
            .map(|r| {
                let features = featurize(&history(r)?, &vocabulary);
                let score = forest.predict_proba(&features.vector)?;
                Ok(ScoredRow { row: r.clone(), score, features })
            })
            .collect()
    };
    let validation = score_split(Split::Validation)?;
    let vs: Vec<f64> = validation.iter().map(|s| s.score).collect();
    let vl: Vec<bool> = validation.iter().map(|s| s.row.label).collect();
    let threshold = select_threshold(&vs, &vl)?;
    let test = score_split(Split::Test)?;

    let fit_rows: Vec<CohortRow> = cohort.rows.iter().filter(|r| r.split != Split::Test).cloned().collect();
    let bundle = ModelBundle {
        model_id: task.model_id.clone(),
        panel_code: task.panel_code,
        component_code: task.component_code.clone(),
        vocabulary,
        forest,
        decision_threshold: threshold.threshold,
        created_at,
        training_fingerprint: training_fingerprint(&fit_rows, cfg),
    };
    bundle.validate()?;
    Ok(TrainedModel { bundle, cohort, threshold, validation, test })
}
