//! Count featurization.
//!
//! A [`PatientHistory`] is built by one of two adapters (warehouse rows or
//! the transactional API) through the same [`PatientHistory::assemble`]
//! mapping, so the tokenizer never knows which source it is reading.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::{CanonicalHasher, Fingerprint};
use crate::time::{self, Timestamp};
use crate::warehouse::PatientRow;
use crate::world::{ClinicalEvent, EventKind, Race, Sex};

pub const AGE_CODE: &str = "age";
pub const N_BINS: usize = 5;
const VOCAB_FORMAT: &str = "deployr.vocabulary/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Windows {
    pub medication_days: i64,
    pub lab_days: i64,
}

impl Default for Windows {
    fn default() -> Self {
        Self { medication_days: 28, lab_days: 14 }
    }
}

impl Windows {
    /// How far back the transactional adapter has to read.
    pub fn max_lookback(&self) -> TimeDelta {
        time::days(self.medication_days.max(self.lab_days))
    }

    fn medication_ok(&self, event: Timestamp, at: Timestamp) -> bool {
        at - event <= time::days(self.medication_days)
    }

    fn lab_ok(&self, event: Timestamp, at: Timestamp) -> bool {
        at - event <= time::days(self.lab_days)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub age_at_inference: f64,
    pub sex: Sex,
    pub race: Race,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientHistory {
    pub demographics: Demographics,
    pub conditions: Vec<(String, Timestamp)>,
    pub medications: Vec<(String, Timestamp)>,
    pub labs: Vec<(String, f64, Timestamp)>,
    pub inference_time: Timestamp,
}

impl PatientHistory {
    /// The single mapping from demographics plus raw events to a history.
    /// Keeps events strictly before `inference_time` and inside the
    /// medication and lab windows, then sorts canonically so the source
    /// order of rows never matters.
    pub fn assemble<'e>(
        patient: &PatientRow,
        events: impl IntoIterator<Item = &'e ClinicalEvent>,
        inference_time: Timestamp,
        windows: Windows,
    ) -> Self {
        let mut h = PatientHistory {
            demographics: Demographics {
                age_at_inference: time::age_years(patient.birth_date, inference_time),
                sex: patient.sex,
                race: patient.race,
            },
            conditions: Vec::new(),
            medications: Vec::new(),
            labs: Vec::new(),
            inference_time,
        };
        for e in events {
            let t = e.effective_time;
            if t >= inference_time {
                continue;
            }
            match e.kind {
                EventKind::Condition => h.conditions.push((e.code.clone(), t)),
                EventKind::Medication if windows.medication_ok(t, inference_time) => {
                    h.medications.push((e.code.clone(), t))
                }
                EventKind::LabResult if windows.lab_ok(t, inference_time) => {
                    if let Some(v) = e.numeric_value {
                        h.labs.push((e.code.clone(), v, t));
                    }
                }
                _ => {}
            }
        }
        h.conditions.sort_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)));
        h.medications.sort_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)));
        h.labs.sort_by(|a, b| (a.2, &a.0).cmp(&(b.2, &b.0)).then(a.1.total_cmp(&b.1)));
        h
    }
}

pub fn sex_token(sex: Sex) -> String {
    format!("sex_{}", sex.as_str())
}

pub fn race_token(race: Race) -> String {
    format!("race_{}", race.as_str())
}

pub fn numeric_token(code: &str, bin: usize) -> String {
    format!("{code}#{bin}")
}

/// `|{i : value > edge_i}|`; ties at an edge go to the lower bin.
pub fn bin_numeric(value: f64, edges: &[f64; 4]) -> usize {
    edges.iter().filter(|&&e| value > e).count()
}

/// Quintile edges by nearest rank: the k-th edge is the
/// `ceil(k * n / 5)`-th smallest value.
pub fn quintile_edges(values: &[f64]) -> Result<[f64; 4]> {
    if values.is_empty() {
        return Err(Error::InvalidInput("no values to derive bin edges from".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mut edges = [0.0; 4];
    for (k, e) in edges.iter_mut().enumerate() {
        let rank = ((k + 1) * n).div_ceil(N_BINS);
        *e = v[rank - 1];
    }
    Ok(edges)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyDoc", into = "VocabularyDoc")]
pub struct Vocabulary {
    token_to_index: BTreeMap<String, u32>,
    tokens: Vec<String>,
    numeric_bin_edges: BTreeMap<String, [f64; 4]>,
    windows: Windows,
    fingerprint: Fingerprint,
}

#[derive(Serialize, Deserialize)]
struct VocabularyDoc {
    format: String,
    tokens: Vec<String>,
    numeric_bin_edges: BTreeMap<String, [f64; 4]>,
    windows: Windows,
    fingerprint: Fingerprint,
}

impl From<Vocabulary> for VocabularyDoc {
    fn from(v: Vocabulary) -> Self {
        VocabularyDoc {
            format: VOCAB_FORMAT.to_string(),
            tokens: v.tokens,
            numeric_bin_edges: v.numeric_bin_edges,
            windows: v.windows,
            fingerprint: v.fingerprint,
        }
    }
}

impl TryFrom<VocabularyDoc> for Vocabulary {
    type Error = Error;

    fn try_from(doc: VocabularyDoc) -> Result<Self> {
        if doc.format != VOCAB_FORMAT {
            return Err(Error::Integrity(format!("unsupported vocabulary format `{}`", doc.format)));
        }
        let vocab = Vocabulary::from_parts(doc.tokens, doc.numeric_bin_edges, doc.windows)?;
        if vocab.fingerprint != doc.fingerprint {
            return Err(Error::Integrity(format!(
                "vocabulary fingerprint {} does not match contents {}",
                doc.fingerprint, vocab.fingerprint
            )));
        }
        Ok(vocab)
    }
}

impl Vocabulary {
    /// Build from a token table in index order. Tokens must be unique.
    pub fn from_parts(tokens: Vec<String>, numeric_bin_edges: BTreeMap<String, [f64; 4]>, windows: Windows) -> Result<Self> {
        let mut token_to_index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if token_to_index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Integrity(format!("duplicate vocabulary token `{t}`")));
            }
        }
        for (code, e) in &numeric_bin_edges {
            if e.windows(2).any(|w| w[0] > w[1]) || e.iter().any(|x| !x.is_finite()) {
                return Err(Error::Integrity(format!("bin edges of `{code}` are not ascending")));
            }
        }
        let mut h = CanonicalHasher::new();
        h.str(VOCAB_FORMAT).u64(tokens.len() as u64);
        for t in &tokens {
            h.str(t);
        }
        h.u64(numeric_bin_edges.len() as u64);
        for (code, e) in &numeric_bin_edges {
            h.str(code);
            for x in e {
                h.f64(*x);
            }
        }
        h.u64(windows.medication_days as u64).u64(windows.lab_days as u64);
        let fingerprint = h.finish();
        Ok(Self { token_to_index, tokens, numeric_bin_edges, windows, fingerprint })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index(&self, token: &str) -> Option<u32> {
        self.token_to_index.get(token).copied()
    }

    pub fn token(&self, index: u32) -> Option<&str> {
        self.tokens.get(index as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn edges(&self, code: &str) -> Option<&[f64; 4]> {
        self.numeric_bin_edges.get(code)
    }

    pub fn numeric_bin_edges(&self) -> &BTreeMap<String, [f64; 4]> {
        &self.numeric_bin_edges
    }

    pub fn windows(&self) -> Windows {
        self.windows
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }
}

/// Build the vocabulary from training histories only. Categorical tokens are
/// the windowed codes and demographic values observed; every numeric code
/// (each lab and age) gets quintile edges and all five bin tokens.
pub fn build_vocabulary(histories: &[PatientHistory], windows: Windows) -> Result<Vocabulary> {
    if histories.is_empty() {
        return Err(Error::InvalidInput("cannot build a vocabulary from an empty training set".into()));
    }
    let mut categorical = alloc::collections::BTreeSet::new();
    let mut numeric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for h in histories {
        let t = h.inference_time;
        categorical.insert(sex_token(h.demographics.sex));
        categorical.insert(race_token(h.demographics.race));
        numeric.entry(AGE_CODE.to_string()).or_default().push(h.demographics.age_at_inference);
        for (code, at) in &h.conditions {
            if *at < t {
                categorical.insert(code.clone());
            }
        }
        for (code, at) in &h.medications {
            if *at < t && windows.medication_ok(*at, t) {
                categorical.insert(code.clone());
            }
        }
        for (code, v, at) in &h.labs {
            if *at < t && windows.lab_ok(*at, t) {
                numeric.entry(code.clone()).or_default().push(*v);
            }
        }
    }
    let mut edges = BTreeMap::new();
    for (code, values) in &numeric {
        edges.insert(code.clone(), quintile_edges(values)?);
        for b in 0..N_BINS {
            categorical.insert(numeric_token(code, b));
        }
    }
    Vocabulary::from_parts(categorical.into_iter().collect(), edges, windows)
}

/// Token multiset of a history. Order follows the history; the count vector
/// does not depend on it.
pub fn tokenize_history(history: &PatientHistory, vocab: &Vocabulary) -> Vec<String> {
    let t = history.inference_time;
    let w = vocab.windows();
    let d = &history.demographics;
    let mut tokens = Vec::with_capacity(3 + history.conditions.len() + history.medications.len() + history.labs.len());
    tokens.push(sex_token(d.sex));
    tokens.push(race_token(d.race));
    tokens.push(numeric_or_raw(vocab, AGE_CODE, d.age_at_inference));
    for (code, at) in &history.conditions {
        if *at < t {
            tokens.push(code.clone());
        }
    }
    for (code, at) in &history.medications {
        if *at < t && w.medication_ok(*at, t) {
            tokens.push(code.clone());
        }
    }
    for (code, v, at) in &history.labs {
        if *at < t && w.lab_ok(*at, t) {
            tokens.push(numeric_or_raw(vocab, code, *v));
        }
    }
    tokens
}

/// A numeric code the vocabulary has no edges for yields its bare code,
/// which is never a vocabulary token and is dropped as out-of-vocabulary.
fn numeric_or_raw(vocab: &Vocabulary, code: &str, value: f64) -> String {
    match vocab.edges(code) {
        Some(e) => numeric_token(code, bin_numeric(value, e)),
        None => code.to_string(),
    }
}

/// Sparse count vector, entries sorted by index with counts >= 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureVector {
    pub entries: Vec<(u32, u32)>,
    pub vocab_fingerprint: Fingerprint,
}

impl FeatureVector {
    pub fn count(&self, index: u32) -> u32 {
        self.entries
            .binary_search_by_key(&index, |e| e.0)
            .map_or(0, |i| self.entries[i].1)
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.1 as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vectorized {
    pub vector: FeatureVector,
    pub oov_count: u32,
}

pub fn vectorize<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Vectorized {
    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    let mut oov_count = 0;
    for t in tokens {
        match vocab.index(t.as_ref()) {
            Some(i) => *counts.entry(i).or_default() += 1,
            None => oov_count += 1,
        }
    }
    Vectorized {
        vector: FeatureVector { entries: counts.into_iter().collect(), vocab_fingerprint: vocab.fingerprint() },
        oov_count,
    }
}

/// Tokenize and vectorize in one step.
pub fn featurize(history: &PatientHistory, vocab: &Vocabulary) -> Vectorized {
    vectorize(&tokenize_history(history, vocab), vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn row() -> PatientRow {
        PatientRow {
            patient_id: "PAT000001".into(),
            birth_date: NaiveDate::from_ymd_opt(1970, 1, 1).unwrap(),
            sex: Sex::Female,
            race: Race::Asian,
            unit_id: "UNIT-00".into(),
        }
    }

    fn event(kind: EventKind, code: &str, value: Option<f64>, t: Timestamp) -> ClinicalEvent {
        ClinicalEvent {
            patient_id: "PAT000001".into(),
            kind,
            code: code.into(),
            numeric_value: value,
            abnormal: value.map(|_| false),
            effective_time: t,
        }
    }

    #[test]
    fn quintile_edges_nearest_rank() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(quintile_edges(&v).unwrap(), [2.0, 4.0, 6.0, 8.0]);
        assert_eq!(quintile_edges(&[3.5]).unwrap(), [3.5; 4]);
        assert!(quintile_edges(&[]).is_err());
    }

    #[test]
    fn binning_examples() {
        let e = [2.0, 4.0, 6.0, 8.0];
        assert_eq!(bin_numeric(5.0, &e), 2);
        assert_eq!(bin_numeric(f64::MIN, &e), 0);
        assert_eq!(bin_numeric(100.0, &e), 4);
        assert_eq!(bin_numeric(2.0, &e), 0);
        let flat = [3.0; 4];
        assert_eq!(bin_numeric(3.0, &flat), 0);
        assert_eq!(bin_numeric(3.01, &flat), 4);
    }

    #[test]
    fn window_boundaries() {
        let t = time::ymd(2020, 6, 1);
        let events = [
            event(EventKind::Medication, "RX0001", None, t - time::days(29)),
            event(EventKind::Medication, "RX0002", None, t - time::days(27)),
            event(EventKind::LabResult, "HGB", Some(10.0), t - time::days(15)),
            event(EventKind::LabResult, "HCT", Some(40.0), t - time::days(13)),
            event(EventKind::Condition, "A000", None, t - time::days(3000)),
            event(EventKind::Condition, "B000", None, t),
        ];
        let h = PatientHistory::assemble(&row(), &events, t, Windows::default());
        assert_eq!(h.medications, [("RX0002".to_string(), t - time::days(27))]);
        assert_eq!(h.labs.len(), 1);
        assert_eq!(h.labs[0].0, "HCT");
        assert_eq!(h.conditions.len(), 1);
        assert_eq!(h.conditions[0].0, "A000");
    }

    #[test]
    fn window_edges_are_inclusive() {
        let t = time::ymd(2020, 6, 1);
        let events = [
            event(EventKind::Medication, "RX0001", None, t - time::days(28)),
            event(EventKind::LabResult, "HGB", Some(10.0), t - time::days(14)),
        ];
        let h = PatientHistory::assemble(&row(), &events, t, Windows::default());
        assert_eq!(h.medications.len(), 1);
        assert_eq!(h.labs.len(), 1);
    }

    #[test]
    fn empty_history_tokenizes_to_demographics() {
        let t = time::ymd(2020, 6, 1);
        let h = PatientHistory::assemble(&row(), &[], t, Windows::default());
        let vocab = build_vocabulary(&[h.clone()], Windows::default()).unwrap();
        let tokens = tokenize_history(&h, &vocab);
        assert_eq!(tokens.len(), 3);
        assert_eq!(tokens[0], "sex_Female");
        assert_eq!(tokens[1], "race_Asian");
        assert!(tokens[2].starts_with("age#"));
    }

    #[test]
    fn shared_codes_get_one_index() {
        let t = time::ymd(2020, 6, 1);
        let e = [event(EventKind::Condition, "E11", None, t - time::days(10))];
        let a = PatientHistory::assemble(&row(), &e, t, Windows::default());
        let b = PatientHistory::assemble(&row(), &e, t + time::days(1), Windows::default());
        let vocab = build_vocabulary(&[a, b], Windows::default()).unwrap();
        assert_eq!(vocab.tokens().iter().filter(|t| *t == "E11").count(), 1);
        // E11, sex, race and five age bins.
        assert_eq!(vocab.len(), 8);
        for (i, tok) in vocab.tokens().iter().enumerate() {
            assert_eq!(vocab.index(tok), Some(i as u32));
        }
    }

    #[test]
    fn vectorize_counts_and_drops() {
        let vocab = Vocabulary::from_parts(vec!["A".into(), "B".into()], BTreeMap::new(), Windows::default()).unwrap();
        let v = vectorize(&["A", "A", "B"], &vocab);
        assert_eq!(v.vector.entries, [(0, 2), (1, 1)]);
        assert_eq!(v.oov_count, 0);
        let v = vectorize(&["X", "Y", "Z"], &vocab);
        assert!(v.vector.entries.is_empty());
        assert_eq!(v.oov_count, 3);
        assert_eq!(vectorize(&["B", "A", "A"], &vocab), vectorize(&["A", "B", "A"], &vocab));
    }

    #[test]
    fn vocabulary_round_trips_with_fingerprint() {
        let mut edges = BTreeMap::new();
        edges.insert("HGB".to_string(), [1.0, 2.5, 2.5, 9.125]);
        let vocab = Vocabulary::from_parts(vec!["HGB#0".into(), "x".into()], edges, Windows::default()).unwrap();
        let json = serde_json::to_string(&vocab).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.fingerprint(), vocab.fingerprint());
        let tampered = json.replace("\"x\"", "\"y\"");
        assert!(serde_json::from_str::<Vocabulary>(&tampered).is_err());
    }

    #[test]
    fn duplicate_rows_are_preserved() {
        let t = time::ymd(2020, 6, 1);
        let e = event(EventKind::Medication, "RX0003", None, t - time::days(1));
        let h = PatientHistory::assemble(&row(), &[e.clone(), e], t, Windows::default());
        let vocab = build_vocabulary(&[h.clone()], Windows::default()).unwrap();
        let v = featurize(&h, &vocab).vector;
        assert_eq!(v.count(vocab.index("RX0003").unwrap()), 2);
    }
}
