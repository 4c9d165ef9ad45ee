//! Mean-shift drift statistics over windows of inference packets.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::features::{FeatureVector, Vocabulary};
use crate::metrics::Window;
use crate::serde_float;

pub const DEFAULT_K: f64 = 4.0;

/// Mean and unbiased variance of one quantity over `n` observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    #[serde(with = "serde_float")]
    pub mean: f64,
    #[serde(with = "serde_float")]
    pub var: f64,
    pub n: usize,
}

impl Moments {
    fn from_sums(sum: f64, sum_sq: f64, n: usize) -> Self {
        if n == 0 {
            return Self { mean: f64::NAN, var: f64::NAN, n };
        }
        let mean = sum / n as f64;
        let var = if n > 1 { ((sum_sq - sum * mean) / (n - 1) as f64).max(0.0) } else { 0.0 };
        Self { mean, var, n }
    }

    fn zero(n: usize) -> Self {
        Self { mean: 0.0, var: 0.0, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Quantity {
    Feature { index: u32, token: String },
    PredictionMean,
    LabelMean,
}

impl Quantity {
    pub fn name(&self) -> String {
        match self {
            Quantity::Feature { token, .. } => token.clone(),
            Quantity::PredictionMean => "prediction_mean".to_string(),
            Quantity::LabelMean => "label_mean".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftFlag {
    pub quantity: Quantity,
    #[serde(with = "serde_float")]
    pub baseline_mean: f64,
    #[serde(with = "serde_float")]
    pub window_mean: f64,
    #[serde(with = "serde_float")]
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSnapshot {
    pub model_id: String,
    pub window: Option<Window>,
    pub n: usize,
    /// Features with a nonzero mean; every other feature has mean 0.
    pub features: BTreeMap<u32, Moments>,
    pub prediction: Moments,
    pub label: Moments,
    #[serde(default)]
    pub flags: Vec<DriftFlag>,
}

/// One observation going into a snapshot.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub features: &'a FeatureVector,
    pub score: f64,
    pub label: Option<bool>,
}

/// Per-feature mean counts (absent counts as 0) and prediction mean over all
/// observations; label mean over the labeled ones only.
pub fn drift_snapshot<'a>(model_id: &str, window: Option<Window>, obs: impl IntoIterator<Item = Observation<'a>>) -> DriftSnapshot {
    let mut sums: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    let (mut n, mut ps, mut pss) = (0usize, 0.0, 0.0);
    let (mut ln, mut ls) = (0usize, 0.0);
    for o in obs {
        n += 1;
        ps += o.score;
        pss += o.score * o.score;
        for &(i, c) in &o.features.entries {
            let c = f64::from(c);
            let e = sums.entry(i).or_default();
            e.0 += c;
            e.1 += c * c;
        }
        if let Some(l) = o.label {
            ln += 1;
            ls += f64::from(l as u8);
        }
    }
    DriftSnapshot {
        model_id: model_id.to_string(),
        window,
        n,
        features: sums.into_iter().map(|(i, (s, ss))| (i, Moments::from_sums(s, ss, n))).collect(),
        prediction: Moments::from_sums(ps, pss, n),
        label: Moments::from_sums(ls, ls, ln),
        flags: Vec::new(),
    }
}

/// `|mean_w - mean_b| / se`, where `se` comes from the variance of both
/// samples pooled as one (the null hypothesis is that nothing moved), scaled
/// by `1/n_b + 1/n_w`. A window missing a token the baseline has, or holding
/// one the baseline never saw, then gets a finite, honest z even when the
/// window is small. Infinite when both sides are constant but differ, NaN
/// when either side is empty.
pub fn z_score(window: &Moments, baseline: &Moments) -> f64 {
    if window.n == 0 || baseline.n == 0 || window.mean.is_nan() || baseline.mean.is_nan() {
        return f64::NAN;
    }
    let (nb, nw) = (baseline.n as f64, window.n as f64);
    let n = nb + nw;
    let m = (nb * baseline.mean + nw * window.mean) / n;
    let (db, dw) = (baseline.mean - m, window.mean - m);
    let ss = (nb - 1.0) * baseline.var + (nw - 1.0) * window.var + nb * db * db + nw * dw * dw;
    let pooled = if n > 1.0 { ss / (n - 1.0) } else { 0.0 };
    let diff = libm::fabs(window.mean - baseline.mean);
    let se = libm::sqrt(pooled * (1.0 / nb + 1.0 / nw));
    if se == 0.0 {
        return if diff == 0.0 { 0.0 } else { f64::INFINITY };
    }
    diff / se
}

/// Quantities whose window mean sits more than `k` standard errors from the
/// baseline, features first by index, then prediction and label.
pub fn drift_flag(window: &DriftSnapshot, baseline: &DriftSnapshot, k: f64, vocab: Option<&Vocabulary>) -> Vec<DriftFlag> {
    let mut flags = Vec::new();
    if window.n == 0 || baseline.n == 0 {
        return flags;
    }
    let mut push = |quantity: Quantity, w: &Moments, b: &Moments| {
        let z = z_score(w, b);
        if z > k {
            flags.push(DriftFlag { quantity, baseline_mean: b.mean, window_mean: w.mean, z });
        }
    };
    let indices: alloc::collections::BTreeSet<u32> = window.features.keys().chain(baseline.features.keys()).copied().collect();
    for i in indices {
        let w = window.features.get(&i).copied().unwrap_or(Moments::zero(window.n));
        let b = baseline.features.get(&i).copied().unwrap_or(Moments::zero(baseline.n));
        let token = vocab.and_then(|v| v.token(i)).map_or_else(|| alloc::format!("#{i}"), ToString::to_string);
        push(Quantity::Feature { index: i, token }, &w, &b);
    }
    push(Quantity::PredictionMean, &window.prediction, &baseline.prediction);
    push(Quantity::LabelMean, &window.label, &baseline.label);
    flags
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::Fingerprint;

    fn fv(entries: &[(u32, u32)]) -> FeatureVector {
        FeatureVector { entries: entries.to_vec(), vocab_fingerprint: Fingerprint(0) }
    }

    fn snapshot(rows: &[(FeatureVector, f64, Option<bool>)]) -> DriftSnapshot {
        drift_snapshot(
            "m",
            None,
            rows.iter().map(|(f, s, l)| Observation { features: f, score: *s, label: *l }),
        )
    }

    #[test]
    fn means_use_stated_denominators() {
        let s = snapshot(&[(fv(&[(0, 2)]), 0.2, Some(true)), (fv(&[]), 0.4, None), (fv(&[(0, 1), (3, 1)]), 0.6, Some(false))]);
        assert_eq!(s.n, 3);
        assert_eq!(s.features[&0].mean, 1.0);
        assert!((s.features[&3].mean - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.prediction.mean - 0.4).abs() < 1e-15);
        assert_eq!(s.label.n, 2);
        assert_eq!(s.label.mean, 0.5);
    }

    #[test]
    fn identical_window_raises_nothing() {
        let rows: Vec<_> = (0..50u32).map(|i| (fv(&[(i % 4, 1 + i % 3)]), f64::from(i) / 50.0, Some(i % 2 == 0))).collect();
        let s = snapshot(&rows);
        assert!(drift_flag(&s, &s, DEFAULT_K, None).is_empty());
    }

    #[test]
    fn shifted_feature_and_prediction_are_flagged() {
        let base: Vec<_> = (0..400u32).map(|i| (fv(&[(0, i % 2), (1, 1)]), 0.3 + f64::from(i % 5) * 0.01, None)).collect();
        let shifted: Vec<_> = (0..400u32).map(|i| (fv(&[(0, 2 + i % 2), (1, 1)]), 0.5 + f64::from(i % 5) * 0.01, None)).collect();
        let entries_fixed = |v: &[(FeatureVector, f64, Option<bool>)]| -> Vec<(FeatureVector, f64, Option<bool>)> {
            v.iter().map(|(f, s, l)| (fv(&f.entries.iter().copied().filter(|e| e.1 > 0).collect::<Vec<_>>()), *s, *l)).collect()
        };
        let b = snapshot(&entries_fixed(&base));
        let w = snapshot(&entries_fixed(&shifted));
        let flags = drift_flag(&w, &b, DEFAULT_K, None);
        let names: Vec<_> = flags.iter().map(|f| f.quantity.clone()).collect();
        assert!(names.contains(&Quantity::Feature { index: 0, token: "#0".into() }));
        assert!(names.contains(&Quantity::PredictionMean));
        assert!(!names.iter().any(|q| matches!(q, Quantity::Feature { index: 1, .. })));
    }

    #[test]
    fn small_window_missing_common_tokens_is_not_flagged() {
        let base: Vec<_> = (0..2000u32).map(|i| (fv(if i % 10 == 0 { &[(0, 1)] } else { &[] }), 0.5, None)).collect();
        let window: Vec<_> = (0..15).map(|_| (fv(&[]), 0.5, None)).collect();
        assert!(drift_flag(&snapshot(&window), &snapshot(&base), DEFAULT_K, None).is_empty());
    }

    #[test]
    fn pooled_z_matches_two_proportion_test() {
        // 30/100 against 50/100: pooled p = 0.4, se = sqrt(0.4 * 0.6 * 0.02).
        let ones = |k: usize, n: usize| -> Vec<(FeatureVector, f64, Option<bool>)> {
            (0..n).map(|i| (fv(if i < k { &[(0, 1)] } else { &[] }), 0.5, None)).collect()
        };
        let b = snapshot(&ones(30, 100));
        let w = snapshot(&ones(50, 100));
        // The unbiased pooled variance is the proportion variance times n/(n-1).
        let expected = 0.2 / libm::sqrt(0.4 * 0.6 * 200.0 / 199.0 * 0.02);
        assert!((z_score(&w.features[&0], &b.features[&0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_window_has_no_flags() {
        let b = snapshot(&[(fv(&[(0, 1)]), 0.5, None)]);
        let w = snapshot(&[]);
        assert_eq!(w.n, 0);
        assert!(drift_flag(&w, &b, DEFAULT_K, None).is_empty());
    }
}
