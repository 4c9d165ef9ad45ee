//! Performance, fairness and utility metrics with percentile-bootstrap CIs.
//!
//! Kernels work on [`Point`] slices so resampling stays cheap. Every
//! undefined quantity is NaN rather than an error.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packet::SubgroupAttributes;
use crate::rng;
use crate::serde_float;
use crate::time::Timestamp;

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;
pub const CALIBRATION_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub score: f64,
    pub label: bool,
    pub weight: f64,
}

impl Point {
    pub fn new(score: f64, label: bool) -> Self {
        Self { score, label, weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub packet_id: String,
    pub score: f64,
    pub label: bool,
    pub inference_time: Timestamp,
    pub attributes: SubgroupAttributes,
    pub weight: f64,
}

impl LabeledSample {
    pub fn point(&self) -> Point {
        Point { score: self.score, label: self.label, weight: self.weight }
    }
}

fn uniform_weights(points: &[Point]) -> bool {
    points.windows(2).all(|w| w[0].weight == w[1].weight)
}

fn sorted_by_score(points: &[Point]) -> Vec<Point> {
    let mut v = points.to_vec();
    v.sort_by(|a, b| a.score.total_cmp(&b.score));
    v
}

/// Groups of equal score in ascending order: (weight_pos, weight_neg,
/// count_pos, count_neg, score).
fn score_groups(sorted: &[Point]) -> Vec<(f64, f64, u64, u64, f64)> {
    let mut out: Vec<(f64, f64, u64, u64, f64)> = Vec::new();
    for p in sorted {
        match out.last_mut() {
            Some(g) if g.4 == p.score => {
                if p.label {
                    g.0 += p.weight;
                    g.2 += 1;
                } else {
                    g.1 += p.weight;
                    g.3 += 1;
                }
            }
            _ => {
                let (wp, wn) = if p.label { (p.weight, 0.0) } else { (0.0, p.weight) };
                out.push((wp, wn, p.label as u64, !p.label as u64, p.score));
            }
        }
    }
    out
}

/// Probability a random positive outranks a random negative, ties counting
/// one half, weighted by sample weights. Equal weights take an exact
/// integer path whose result is bit-identical to pair counting.
pub fn auroc(points: &[Point]) -> f64 {
    let groups = score_groups(&sorted_by_score(points));
    if uniform_weights(points) {
        let (mut neg_below, mut twice_wins) = (0u128, 0u128);
        let (mut pos, mut neg) = (0u128, 0u128);
        for &(_, _, cp, cn, _) in &groups {
            let (cp, cn) = (cp as u128, cn as u128);
            twice_wins += 2 * cp * neg_below + cp * cn;
            neg_below += cn;
            pos += cp;
            neg += cn;
        }
        if pos == 0 || neg == 0 {
            return f64::NAN;
        }
        return twice_wins as f64 / (2 * pos * neg) as f64;
    }
    let (mut neg_below, mut wins) = (0.0, 0.0);
    let (mut wp_total, mut wn_total) = (0.0, 0.0);
    for &(wp, wn, _, _, _) in &groups {
        wins += wp * (neg_below + 0.5 * wn);
        neg_below += wn;
        wp_total += wp;
        wn_total += wn;
    }
    if wp_total <= 0.0 || wn_total <= 0.0 {
        return f64::NAN;
    }
    wins / (wp_total * wn_total)
}

/// Step-wise average precision: sum over distinct cuts, from the highest
/// score down, of (recall gain) * precision.
pub fn average_precision(points: &[Point]) -> f64 {
    let groups = score_groups(&sorted_by_score(points));
    let total_pos: f64 = groups.iter().map(|g| g.0).sum();
    if total_pos <= 0.0 {
        return f64::NAN;
    }
    let (mut tp, mut fp, mut ap, mut last_recall) = (0.0, 0.0, 0.0, 0.0);
    for g in groups.iter().rev() {
        tp += g.0;
        fp += g.1;
        let recall = tp / total_pos;
        ap += (recall - last_recall) * (tp / (tp + fp));
        last_recall = recall;
    }
    ap
}

pub fn prevalence(points: &[Point]) -> f64 {
    let w: f64 = points.iter().map(|p| p.weight).sum();
    if w <= 0.0 {
        return f64::NAN;
    }
    points.iter().filter(|p| p.label).map(|p| p.weight).sum::<f64>() / w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub bin: usize,
    pub mean_score: f64,
    pub frac_positive: f64,
    pub n: usize,
}

fn class_totals(points: &[Point]) -> Result<(f64, f64)> {
    let p: f64 = points.iter().filter(|p| p.label).map(|p| p.weight).sum();
    let n: f64 = points.iter().filter(|p| !p.label).map(|p| p.weight).sum();
    if p <= 0.0 || n <= 0.0 {
        return Err(Error::DegenerateCurve("both classes are required".into()));
    }
    Ok((p, n))
}

/// (fpr, tpr) from (0, 0) through every distinct score cut to (1, 1).
pub fn roc_curve(points: &[Point]) -> Result<Vec<RocPoint>> {
    let (p, n) = class_totals(points)?;
    let groups = score_groups(&sorted_by_score(points));
    let mut out = Vec::with_capacity(groups.len() + 1);
    out.push(RocPoint { fpr: 0.0, tpr: 0.0 });
    let (mut tp, mut fp) = (0.0, 0.0);
    for (i, g) in groups.iter().rev().enumerate() {
        tp += g.0;
        fp += g.1;
        if i + 1 == groups.len() {
            out.push(RocPoint { fpr: 1.0, tpr: 1.0 });
        } else {
            out.push(RocPoint { fpr: fp / n, tpr: tp / p });
        }
    }
    Ok(out)
}

/// (recall, precision) at every distinct score cut, highest cut first.
pub fn pr_curve(points: &[Point]) -> Result<Vec<PrPoint>> {
    let (p, _) = class_totals(points)?;
    let groups = score_groups(&sorted_by_score(points));
    let (mut tp, mut fp) = (0.0, 0.0);
    Ok(groups
        .iter()
        .rev()
        .map(|g| {
            tp += g.0;
            fp += g.1;
            PrPoint { recall: tp / p, precision: tp / (tp + fp) }
        })
        .collect())
}

/// Ten equal-width bins over [0, 1]; a score of exactly 1 lands in the last
/// bin. Empty bins are omitted.
pub fn calibration(points: &[Point]) -> Vec<CalibrationBin> {
    let mut acc = [(0.0f64, 0.0f64, 0.0f64, 0usize); CALIBRATION_BINS];
    for p in points {
        let b = ((p.score * CALIBRATION_BINS as f64) as usize).min(CALIBRATION_BINS - 1);
        let a = &mut acc[b];
        a.0 += p.weight * p.score;
        a.1 += if p.label { p.weight } else { 0.0 };
        a.2 += p.weight;
        a.3 += 1;
    }
    acc.iter()
        .enumerate()
        .filter(|(_, a)| a.3 > 0)
        .map(|(bin, a)| CalibrationBin { bin, mean_score: a.0 / a.2, frac_positive: a.1 / a.2, n: a.3 })
        .collect()
}

pub fn trapezoid_area(roc: &[RocPoint]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    #[serde(with = "serde_float")]
    pub tp: f64,
    #[serde(with = "serde_float")]
    pub fp: f64,
    #[serde(with = "serde_float")]
    pub tn: f64,
    #[serde(with = "serde_float")]
    pub fn_: f64,
    #[serde(with = "serde_float")]
    pub accuracy: f64,
    #[serde(with = "serde_float")]
    pub sensitivity: f64,
    #[serde(with = "serde_float")]
    pub specificity: f64,
    #[serde(with = "serde_float")]
    pub ppv: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        f64::NAN
    } else {
        a / b
    }
}

/// Predicted positive iff score >= threshold.
pub fn confusion_at_threshold(points: &[Point], threshold: f64) -> Confusion {
    let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for p in points {
        match (p.score >= threshold, p.label) {
            (true, true) => tp += p.weight,
            (true, false) => fp += p.weight,
            (false, false) => tn += p.weight,
            (false, true) => fn_ += p.weight,
        }
    }
    Confusion {
        tp,
        fp,
        tn,
        fn_,
        accuracy: ratio(tp + tn, tp + fp + tn + fn_),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        ppv: ratio(tp, tp + fp),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetBenefitPoint {
    pub threshold_probability: f64,
    #[serde(with = "serde_float")]
    pub model: f64,
    #[serde(with = "serde_float")]
    pub treat_all: f64,
    pub treat_none: f64,
}

/// NB = TP/n - FP/n * pt/(1-pt), with the treat-all and treat-none lines.
pub fn net_benefit(points: &[Point], pt_grid: &[f64]) -> Result<Vec<NetBenefitPoint>> {
    if let Some(pt) = pt_grid.iter().find(|pt| !(**pt > 0.0 && **pt < 1.0)) {
        return Err(Error::InvalidInput(format!("threshold probability {pt} outside (0, 1)")));
    }
    let n: f64 = points.iter().map(|p| p.weight).sum();
    let prev = prevalence(points);
    Ok(pt_grid
        .iter()
        .map(|&pt| {
            let odds = pt / (1.0 - pt);
            let c = confusion_at_threshold(points, pt);
            NetBenefitPoint {
                threshold_probability: pt,
                model: ratio(c.tp, n) - ratio(c.fp, n) * odds,
                treat_all: prev - (1.0 - prev) * odds,
                treat_none: 0.0,
            }
        })
        .collect())
}

pub fn default_pt_grid() -> Vec<f64> {
    (1..=19).map(|i| f64::from(i) * 0.05).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ci {
    #[serde(with = "serde_float")]
    pub lo: f64,
    #[serde(with = "serde_float")]
    pub point: f64,
    #[serde(with = "serde_float")]
    pub hi: f64,
    /// Resamples on which the metric was undefined and was left out.
    pub nan_resamples: usize,
}

/// 1-based nearest rank of quantile `q` among `m` values. The epsilon keeps
/// products like 0.025 * 1000 from rounding up past an integer.
pub fn nearest_rank(q: f64, m: usize) -> usize {
    let r = libm::ceil(q * m as f64 - 1e-9) as usize;
    r.clamp(1, m)
}

/// Row indices of bootstrap resample `b`: `n` uniform draws from the
/// stream named by `(seed, b)`.
pub fn resample_indices(seed: u64, b: usize, n: usize, out: &mut Vec<usize>) {
    let mut r = rng::stream(seed, "bootstrap", b as u64);
    out.clear();
    out.extend((0..n).map(|_| r.random_range(0..n)));
}

/// Percentile bootstrap with nearest-rank percentiles. The interval is
/// widened if needed so that it contains the point estimate.
pub fn bootstrap_ci<F: Fn(&[Point]) -> f64>(metric: F, points: &[Point], resamples: usize, level: f64, seed: u64) -> Ci {
    let point = metric(points);
    if points.is_empty() || resamples == 0 {
        return Ci { lo: f64::NAN, point, hi: f64::NAN, nan_resamples: resamples };
    }
    let mut idx = Vec::with_capacity(points.len());
    let mut buf = Vec::with_capacity(points.len());
    let mut values = Vec::with_capacity(resamples);
    for b in 0..resamples {
        resample_indices(seed, b, points.len(), &mut idx);
        buf.clear();
        buf.extend(idx.iter().map(|&i| points[i]));
        values.push(metric(&buf));
    }
    percentile_interval(values, point, level)
}

fn percentile_interval(mut values: Vec<f64>, point: f64, level: f64) -> Ci {
    let total = values.len();
    values.retain(|v| !v.is_nan());
    let nan_resamples = total - values.len();
    if values.is_empty() {
        return Ci { lo: f64::NAN, point, hi: f64::NAN, nan_resamples };
    }
    values.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let m = values.len();
    let mut lo = values[nearest_rank(alpha / 2.0, m) - 1];
    let mut hi = values[nearest_rank(1.0 - alpha / 2.0, m) - 1];
    if !point.is_nan() {
        lo = lo.min(point);
        hi = hi.max(point);
    }
    Ci { lo, point, hi, nan_resamples }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub grouping: String,
    pub group: String,
    pub n: usize,
    pub n_positive: usize,
    pub auroc: Ci,
}

pub const AGE_OVER_40: &str = "age_over_40";
pub const AGE_40_OR_UNDER: &str = "age_40_or_under";

/// Cohort row, then one row per observed value of sex, race and the
/// age-over-40 split. Groups lacking a class get a NaN AUROC.
pub fn subgroup_metrics(samples: &[LabeledSample], resamples: usize, level: f64, seed: u64) -> Vec<SubgroupRow> {
    let row = |grouping: &str, group: &str, pts: &[Point]| SubgroupRow {
        grouping: grouping.to_string(),
        group: group.to_string(),
        n: pts.len(),
        n_positive: pts.iter().filter(|p| p.label).count(),
        auroc: bootstrap_ci(auroc, pts, resamples, level, seed),
    };
    let all: Vec<Point> = samples.iter().map(LabeledSample::point).collect();
    let mut rows = Vec::new();
    rows.push(row("all", "all", &all));
    type Key = fn(&SubgroupAttributes) -> &'static str;
    let groupings: [(&str, Key); 3] = [
        ("sex", |a| a.sex.as_str()),
        ("race", |a| a.race.as_str()),
        ("age", |a| if a.age_over_40 { AGE_OVER_40 } else { AGE_40_OR_UNDER }),
    ];
    for (name, key) in groupings {
        let mut groups: BTreeMap<&str, Vec<Point>> = BTreeMap::new();
        for s in samples {
            groups.entry(key(&s.attributes)).or_default().push(s.point());
        }
        for (g, pts) in groups {
            rows.push(row(name, g, &pts));
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
    pub pt_grid: Vec<f64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { resamples: DEFAULT_RESAMPLES, level: DEFAULT_LEVEL, seed: 7, pt_grid: default_pt_grid() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: Timestamp,
    pub end: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_id: String,
    pub source: String,
    pub window: Option<Window>,
    pub n: usize,
    pub prevalence: Ci,
    pub auroc: Ci,
    pub average_precision: Ci,
    #[serde(with = "serde_float")]
    pub threshold: f64,
    pub at_threshold: Confusion,
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
    pub calibration: Vec<CalibrationBin>,
    pub net_benefit: Vec<NetBenefitPoint>,
    pub subgroups: Vec<SubgroupRow>,
}

/// Everything a report shows for one set of labeled samples.
pub fn metric_report(
    model_id: &str,
    source: &str,
    window: Option<Window>,
    samples: &[LabeledSample],
    threshold: f64,
    cfg: &ReportConfig,
) -> Result<MetricReport> {
    let pts: Vec<Point> = samples.iter().map(LabeledSample::point).collect();
    let ci = |f: fn(&[Point]) -> f64| bootstrap_ci(f, &pts, cfg.resamples, cfg.level, cfg.seed);
    Ok(MetricReport {
        model_id: model_id.to_string(),
        source: source.to_string(),
        window,
        n: pts.len(),
        prevalence: ci(prevalence),
        auroc: ci(auroc),
        average_precision: ci(average_precision),
        threshold,
        at_threshold: confusion_at_threshold(&pts, threshold),
        roc: roc_curve(&pts).unwrap_or_default(),
        pr: pr_curve(&pts).unwrap_or_default(),
        calibration: calibration(&pts),
        net_benefit: net_benefit(&pts, &cfg.pt_grid)?,
        subgroups: subgroup_metrics(samples, cfg.resamples, cfg.level, cfg.seed),
    })
}
