//! Report files: `metrics.json` and a self-contained `report.html` with
//! inline SVG plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use deployr_core::drift::DriftSnapshot;
use deployr_core::metrics::{Ci, MetricReport};

use crate::error::{Error, Result};
use crate::monitor::MonitorReport;

const PLOT: f64 = 240.0;
const PAD: f64 = 30.0;

fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.3}")
    }
}

fn ci(c: &Ci) -> String {
    format!("{} ({}–{})", num(c.point), num(c.lo), num(c.hi))
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `(x, y)` in unit coordinates to SVG pixel space, y pointing up.
fn xy(x: f64, y: f64) -> String {
    format!("{:.2},{:.2}", PAD + x * PLOT, PAD + (1.0 - y) * PLOT)
}

fn frame(title: &str, xlabel: &str, ylabel: &str, body: &str) -> String {
    let size = PLOT + 2.0 * PAD;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\
<title>{title}</title>\
<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{PLOT}\" height=\"{PLOT}\" fill=\"none\" stroke=\"#999\"/>\
<text x=\"{mid}\" y=\"{bottom}\" text-anchor=\"middle\" font-size=\"11\">{xlabel}</text>\
<text x=\"10\" y=\"{mid}\" font-size=\"11\" transform=\"rotate(-90 10 {mid})\" text-anchor=\"middle\">{ylabel}</text>\
<text x=\"{mid}\" y=\"18\" text-anchor=\"middle\" font-size=\"12\">{title}</text>{body}</svg>",
        mid = PAD + PLOT / 2.0,
        bottom = size - 6.0,
    )
}

fn polyline(class: &str, color: &str, pts: impl Iterator<Item = (f64, f64)>) -> String {
    let p: Vec<String> = pts.map(|(x, y)| xy(x, y)).collect();
    format!("<polyline class=\"{class}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", p.join(" "))
}

pub fn roc_svg(r: &MetricReport) -> String {
    let diag = polyline("chance", "#bbb", [(0.0, 0.0), (1.0, 1.0)].into_iter());
    let curve = polyline("roc", "#1f77b4", r.roc.iter().map(|p| (p.fpr, p.tpr)));
    frame("ROC", "false positive rate", "true positive rate", &format!("{diag}{curve}"))
}

pub fn pr_svg(r: &MetricReport) -> String {
    let curve = polyline("pr", "#d62728", r.pr.iter().map(|p| (p.recall, p.precision)));
    frame("Precision-recall", "recall", "precision", &curve)
}

pub fn calibration_svg(r: &MetricReport) -> String {
    let diag = polyline("ideal", "#bbb", [(0.0, 0.0), (1.0, 1.0)].into_iter());
    let curve = polyline("calibration", "#2ca02c", r.calibration.iter().map(|b| (b.mean_score, b.frac_positive)));
    let dots: String = r
        .calibration
        .iter()
        .map(|b| {
            let (x, y) = (PAD + b.mean_score * PLOT, PAD + (1.0 - b.frac_positive) * PLOT);
            format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"#2ca02c\"><title>n={}</title></circle>", b.n)
        })
        .collect();
    frame("Calibration", "mean predicted", "fraction positive", &format!("{diag}{curve}{dots}"))
}

fn metric_section(out: &mut String, r: &MetricReport) {
    let window = r
        .window
        .map(|w| format!("{} to {}", w.start.format("%Y-%m-%d %H:%M"), w.end.format("%Y-%m-%d %H:%M")))
        .unwrap_or_else(|| "all".into());
    let c = &r.at_threshold;
    let _ = write!(
        out,
        "<section><h2>{} ({})</h2><p>Window: {}</p><table>\
<tr><th>n</th><td>{}</td></tr><tr><th>Prevalence</th><td>{}</td></tr>\
<tr><th>AUROC</th><td>{}</td></tr><tr><th>Average precision</th><td>{}</td></tr>\
<tr><th>Threshold</th><td>{}</td></tr><tr><th>Accuracy</th><td>{}</td></tr>\
<tr><th>Sensitivity</th><td>{}</td></tr><tr><th>Specificity</th><td>{}</td></tr>\
<tr><th>PPV</th><td>{}</td></tr></table><div class=\"plots\">{}{}{}</div>",
        esc(&r.source),
        esc(&r.model_id),
        window,
        r.n,
        ci(&r.prevalence),
        ci(&r.auroc),
        ci(&r.average_precision),
        num(r.threshold),
        num(c.accuracy),
        num(c.sensitivity),
        num(c.specificity),
        num(c.ppv),
        roc_svg(r),
        pr_svg(r),
        calibration_svg(r),
    );
    out.push_str("<h3>Net benefit</h3><table><tr><th>pt</th><th>model</th><th>treat all</th><th>treat none</th></tr>");
    for nb in &r.net_benefit {
        let _ = write!(
            out,
            "<tr><td>{:.2}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
            nb.threshold_probability,
            num(nb.model),
            num(nb.treat_all),
            num(nb.treat_none)
        );
    }
    out.push_str("</table><h3>Subgroups</h3><table><tr><th>grouping</th><th>group</th><th>n</th><th>positives</th><th>AUROC (95% CI)</th></tr>");
    for s in &r.subgroups {
        let _ = write!(
            out,
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
            esc(&s.grouping),
            esc(&s.group),
            s.n,
            s.n_positive,
            ci(&s.auroc)
        );
    }
    out.push_str("</table></section>");
}

fn drift_section(out: &mut String, drift: &[DriftSnapshot]) {
    out.push_str("<section><h2>Drift</h2>");
    if drift.is_empty() {
        out.push_str("<p>No drift windows.</p></section>");
        return;
    }
    out.push_str("<table><tr><th>window</th><th>n</th><th>prediction mean</th><th>label mean</th><th>flags</th></tr>");
    for d in drift {
        let window = d
            .window
            .map(|w| format!("{} to {}", w.start.format("%Y-%m-%d"), w.end.format("%Y-%m-%d")))
            .unwrap_or_default();
        let flags: Vec<String> = d.flags.iter().map(|f| format!("{} (z={})", esc(&f.quantity.name()), num(f.z))).collect();
        let _ = write!(
            out,
            "<tr><td>{window}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
            d.n,
            num(d.prediction.mean),
            num(d.label.mean),
            if flags.is_empty() { "none".to_string() } else { flags.join(", ") }
        );
    }
    out.push_str("</table></section>");
}

pub fn render_html(doc: &MonitorReport) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "<!DOCTYPE html><html><head><meta charset=\"utf-8\"><title>{id} monitoring report</title>\
<style>body{{font-family:sans-serif;margin:2em}}table{{border-collapse:collapse;margin:.5em 0}}\
td,th{{border:1px solid #ccc;padding:2px 8px;text-align:left}}.plots svg{{margin-right:1em}}</style></head>\
<body><h1>{id}: {comp}</h1><p>Generated {gen}</p>",
        id = esc(&doc.model_id),
        comp = esc(&doc.component_code),
        gen = doc.generated_at.format("%Y-%m-%d %H:%M:%S UTC"),
    );
    for r in &doc.reports {
        metric_section(&mut out, r);
    }
    drift_section(&mut out, &doc.drift);
    out.push_str("</body></html>\n");
    out
}

pub fn to_json(doc: &MonitorReport) -> Result<String> {
    serde_json::to_string_pretty(doc).map_err(|e| Error::Integrity(e.to_string()))
}

/// Write `metrics.json` and `report.html` into `dir`.
pub fn write_report(dir: &Path, doc: &MonitorReport) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("metrics.json");
    let html_path = dir.join("report.html");
    std::fs::write(&json_path, to_json(doc)? + "\n").map_err(|e| Error::io(&json_path, e))?;
    std::fs::write(&html_path, render_html(doc)).map_err(|e| Error::io(&html_path, e))?;
    Ok((json_path, html_path))
}
