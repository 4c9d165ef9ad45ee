mod common;

use std::collections::BTreeMap;

use chrono::TimeDelta;
use deployr::monitor::{extract_labels, MonitorReport, METRICS_FORMAT};
use deployr::report::{render_html, roc_svg, to_json, write_report};
use deployr::store::PacketFilter;
use deployr_core::metrics::{metric_report, LabeledSample, ReportConfig};
use deployr_core::packet::{Mode, SubgroupAttributes};
use deployr_core::time::ymd;
use deployr_core::world::{Panel, Race, Sex};

use common::*;

#[tokio::test(flavor = "multi_thread")]
async fn withheld_results_stay_pending_and_extraction_is_idempotent() {
    let world = world();
    let patients = some_patients(&world, 100);
    assert_eq!(patients.len(), 100);
    let t0 = world.config().prospective_start;
    let rig = rig(world).await;
    let s = &rig.services;
    s.engine.register_deployment(bundle().clone(), event_trigger(Mode::Silent, vec![], 0.0)).await.unwrap();
    let mut order_ids = Vec::new();
    for (i, p) in patients.iter().enumerate() {
        let signed = s.emr.sign_order(p, Panel::Cbc, t0 + TimeDelta::seconds(i as i64)).await.unwrap();
        order_ids.push(signed.order.order_id);
    }
    for id in order_ids.iter().step_by(14).take(7) {
        s.emr.withhold_results(id).unwrap();
    }
    let components = BTreeMap::from([("cbc-hgb".to_string(), "HGB".to_string())]);
    let maturation = TimeDelta::hours(2);

    let early = t0 + TimeDelta::hours(1);
    s.clock.set(early);
    let o = extract_labels(&rig.store, &s.client, &components, maturation, early).await.unwrap();
    assert_eq!((o.labeled, o.immature), (0, 100));

    let later = t0 + TimeDelta::hours(3);
    s.clock.set(later);
    let o = extract_labels(&rig.store, &s.client, &components, maturation, later).await.unwrap();
    assert_eq!((o.labeled, o.pending, o.errors), (93, 7, 0));
    let records = rig.store.records().unwrap().len();
    assert_eq!(records, 193);

    let o = extract_labels(&rig.store, &s.client, &components, maturation, later).await.unwrap();
    assert_eq!((o.labeled, o.pending), (0, 7));
    assert_eq!(rig.store.records().unwrap().len(), records);

    let packets = rig.store.read_packets(&PacketFilter::default()).unwrap();
    let labeled: Vec<_> = packets.iter().filter(|p| p.label.is_some()).collect();
    assert_eq!(labeled.len(), 93);
    assert!(labeled.iter().all(|p| p.attributes.is_some() && p.label_time.unwrap() <= later));
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_model_packets_are_unlabelable() {
    let world = world();
    let patients = some_patients(&world, 3);
    let t0 = world.config().prospective_start;
    let rig = rig(world).await;
    let s = &rig.services;
    s.engine.register_deployment(bundle().clone(), event_trigger(Mode::Silent, vec![], 0.0)).await.unwrap();
    for p in &patients {
        s.emr.sign_order(p, Panel::Cbc, t0).await.unwrap();
    }
    let later = t0 + TimeDelta::hours(3);
    s.clock.set(later);
    let o = extract_labels(&rig.store, &s.client, &BTreeMap::new(), TimeDelta::hours(2), later).await.unwrap();
    assert_eq!((o.labeled, o.unlabelable), (0, 3));
}

fn samples() -> Vec<LabeledSample> {
    (0..60)
        .map(|i| {
            let label = i % 3 == 0;
            LabeledSample {
                packet_id: format!("p{i}"),
                score: (i as f64 * 0.37).fract() * 0.6 + if label { 0.3 } else { 0.0 },
                label,
                inference_time: ymd(2022, 1, 1) + TimeDelta::hours(i),
                attributes: SubgroupAttributes {
                    sex: if i % 2 == 0 { Sex::Female } else { Sex::Male },
                    race: if i < 10 && !label { Race::Asian } else { Race::White },
                    age_over_40: i % 5 != 0,
                },
                weight: 1.0,
            }
        })
        .collect()
}

fn report_doc() -> MonitorReport {
    let cfg = ReportConfig { resamples: 200, ..Default::default() };
    let r = metric_report("m", "prospective", None, &samples(), 0.5, &cfg).unwrap();
    MonitorReport {
        format: METRICS_FORMAT.into(),
        model_id: "m".into(),
        component_code: "HGB".into(),
        generated_at: ymd(2022, 2, 1),
        reports: vec![r],
        drift: Vec::new(),
    }
}

#[test]
fn roc_polyline_has_one_vertex_per_curve_point() {
    let doc = report_doc();
    let r = &doc.reports[0];
    let svg = roc_svg(r);
    let start = svg.find("class=\"roc\"").unwrap();
    let pts = &svg[start..];
    let pts = &pts[pts.find("points=\"").unwrap() + 8..];
    let pts = &pts[..pts.find('"').unwrap()];
    assert_eq!(pts.split(' ').count(), r.roc.len());
    assert!(svg.contains("class=\"chance\""));
}

#[test]
fn metrics_json_round_trips_with_nan() {
    let doc = report_doc();
    // Asian group is all negative, so its AUROC is undefined.
    let asian = doc.reports[0].subgroups.iter().find(|s| s.group == "Asian").unwrap();
    assert!(asian.auroc.point.is_nan());
    let json = to_json(&doc).unwrap();
    let back: MonitorReport = serde_json::from_str(&json).unwrap();
    assert_eq!(to_json(&back).unwrap(), json);
    assert!(back.reports[0].subgroups.iter().find(|s| s.group == "Asian").unwrap().auroc.point.is_nan());
}

#[test]
fn empty_drift_renders_empty_section() {
    let doc = report_doc();
    let html = render_html(&doc);
    assert!(html.contains("No drift windows."));
    assert!(html.contains("NaN"));
    let d = tempfile::tempdir().unwrap();
    let (json, page) = write_report(d.path(), &doc).unwrap();
    assert!(json.exists() && page.exists());
}
