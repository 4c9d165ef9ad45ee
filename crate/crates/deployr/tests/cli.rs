use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "format": "deployr.config/1",
  "world": { "n_patients": 1200, "n_units": 20 },
  "train": { "per_year": 300, "forest": { "n_trees": 20 } }
}"#;

fn deployr(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deployr")).arg("--out").arg(out).args(args).output().unwrap()
}

fn small_dir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("config.json"), SMALL).unwrap();
    d
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(deployr(d.path(), &["--no-such-flag"]).status.code(), Some(2));
    assert_eq!(deployr(d.path(), &["run-sim", "--mode", "noisy"]).status.code(), Some(2));
}

#[test]
fn stage_failures_exit_1_and_name_the_stage() {
    let d = tempfile::tempdir().unwrap();
    let o = deployr(d.path(), &["report"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: stage=report:"));

    std::fs::write(d.path().join("config.json"), r#"{"format":"deployr.config/9"}"#).unwrap();
    let o = deployr(d.path(), &["gen-world"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage=gen-world"));

    let d = small_dir();
    let o = deployr(d.path(), &["run-sim", "--duration", "3w"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn staged_pipeline_produces_every_artifact() {
    let d = small_dir();
    let p = d.path();
    for stage in ["gen-world", "export-warehouse", "build-cohort", "train", "deploy"] {
        ok(&deployr(p, &[stage]));
    }
    let sim = ok(&deployr(p, &["run-sim", "--duration", "3d", "--rate", "60"]));
    assert!(sim.contains("packets"), "{sim}");
    ok(&deployr(p, &["extract-labels"]));
    let report = ok(&deployr(p, &["report"]));
    assert!(report.contains("prospective"));
    for f in ["world.json", "cohort.json", "bundle.json", "retrospective.json", "deployment.json", "packets.jsonl", "orders.jsonl", "metrics.json", "report.html"] {
        assert!(p.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("manifest.json")).unwrap()).unwrap();
    let names: Vec<&str> = manifest["stages"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    for s in ["gen-world", "export-warehouse", "build-cohort", "train", "deploy", "run-sim", "extract-labels", "report"] {
        assert!(names.contains(&s), "{s} not in manifest");
    }

    // Labels are already complete, so a second extraction adds nothing.
    let before = std::fs::read(p.join("packets.jsonl")).unwrap();
    let again = ok(&deployr(p, &["extract-labels"]));
    assert!(again.contains(": 0 new"), "{again}");
    assert_eq!(std::fs::read(p.join("packets.jsonl")).unwrap(), before);
}

#[test]
fn demo_is_reproducible() {
    let a = small_dir();
    let b = small_dir();
    let args = ["demo", "--duration", "3d", "--rate", "60", "--seed", "3"];
    let digest = |s: &str| s.lines().find(|l| l.starts_with("metrics digest")).unwrap().to_string();
    let da = digest(&ok(&deployr(a.path(), &args)));
    let db = digest(&ok(&deployr(b.path(), &args)));
    assert_eq!(da, db);
    assert_eq!(std::fs::read(a.path().join("packets.jsonl")).unwrap(), std::fs::read(b.path().join("packets.jsonl")).unwrap());
}
