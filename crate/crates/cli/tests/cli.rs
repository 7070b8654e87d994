use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bandsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bandsel"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "corpus": dir.join("corpus"),
        "out": dir.join("run"),
        "texture": {"levels": 16},
        "umda": {"generations": 3, "seeds": [1, 2]},
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn synthesize_pipeline_rerun_and_single_composition() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let s = ok(&bandsel(&[
        "--config",
        &cfg,
        "synthesize",
        "--size",
        "128",
        "--blobs",
        "6",
    ]));
    assert!(s.contains("wrote 4 regions"), "{s}");
    let first = ok(&bandsel(&["--config", &cfg, "--threads", "1", "pipeline"]));
    assert!(first.contains("All+NDVI"), "{first}");
    let report = fs::read(dir.path().join("run/report.json")).unwrap();
    let again = ok(&bandsel(&["--config", &cfg, "--threads", "2", "pipeline"]));
    assert_eq!(first, again);
    assert_eq!(
        fs::read(dir.path().join("run/report.json")).unwrap(),
        report
    );

    let r = ok(&bandsel(&["--config", &cfg, "rank-bands"]));
    assert!(r.lines().next().unwrap().contains("Balanced"), "{r}");
    let e = ok(&bandsel(&[
        "--config",
        &cfg,
        "evaluate-composition",
        "--channels",
        "B4,NDVI",
        "--name",
        "pair",
    ]));
    assert!(e.contains("pair (B4,NDVI)"), "{e}");
    assert!(dir.path().join("run/evaluation/pair.json").is_file());
}

#[test]
fn missing_corpus_exits_with_stage_tag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = bandsel(&["--config", &cfg, "pipeline"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("composite"), "{err}");
}

#[test]
fn config_errors_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"umda": {"popsize": 10}}"#).unwrap();
    let out = bandsel(&["--config", path.to_str().unwrap(), "show-config"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("popsize"));
    let out = bandsel(&["--threads", "0", "show-config"]);
    assert!(!out.status.success());
}

#[test]
fn show_config_reflects_flags() {
    let s = ok(&bandsel(&[
        "--seed",
        "9",
        "--out",
        "elsewhere",
        "show-config",
    ]));
    let v: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert_eq!(v["umda"]["seeds"], serde_json::json!([9]));
    assert_eq!(v["out"], "elsewhere");
}

#[test]
fn score_masks_writes_tables_and_error_maps() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, truth) = (dir.path().join("pred"), dir.path().join("truth"));
    for (d, body) in [(&pred, [1u8, 1, 0, 0]), (&truth, [1, 0, 0, 0])] {
        fs::create_dir_all(d).unwrap();
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&body);
        fs::write(d.join("img.pgm"), bytes).unwrap();
    }
    let out = dir.path().join("scores");
    let s = ok(&bandsel(&[
        "--out",
        out.to_str().unwrap(),
        "score-masks",
        "--pred",
        pred.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
    ]));
    assert!(s.contains("img.pgm"), "{s}");
    let v: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("scores.json")).unwrap()).unwrap();
    assert_eq!(v["total"]["metrics"]["iou"], 0.5);
    assert!(out.join("errors/img.ppm").is_file());
}
