use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn docgroup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docgroup"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn quick_config(dir: &Path) -> PathBuf {
    let path = dir.join("quick.conf");
    fs::write(&path, "# short training\ntrain.epochs=4\n").unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_all_outputs_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = quick_config(tmp.path());
    let sample = data("sample_menu.json");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = docgroup(&["run", s(&sample), "--config", s(&conf), "--seed", "7", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["clusters.json", "projection.json", "report.json", "render.svg", "model.ckpt"] {
        assert!(a.join(name).is_file(), "{name} missing");
    }
    for name in ["clusters.json", "projection.json", "model.ckpt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 7);
    assert_eq!(report["train"]["epochs"], 4);
}

#[test]
fn dump_constraints_is_opt_in() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = quick_config(tmp.path());
    let out = tmp.path().join("out");
    let o = docgroup(&[
        "run",
        s(&data("sample_menu.json")),
        "--config",
        s(&conf),
        "--out",
        s(&out),
        "--dump-constraints",
    ]);
    assert!(o.status.success());
    let cs: serde_json::Value = serde_json::from_slice(&fs::read(out.join("constraints.json")).unwrap()).unwrap();
    assert!(!cs["constraints"].as_array().unwrap().is_empty());
}

#[test]
fn input_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = docgroup(&["run", "/nonexistent/doc.json", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot read"));
    assert!(!out.exists(), "nothing is written on failure");

    let bad_conf = tmp.path().join("bad.conf");
    fs::write(&bad_conf, "train.epochz=3\n").unwrap();
    let o = docgroup(&["run", s(&data("sample_menu.json")), "--config", s(&bad_conf), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.epochz"));

    let bad_doc = tmp.path().join("bad.json");
    fs::write(&bad_doc, r#"{"doc_id":"x","aspect_ratio":-1,"words":[]}"#).unwrap();
    let o = docgroup(&["run", s(&bad_doc), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("aspect_ratio"));

    let o = docgroup(&["run"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unwritable_output_is_internal() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = quick_config(tmp.path());
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = docgroup(&["run", s(&data("sample_menu.json")), "--config", s(&conf), "--out", s(&blocker)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_writes_document_and_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, r#"{"template": "SCHEDULE", "seed": 1, "entries": 6}"#).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = docgroup(&["synth", s(&spec), "--seed", "3", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let doc = fs::read(a.join("document.json")).unwrap();
    assert_eq!(doc, fs::read(b.join("document.json")).unwrap());
    let doc: serde_json::Value = serde_json::from_slice(&doc).unwrap();
    let truth: serde_json::Value = serde_json::from_slice(&fs::read(a.join("ground_truth.json")).unwrap()).unwrap();
    let words = doc["words"].as_array().unwrap();
    assert_eq!(words.len(), truth["labels"].as_object().unwrap().len());
    assert!(words.iter().all(|w| w["style_attrs"].is_object()));

    fs::write(&spec, r#"{"template": "MENU", "entries": 500}"#).unwrap();
    let o = docgroup(&["synth", s(&spec), "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("overflow"));
}

#[test]
fn bench_writes_csv_and_json() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = quick_config(tmp.path());
    let corpus = tmp.path().join("corpus.json");
    fs::write(
        &corpus,
        r#"{"documents": [
            {"template": "MENU", "seed": 1, "entries": 4},
            {"template": "SIMPLE_DOC", "seed": 2, "entries": 2}
        ]}"#,
    )
    .unwrap();
    let out = tmp.path().join("bench");
    let o = docgroup(&["bench", s(&corpus), "--config", s(&conf), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("doc_id,template,seed,words,lines,clusters,purity,scribbles_desc,scribbles_item"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("bench.json")).unwrap()).unwrap();
    assert_eq!(report["templates"].as_array().unwrap().len(), 2);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("MENU") && stdout.contains("SIMPLE_DOC"));
}

#[test]
fn help_lists_every_subcommand() {
    let o = docgroup(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["run", "bench", "synth", "serve"] {
        assert!(text.contains(cmd), "{cmd}");
    }
    let o = docgroup(&["serve", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--port", "--data-dir", "--seed"] {
        assert!(text.contains(flag), "{flag}");
    }
}
