use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_schemacoder"))
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/e2e")
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().expect("binary runs");
    (
        status.code().unwrap_or(-1),
        String::from_utf8_lossy(&stdout).into_owned(),
        String::from_utf8_lossy(&stderr).into_owned(),
    )
}

/// Copies the fixture into a temp dir so configs can be edited freely.
fn fixture_copy() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(fixture()).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
        }
    }
    dir
}

fn extract(config: &Path, out: &Path) -> (i32, String, String) {
    run(bin().args(["extract", "--config"]).arg(config).arg("--out").arg(out))
}

#[test]
fn extract_writes_all_artifacts() {
    let out = tempfile::tempdir().unwrap();
    let (code, stdout, stderr) = extract(&fixture().join("config.toml"), out.path());
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.starts_with("1.0000 1.0000 1.0000 1.0000 0.0000"), "{stdout}");
    for name in [
        "program.json",
        "parsed.csv",
        "eval_report.json",
        "history.csv",
        "manifest.json",
        "qtree_trace.jsonl",
        "transcript.jsonl",
        "progress.csv",
        "lineage.json",
    ] {
        assert!(out.path().join(name).is_file(), "{name} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["config"]["pipeline"]["seed"], 7);
    let history = fs::read_to_string(out.path().join("history.csv")).unwrap();
    assert!(history.starts_with("iteration,phase,loss\n0,init,"));
}

#[test]
fn extracted_program_reparses_to_the_same_csv() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(extract(&fixture().join("config.toml"), out.path()).0, 0);
    let program = schemacoder::program::ParserProgram::deserialize(&fs::read_to_string(out.path().join("program.json")).unwrap()).unwrap();
    let log = schemacoder::corpus::load_log(fixture().join("app.log")).unwrap();
    let mut csv = Vec::new();
    program.execute(&log).write_csv(&mut csv).unwrap();
    assert_eq!(csv, fs::read(out.path().join("parsed.csv")).unwrap());
}

#[test]
fn missing_log_is_a_validation_error() {
    let dir = fixture_copy();
    let cfg = dir.path().join("config.toml");
    let text = fs::read_to_string(&cfg).unwrap().replace("log = \"app.log\"", "log = \"missing.log\"");
    fs::write(&cfg, text).unwrap();
    let (code, _, stderr) = extract(&cfg, &dir.path().join("out"));
    assert_eq!(code, 2);
    assert!(stderr.contains("log:") && stderr.contains("missing.log"), "{stderr}");
}

#[test]
fn malformed_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "log = [1, 2]\n").unwrap();
    assert_eq!(extract(&cfg, &dir.path().join("out")).0, 2);
}

#[test]
fn unreachable_backend_fails_with_partial_trace() {
    let dir = fixture_copy();
    let cfg = dir.path().join("config.toml");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("kind = \"scripted\"", "kind = \"failing\"");
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let (code, _, stderr) = extract(&cfg, &out);
    assert_eq!(code, 3, "{stderr}");
    let trace = fs::read_to_string(out.join("qtree_trace.jsonl")).unwrap();
    assert!(trace.lines().count() >= 1);
    assert!(trace.contains("\"layer\":\"explore\""));
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"failed\""));
}

#[test]
fn replaying_a_transcript_reproduces_the_run() {
    let first = tempfile::tempdir().unwrap();
    assert_eq!(extract(&fixture().join("config.toml"), first.path()).0, 0);

    let dir = fixture_copy();
    fs::copy(first.path().join("transcript.jsonl"), dir.path().join("recorded.jsonl")).unwrap();
    let cfg = dir.path().join("config.toml");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("kind = \"scripted\"\nscript = \"script.json\"", "kind = \"replay\"\ntranscript = \"recorded.jsonl\"");
    fs::write(&cfg, text).unwrap();
    let second = dir.path().join("out");
    let (code, _, stderr) = extract(&cfg, &second);
    assert_eq!(code, 0, "{stderr}");
    assert_eq!(
        fs::read(first.path().join("program.json")).unwrap(),
        fs::read(second.join("program.json")).unwrap()
    );
    assert_eq!(
        fs::read(first.path().join("history.csv")).unwrap(),
        fs::read(second.join("history.csv")).unwrap()
    );
}

#[test]
fn evaluate_identity_and_worked_example() {
    let truth = fixture().join("app.log_structured.csv");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let (code, stdout, _) = run(bin().args(["evaluate", "--pred"]).arg(&truth).arg("--truth").arg(&truth).arg("--out").arg(&out));
    assert_eq!(code, 0);
    assert_eq!(stdout.trim(), "1.0000 1.0000 1.0000 1.0000 0.0000");
    assert!(out.is_file());

    let t = dir.path().join("t.csv");
    let p = dir.path().join("p.csv");
    fs::write(&t, "LineId,Content,EventTemplate\n1,a 1,a <*>\n2,a 2,a <*>\n3,b 3,b <*>\n4,b 4,b <*>\n").unwrap();
    fs::write(&p, "LineId,Content,EventTemplate\n1,a 1,a <*>\n2,a 2,a <*>\n3,b 3,b 3\n4,b 4,b 4\n").unwrap();
    let (code, stdout, _) = run(bin().args(["evaluate", "--pred"]).arg(&p).arg("--truth").arg(&t));
    assert_eq!(code, 0);
    // GA 2/4, PA 2/4, FGA and FTA: 1 of 3 predicted groups, 2 truth groups
    assert_eq!(stdout.trim(), "0.5000 0.5000 0.4000 0.4000 0.5500");
    assert!(dir.path().join("p.csv.report.json").is_file());
}

#[test]
fn evaluate_rejects_mismatched_universes() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.csv");
    let p = dir.path().join("p.csv");
    fs::write(&t, "LineId,Content,EventTemplate\n1,a,a\n2,b,b\n").unwrap();
    fs::write(&p, "LineId,Content,EventTemplate\n1,a,a\n").unwrap();
    let (code, _, stderr) = run(bin().args(["evaluate", "--pred"]).arg(&p).arg("--truth").arg(&t));
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn report_is_idempotent_and_consistent_with_history() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(extract(&fixture().join("config.toml"), out.path()).0, 0);
    let (code, _, stderr) = run(bin().args(["report", "--run"]).arg(out.path()));
    assert_eq!(code, 0, "{stderr}");
    let pca = fs::read(out.path().join("pca.csv")).unwrap();
    let curve = fs::read_to_string(out.path().join("loss_curve.csv")).unwrap();
    assert_eq!(run(bin().args(["report", "--run"]).arg(out.path())).0, 0);
    assert_eq!(pca, fs::read(out.path().join("pca.csv")).unwrap());
    assert_eq!(curve, fs::read_to_string(out.path().join("loss_curve.csv")).unwrap());

    let pca = String::from_utf8(pca).unwrap();
    assert!(pca.starts_with("chunk_id,cluster,pc1,pc2\n"));
    assert_eq!(pca.lines().count(), 1 + 4);

    let rows: Vec<(usize, String, f64)> = curve
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].to_owned(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(curve.lines().next(), Some("iteration,phase,loss"));
    assert!(rows.windows(2).all(|w| w[0].0 <= w[1].0));
    for i in 1..rows.len() {
        if rows[i].1 == "boost" {
            assert!(rows[i].2 <= rows[i - 1].2);
        }
    }
    assert_eq!(curve, fs::read_to_string(out.path().join("history.csv")).unwrap());
}

#[test]
fn report_after_perfect_initial_program_has_one_row() {
    let dir = fixture_copy();
    fs::write(dir.path().join("one.log"), "ping 1\nping 2\n").unwrap();
    fs::write(dir.path().join("one.csv"), "LineId,Content,EventTemplate\n1,ping 1,ping <*>\n2,ping 2,ping <*>\n").unwrap();
    let script = serde_json::json!({"rules": [
        {"purpose": "explore", "reply": "1. What do pings look like?"},
        {"purpose": "select", "reply": "{\"segments\":[{\"text\":\"ping 1\"}]}"},
        {"purpose": "pattern", "reply": "{\"version\":0,\"rules\":[{\"pattern\":\"ping (\\\\d+)\",\"template\":\"ping <*>\"}]}"},
    ]});
    fs::write(dir.path().join("one.json"), script.to_string()).unwrap();
    let cfg = dir.path().join("one.toml");
    fs::write(
        &cfg,
        "log = \"one.log\"\ntruth = \"one.csv\"\n[backend]\nscript = \"one.json\"\n[pipeline.qtree]\nbreadth = 1\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    assert_eq!(extract(&cfg, &out).0, 0);
    assert_eq!(run(bin().args(["report", "--run"]).arg(&out)).0, 0);
    let curve = fs::read_to_string(out.join("loss_curve.csv")).unwrap();
    assert_eq!(curve, "iteration,phase,loss\n0,init,0.0\n");
}

#[test]
fn report_without_manifest_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(bin().args(["report", "--run"]).arg(dir.path())).0, 2);
}
