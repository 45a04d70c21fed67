use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn acdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acdg"))
        .args(args)
        .env_remove("ACDG_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = acdg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    acdg(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn small_data(dir: &Path) -> std::path::PathBuf {
    let d = dir.join("data");
    ok(&["gen-data", "--per-cell", "10", "--seed", "3", "--out", s(&d)]);
    d
}

#[test]
fn gen_data_counts_rows_and_is_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let flags = ["--strains", "9", "--conditions", "0.01,0.1,1,10,15", "--per-cell", "40", "--seed", "7"];
    for out in [&a, &b] {
        let mut args = vec!["gen-data"];
        args.extend_from_slice(&flags);
        args.extend_from_slice(&["--out", s(out)]);
        let o = ok(&args);
        assert!(String::from_utf8_lossy(&o.stdout).contains("mean_snr_db"));
    }
    let csv = fs::read(a.join("dataset.csv")).unwrap();
    assert_eq!(csv.iter().filter(|&&c| c == b'\n').count(), 1 + 1800);
    for f in ["dataset.csv", "axis.json", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_per_cell_exits_2_naming_the_flag() {
    let t = tempfile::tempdir().unwrap();
    let o = acdg(&["gen-data", "--per-cell", "0", "--out", s(t.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--per-cell"));
}

#[test]
fn bad_config_and_thread_settings_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.json");
    fs::write(&cfg, r#"{"data": {"per_cel": 3}}"#).unwrap();
    assert_eq!(code(&["gen-data", "--config", s(&cfg), "--out", s(t.path())]), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_acdg"))
        .args(["gen-data", "--out", s(t.path())])
        .env("ACDG_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.json");
    fs::write(&cfg, r#"{"seed": 5, "data": {"per_cell": 3, "strains": 4}}"#).unwrap();
    let out = t.path().join("o");
    ok(&["gen-data", "--config", s(&cfg), "--strains", "3", "--out", s(&out)]);
    let echoed = json(&out.join("config.json"));
    assert_eq!(echoed["seed"], 5);
    assert_eq!(echoed["data"]["per_cell"], 3);
    assert_eq!(echoed["data"]["strains"], 3);
    let rows = fs::read_to_string(out.join("dataset.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 3 * 5 * 3);
}

#[test]
fn full_pipeline_exits_zero() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let (m, e) = (t.path().join("acdg"), t.path().join("erm"));
    ok(&["train", "--data", s(&data), "--epochs", "3", "--out", s(&m)]);
    ok(&["train", "--data", s(&data), "--epochs", "3", "--method", "erm", "--out", s(&e)]);
    assert_eq!(fs::read_to_string(m.join("epochs.jsonl")).unwrap().lines().count(), 3);
    let (em, ee) = (t.path().join("eval_acdg"), t.path().join("eval_erm"));
    ok(&["eval", "--data", s(&data), "--checkpoint", s(&m.join("checkpoint")), "--out", s(&em)]);
    ok(&["eval", "--data", s(&data), "--checkpoint", s(&e.join("checkpoint")), "--out", s(&ee)]);
    let rep = t.path().join("report");
    ok(&["report", "--data", s(&em), "--data", s(&ee), "--out", s(&rep)]);
    for f in ["snr_vs_condition", "accuracy_vs_condition"] {
        let svg = fs::read_to_string(rep.join(format!("{f}.svg"))).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
        assert!(rep.join(format!("{f}.csv")).is_file());
    }

    let report = json(&em.join("report.json"));
    let config = json(&em.join("run.json"));
    assert_eq!(report["config_hash"], config["config_hash"]);
    assert_eq!(report["report"]["method"], "acdg");
    let manifest = json(&m.join("checkpoint/manifest.json"));
    assert_eq!(manifest["config"]["config_hash"], json(&m.join("run.json"))["config_hash"]);
    let header = fs::read_to_string(em.join("report.csv")).unwrap();
    assert_eq!(header.lines().next(), Some("task,source_s,eval_s,method,metric,value"));
}

#[test]
fn protocol_eval_writes_summary() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let out = t.path().join("proto");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--epochs",
        "1",
        "--seed",
        "0,1",
        "--source-condition",
        "0.1,10",
        "--denoiser",
        "none",
        "--out",
        s(&out),
    ]);
    let p = json(&out.join("protocol.json"));
    assert_eq!(p["protocol"]["runs"].as_array().unwrap().len(), 2 * 2 * 2);
    assert!(fs::read_to_string(out.join("summary.csv")).unwrap().lines().count() > 1);
    let rep = t.path().join("rep");
    ok(&["report", "--data", s(&out), "--out", s(&rep)]);
    assert!(rep.join("accuracy_vs_source.svg").is_file());
}

#[test]
fn denoise_keeps_rows_aligned() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let m = t.path().join("m");
    ok(&["train", "--data", s(&data), "--epochs", "1", "--out", s(&m)]);
    let out = t.path().join("den");
    ok(&["denoise", "--data", s(&data), "--checkpoint", s(&m.join("checkpoint")), "--out", s(&out)]);
    let input = fs::read_to_string(data.join("dataset.csv")).unwrap();
    let output = fs::read_to_string(out.join("denoised.csv")).unwrap();
    assert_eq!(input.lines().count(), output.lines().count());
    assert!(output.lines().next().unwrap().ends_with(",snr_before,snr_after"));
    for (a, b) in input.lines().zip(output.lines()).skip(1) {
        let key = |l: &str| l.splitn(4, ',').take(3).collect::<Vec<_>>().join(",");
        assert_eq!(key(a), key(b));
    }
}

#[test]
fn untrained_checkpoint_scores_near_chance() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["gen-data", "--per-cell", "40", "--seed", "11", "--out", s(&data)]);
    let m = t.path().join("m");
    ok(&["train", "--data", s(&data), "--epochs", "0", "--out", s(&m)]);
    let out = t.path().join("e");
    ok(&["eval", "--data", s(&data), "--checkpoint", s(&m.join("checkpoint")), "--out", s(&out)]);
    let r = json(&out.join("report.json"));
    let acc = r["report"]["inter_pooled"]["accuracy"].as_f64().unwrap();
    assert!((acc - 1.0 / 9.0).abs() <= 0.1, "accuracy {acc}");
}

#[test]
fn checkpoint_and_input_errors_have_distinct_codes() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let m = t.path().join("m");
    ok(&["train", "--data", s(&data), "--epochs", "0", "--out", s(&m)]);
    let ck = m.join("checkpoint");
    let x = t.path().join("x");
    let eval = |ck: &Path, data: &Path| code(&["eval", "--data", s(data), "--checkpoint", s(ck), "--out", s(&x)]);

    assert_eq!(eval(&t.path().join("missing"), &data), 3);

    let corrupt = t.path().join("corrupt");
    fs::create_dir_all(&corrupt).unwrap();
    fs::copy(ck.join("params.bin"), corrupt.join("params.bin")).unwrap();
    fs::write(corrupt.join("manifest.json"), "{").unwrap();
    assert_eq!(eval(&corrupt, &data), 4);

    let wide = t.path().join("wide");
    ok(&["gen-data", "--strains", "3", "--per-cell", "4", "--axis-length", "400", "--out", s(&wide)]);
    assert_eq!(eval(&ck, &wide), 5);

    let bad = t.path().join("bad");
    fs::create_dir_all(&bad).unwrap();
    fs::copy(data.join("axis.json"), bad.join("axis.json")).unwrap();
    fs::write(bad.join("dataset.csv"), "id,label\n1,2\n").unwrap();
    assert_eq!(eval(&ck, &bad), 6);
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let mut dirs = Vec::new();
    for run in ["r1", "r2"] {
        let m = t.path().join(run).join("m");
        let e = t.path().join(run).join("e");
        ok(&["train", "--data", s(&data), "--epochs", "2", "--out", s(&m)]);
        ok(&["eval", "--data", s(&data), "--checkpoint", s(&m.join("checkpoint")), "--out", s(&e)]);
        dirs.push((m, e));
    }
    let (a, b) = (&dirs[0], &dirs[1]);
    for f in ["checkpoint/manifest.json", "checkpoint/params.bin", "epochs.jsonl", "config.json"] {
        assert_eq!(fs::read(a.0.join(f)).unwrap(), fs::read(b.0.join(f)).unwrap(), "{f}");
    }
    for f in ["report.json", "report.csv", "config.json"] {
        assert_eq!(fs::read(a.1.join(f)).unwrap(), fs::read(b.1.join(f)).unwrap(), "{f}");
    }
}
