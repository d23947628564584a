use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tbcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tbcnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn budget_rows() {
    let o = tbcnet(&["budget", "--bc", "8", "--l", "4"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("M_p       195984         0.187"), "{s}");
    assert!(s.contains("OPs       75497472       72.000"), "{s}");
    let s = stdout(&tbcnet(&["budget", "--bc", "16", "--l", "3"]));
    assert!(s.contains("M_m       3538944        3.375"), "{s}");
}

#[test]
fn budget_published_rows_pass() {
    let o = tbcnet(&["budget", "--table2"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("8/8 PASS"), "{s}");
    assert_eq!(s.matches(" PASS").count(), 9);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(tbcnet(&["budget", "--bc", "0", "--l", "3"]).status.code(), Some(1));
    assert_eq!(tbcnet(&["budget"]).status.code(), Some(1));
    assert_eq!(tbcnet(&["no-such-command"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let o = tbcnet(&["synth", "--out", p(dir.path()), "--counts", "1,1,1,1", "--builtin-backgrounds"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--seed"));
}

#[test]
fn train_tem_needs_the_scm_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tem.tbcw");
    let o = tbcnet(&["train-tem", "--data", p(dir.path()), "--out", p(&out), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("SCM checkpoint required (stage 1"));
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let scm = dir.path().join("scm.tbcw");
    let o = tbcnet(&["train-scm", "--data", p(&dir.path().join("absent")), "--out", p(&scm), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("synth"));
}

#[test]
fn synth_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = tbcnet(&["synth", "--out", p(d.path()), "--counts", "10,10,10,10", "--seed", "5", "--builtin-backgrounds"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let manifest = fs::read_to_string(a.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 40);
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
}

#[test]
fn synth_accepts_full_scale_counts() {
    let d = tempfile::tempdir().unwrap();
    let o = tbcnet(&["synth", "--out", p(d.path()), "--counts", "2170,2402,2320,2460", "--seed", "3", "--builtin-backgrounds"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(d.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 2170 + 2402 + 2320 + 2460);
}

fn train_pair(root: &Path, data: &Path, workers: &str) -> (Vec<u8>, Vec<u8>) {
    let scm = root.join(format!("scm{workers}.tbcw"));
    let tem = root.join(format!("tem{workers}.tbcw"));
    let o = tbcnet(&[
        "--workers", workers, "train-scm", "--data", p(data), "--val", p(data), "--out", p(&scm), "--seed", "2", "--epochs", "1",
        "--batch-size", "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = tbcnet(&[
        "--workers", workers, "train-tem", "--data", p(data), "--scm", p(&scm), "--out", p(&tem), "--seed", "2", "--epochs", "1",
        "--batch-size", "4", "--bc", "2", "--l", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    (fs::read(&scm).unwrap(), fs::read(&tem).unwrap())
}

#[test]
fn pipeline_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let o = tbcnet(&["synth", "--out", p(&data), "--counts", "2,2,2,2", "--seed", "9", "--builtin-backgrounds"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let one = train_pair(root.path(), &data, "1");
    let two = train_pair(root.path(), &data, "2");
    assert_eq!(one, two, "worker count changed the weights");
    let tem = root.path().join("tem1.tbcw");
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.path().join("tem1.json")).unwrap()).unwrap();
    assert_eq!(side["model"], "tem");
    assert_eq!(side["log"]["scm_hash_before"], side["log"]["scm_hash_after"]);

    let det = root.path().join("det");
    let o = tbcnet(&["detect", "--model", p(&tem), "--input", p(&data), "--out", p(&det), "--k", "25"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(det.join("000000_d_target.pgm").exists());
    assert!(det.join("000007_d_mask.pgm").exists());
    for line in fs::read_to_string(det.join("detections.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["centroid"].as_array().unwrap().len(), 2);
    }

    let ev = root.path().join("eval");
    let o = tbcnet(&["eval", "--detections", p(&det), "--data", p(&data), "--out", p(&ev)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(ev.join("roc.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv.lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    let (first, last) = (&rows[0], rows.last().unwrap());
    assert_eq!(first[2], 1.0);
    assert!(first[1] > 0.5);
    assert_eq!((last[1], last[2]), (0.0, 0.0));
    assert!(ev.join("roc_k.csv").exists() && ev.join("metrics.csv").exists() && ev.join("summary.json").exists());

    // same inputs, same bytes
    let ev2 = root.path().join("eval2");
    tbcnet(&["eval", "--detections", p(&det), "--data", p(&data), "--out", p(&ev2)]);
    assert_eq!(dir_bytes(&ev), dir_bytes(&ev2));

    let base = root.path().join("tophat");
    let o = tbcnet(&["detect", "--baseline", "tophat", "--input", p(&data), "--out", p(&base), "--k", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn config_file_supplies_seed_and_flags_override() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tbcnet(&["synth", "--out", p(&data), "--counts", "1,1,1,1", "--seed", "4", "--builtin-backgrounds"]);
    let cfg = root.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 11, "epochs": 3, "batch_size": 2}"#).unwrap();
    let out = root.path().join("scm.tbcw");
    let o = tbcnet(&["train-scm", "--data", p(&data), "--out", p(&out), "--config", p(&cfg), "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.path().join("scm.json")).unwrap()).unwrap();
    assert_eq!(side["config"]["seed"], 11);
    assert_eq!(side["config"]["epochs"], 1);
    assert_eq!(side["config"]["batch_size"], 2);
}
