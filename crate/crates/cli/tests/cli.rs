use std::path::Path;
use std::process::{Command, Output};

fn cine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cine-inr"))
        .env("RUST_LOG", "warn")
        .env_remove("CINE_INR_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("run_manifest.json")).expect("manifest written");
    serde_json::from_str(&text).expect("manifest is JSON")
}

fn write_group(path: &Path, values: &[f64]) {
    let mut text = String::from("subject,peak\n");
    for (i, v) in values.iter().enumerate() {
        text.push_str(&format!("s{i},{v}\n"));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn help_lists_subcommands_and_defaults() {
    let o = cine(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for sub in ["phantom", "align", "upsample", "register", "strain", "evaluate", "stats", "pipeline"] {
        assert!(text.contains(sub), "missing {sub}");
    }
    let o = cine(&["register", "--help"]);
    let text = stdout(&o);
    for d in ["[default: 2500]", "[default: 0.0001]", "[default: 10000]", "[default: 0.05]", "[default: weighted]"] {
        assert!(text.contains(d), "missing {d}:\n{text}");
    }
    assert!(stdout(&cine(&["pipeline", "--help"])).contains("[default: 6]"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(cine(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cine(&["register", "--out", "x"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"register_learning_rate": 1}"#).unwrap();
    let out = dir.path().join("out");
    let o = cine(&["--config", bad.to_str().unwrap(), "phantom", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn missing_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = cine(&["upsample", "--in", dir.path().join("nothing").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let m = manifest(&out);
    assert_eq!(m["exit_status"], 2);
    assert!(m["error"].is_string());
}

#[test]
fn stats_reports_kruskal_wallis() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_group(&a, &[1.0, 2.0, 3.0]);
    write_group(&b, &[4.0, 5.0, 6.0]);
    let out = dir.path().join("stats");
    let o = cine(&[
        "stats",
        "--groups",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--column",
        "peak",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("H = 3.857"), "{text}");
    assert!(text.contains("p = 0.049"), "{text}");
    assert!(out.join("stats.csv").exists());

    let o = cine(&[
        "stats",
        "--groups",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--column",
        "missing",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn phantom_then_upsample_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.json");
    std::fs::write(&config, r#"{"phantom_dims": [20, 20, 5], "phantom_spacing": [4.0, 4.0, 16.0], "phantom_phases": 3}"#)
        .unwrap();
    let data = dir.path().join("data");
    let o = cine(&[
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "3",
        "phantom",
        "--out",
        data.to_str().unwrap(),
        "--misalign",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["series.json", "ground_truth.json", "sax/frame_00.mha", "ch4/mask_02.mha", "ch2/frame_01.mha"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let m = manifest(&data);
    assert_eq!(m["subcommand"], "phantom");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["exit_status"], 0);

    let up = dir.path().join("up");
    let o = cine(&["upsample", "--in", data.to_str().unwrap(), "--out", up.to_str().unwrap(), "--factor", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let series: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(up.join("series.json")).unwrap()).unwrap();
    assert_eq!(series["phases"], 3);
    assert!(manifest(&up)["timings"]["total"].is_number());
}
