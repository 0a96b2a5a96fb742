use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_flis");

fn flis(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const TINY: &str = r#"{
  "data": { "dim": 8, "per_class": 40, "server_size": 40, "partition": { "kind": "label_skew", "fraction": 0.25 } },
  "federation": { "num_clients": 8, "rounds": 3, "local_epochs": 2, "hidden": 8 },
  "output": { "baselines": ["hc", "fedavg"], "seeds": 2, "target": 0.5 },
  "sweep": { "betas": [0.0, 1.0], "epochs": [1] }
}"#;

fn repo_config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).to_string_lossy().into_owned()
}

#[test]
fn identical_config_and_seed_give_byte_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = flis(&["run", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["summary.json", "rounds.jsonl"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    // rerunning from the echoed config reproduces the run
    let c = tmp.path().join("c");
    let o = flis(&["run", a.join("config.json").to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(a.join("summary.json")).unwrap(), std::fs::read(c.join("summary.json")).unwrap());

    let other = tmp.path().join("d");
    let o = flis(&["run", cfg.to_str().unwrap(), "--seed", "5", "--out", other.to_str().unwrap()]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(a.join("summary.json")).unwrap(), std::fs::read(other.join("summary.json")).unwrap());
}

#[test]
fn run_writes_one_record_per_round_and_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", TINY);
    let out = tmp.path().join("out");
    assert!(flis(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.success());
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(out.join("rounds.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3 * 3);
    assert!(lines.iter().all(|l| l.get("adjacency").is_none()));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let modes: Vec<&str> = summary["modes"].as_array().unwrap().iter().map(|m| m["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["dc", "hc", "fedavg"]);
    assert_eq!(summary["seeds"], serde_json::json!([0, 1]));
    assert!(summary["modes"][0]["final_accuracy_std_over_seeds"].is_f64());
    assert!(summary["modes"][0]["adjacency_max"].is_f64());
}

#[test]
fn minimal_config_gets_defaults_filled_and_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"federation": {"mode": "fedavg", "num_clients": 4, "rounds": 2}, "output": {"baselines": [], "seeds": 1}}"#);
    let out = tmp.path().join("out");
    let o = flis(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echo: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["federation"]["mode"], "fedavg");
    assert_eq!(echo["federation"]["num_clients"], 4);
    assert_eq!(echo["federation"]["lr"], 0.05);
    assert_eq!(echo["federation"]["batch_size"], 32);
    assert_eq!(echo["federation"]["sample_rate"], 1.0);
    assert_eq!(echo["data"]["dim"], 16);
    assert_eq!(echo["data"]["partition"]["kind"], "label_skew");
    assert_eq!(echo["output"]["dir"], out.to_str().unwrap());
}

#[test]
fn zero_sample_rate_is_rejected_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"federation": {"sample_rate": 0.0}}"#);
    let o = flis(&["run", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("federation.sample_rate"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_named_in_the_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", "{\n  \"federation\": {\n    \"betta\": 0.1\n  }\n}");
    let o = flis(&["run", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    let msg = stderr(&o);
    assert!(msg.contains("betta") && msg.contains("line 3"), "{msg}");
}

#[test]
fn corrupt_config_exits_nonzero_with_its_location() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", "{\n  \"federation\": { \"rounds\": 3,, }\n}");
    let o = flis(&["run", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    let missing = flis(&["run", tmp.path().join("absent.json").to_str().unwrap()]);
    assert!(!missing.status.success());
}

#[test]
fn sweep_writes_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", TINY);
    let out = tmp.path().join("s");
    let o = flis(&["sweep", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "beta,epochs,accuracy,fp,fn");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,1,") && lines[2].starts_with("1,1,"));
}

#[test]
fn report_marks_unreached_targets() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", TINY);
    let out = tmp.path().join("out");
    assert!(flis(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.success());
    let o = flis(&["report", out.to_str().unwrap(), "--target", "0.0", "--target", "1.01"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    // every mode reaches 0 after its first round and never reaches 1.01
    for row in &rows[..3] {
        assert!(row.split_whitespace().nth(2) == Some("1"), "{row}");
    }
    for row in &rows[3..] {
        assert_eq!(row.split_whitespace().filter(|c| *c == "--").count(), 2, "{row}");
    }
    let names: Vec<&str> = rows[..2].iter().map(|r| r.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["dc", "hc"]);
}

#[test]
fn shipped_configs_parse_and_smoke_run_is_fast() {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = flis(&["run", &repo_config("smoke.json"), "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(60));
    let echo = std::fs::read_to_string(tmp.path().join("config.json")).unwrap();
    assert!(echo.contains("\"num_clients\": 8"));
    let default = std::fs::read_to_string(repo_config("default.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&default).unwrap();
    assert_eq!(parsed["federation"]["num_clients"], 20);
}
