use std::fs;
use std::process::{Command, Output};

fn shardflood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shardflood")).args(args).env_remove("SHARDFLOOD_OUT_DIR").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn analyze_affected_prints_the_curve() {
    let o = shardflood(&["analyze", "affected", "--shards", "16", "--inputs", "2"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "shards,inputs,probability\n16,2,0.176025\n");
}

#[test]
fn analyze_cost_matches_the_reference_figure() {
    let o = shardflood(&["analyze", "cost", "--txs", "2500"]);
    assert!(stdout(&o).ends_with("2500,1000,500,125.00\n"));
}

#[test]
fn demo_exit_code_reports_tampering() {
    let honest = shardflood(&["countermeasure-demo", "--txs", "4"]);
    assert_eq!(honest.status.code(), Some(0), "{}", String::from_utf8_lossy(&honest.stderr));
    for adversary in ["tamper-sout", "no-tee", "forge-process", "wrong-tx"] {
        let o = shardflood(&["countermeasure-demo", "--adversary", adversary, "--txs", "4"]);
        assert_eq!(o.status.code(), Some(3), "{adversary}");
        // Every transaction still commits through the honest validator.
        assert_eq!(stdout(&o).lines().filter(|l| l.contains("committed at")).count(), 4, "{adversary}");
    }
}

#[test]
fn config_errors_exit_with_two() {
    assert_eq!(shardflood(&["simulate", "--shards", "0"]).status.code(), Some(2));
    assert_eq!(shardflood(&["simulate", "--malicious-fraction", "1.5"]).status.code(), Some(2));
    assert_eq!(shardflood(&["simulate", "--no-such-flag"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[sim]\nshardz = 4\n").unwrap();
    assert_eq!(shardflood(&["simulate", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn simulate_writes_csvs_and_a_reproducible_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_shardflood"))
        .args(["simulate", "--shards", "4", "--tps", "800", "--txs", "4000", "--malicious-fraction", "0.2"])
        .env("SHARDFLOOD_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["throughput.csv", "latency.csv", "queue_0.csv", "queue_3.csv", "manifest.toml", "report.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("version = "));
    assert!(manifest.contains("malicious_fraction = 0.2"));

    // Replaying the manifest's config reproduces the CSVs byte for byte.
    let parsed: toml::Table = toml::from_str(&manifest).unwrap();
    let config = dir.path().join("again.toml");
    fs::write(&config, toml::to_string(&parsed["config"]).unwrap()).unwrap();
    let again = dir.path().join("again");
    let o = shardflood(&["simulate", "--config", config.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["throughput.csv", "latency.csv", "queue_0.csv"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn runs_fan_out_into_seeded_directories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = shardflood(&["simulate", "--shards", "2", "--tps", "300", "--txs", "1500", "--seed", "40", "--runs", "2", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("0,2,hash,300,0,40,"), "{}", rows[0]);
    assert!(rows[1].starts_with("1,2,hash,300,0,41,"), "{}", rows[1]);
    for i in 0..2 {
        assert!(dir.path().join(format!("run-{i}/config.toml")).exists());
        assert!(dir.path().join(format!("run-{i}/manifest.toml")).exists());
    }
}

#[test]
fn generated_workload_round_trips_through_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("w.txt");
    let o = shardflood(&["gen-workload", "--count", "1500", "--shards", "4", "--genesis", "32", "--out", file.to_str().unwrap()]);
    assert!(o.status.success());
    let text = fs::read_to_string(&file).unwrap();
    assert!(text.starts_with("# shardflood"));
    assert_eq!(text.lines().filter(|l| l.contains("kind=legit")).count(), 1500);

    let out = dir.path().join("sim");
    let o = shardflood(&[
        "simulate", "--workload", file.to_str().unwrap(), "--shards", "4", "--tps", "300", "--txs", "1500", "--sharder", "tee",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let row = stdout(&o).lines().nth(1).unwrap().to_string();
    assert!(row.starts_with("4,tee,300,0,1,1500,1500,"), "{row}");
}

#[test]
fn gen_attack_marks_ground_transactions() {
    let o = shardflood(&["gen-attack", "--fraction", "0.5", "--count", "400", "--shards", "4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let malicious = text.lines().filter(|l| l.contains("kind=malicious")).count();
    let legit = text.lines().filter(|l| l.contains("kind=legit")).count();
    assert_eq!(malicious + legit, 400);
    assert!((150..=250).contains(&malicious), "{malicious}");
}
