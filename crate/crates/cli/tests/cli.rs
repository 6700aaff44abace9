//! Drives the built binary end to end.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mac_sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mac-sim")).args(args).output().expect("spawn mac-sim")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_then_run_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let city = tmp.path().join("city");
    let out = mac_sim(&["synth", "--users", "24", "--seed", "3", "--out", path(&city)]);
    assert!(out.status.success(), "{}", stderr(&out));

    let cfg = tmp.path().join("exp.cfg");
    fs::write(&cfg, "dataset = city\nk_regions = 2\nlr = 0.5\npatience = 0\nmax_epochs = 3\n").unwrap();
    let results = tmp.path().join("results");
    let out = mac_sim(&[
        "run", "--config", path(&cfg), "--sampling", "similarity", "--gamma", "0.5", "--refgen", "probabilistic",
        "--set", "mu=0.6", "--out", path(&results),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["report.json", "rounds.ndjson", "neighbors.json"] {
        assert!(results.join(f).is_file(), "missing {f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(results.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rounds"], 3);
    // users withheld for the reference pool are not evaluated
    let neighbors: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(results.join("neighbors.json")).unwrap()).unwrap();
    let evaluated = report["per_device"].as_array().unwrap().len();
    assert_eq!(evaluated, neighbors.as_object().unwrap().len());
    assert!(evaluated > 0 && evaluated < 24);
    let rounds = fs::read_to_string(results.join("rounds.ndjson")).unwrap();
    for line in rounds.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["l_loc"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn bad_config_names_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "dataset = nowhere\nmu = 3\n").unwrap();
    let out = mac_sim(&["run", "--config", path(&cfg), "--out", path(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("stage `config`"), "{}", stderr(&out));

    fs::write(&cfg, "dataset = nowhere\n").unwrap();
    let out = mac_sim(&["run", "--config", path(&cfg), "--out", path(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("stage `ingest`"), "{}", stderr(&out));
}

#[test]
fn ingest_small_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let checkins = tmp.path().join("checkins.csv");
    let friends = tmp.path().join("friends.csv");
    let mut csv = String::from("user_id,poi_id,category,lat,lon,timestamp\n");
    for u in 0..15 {
        for t in 0..12 {
            let p = (u + t) % 8;
            let lat = 40.70 + 0.01 * p as f64;
            writeln!(csv, "u{u},p{p},c{},{lat},-74.0,{}", p % 3, 1000 * t + u).unwrap();
        }
    }
    // a sparse user that the interaction filter drops
    csv.push_str("lonely,p0,c0,40.7,-74.0,5\n");
    fs::write(&checkins, csv).unwrap();
    fs::write(&friends, "user_a,user_b\nu0,u1\nu2,lonely\n").unwrap();

    let out_dir = tmp.path().join("data");
    let out = mac_sim(&[
        "ingest", "--checkins", path(&checkins), "--friends", path(&friends), "--min-interactions", "10",
        "--max-seq-len", "200", "--reference-fraction", "0.2", "--seed", "1", "--out", path(&out_dir),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ingested 15 users"), "{stdout}");
    assert!(out_dir.read_dir().unwrap().next().is_some());

    let missing = mac_sim(&[
        "ingest", "--checkins", path(&tmp.path().join("absent.csv")), "--friends", path(&friends), "--out",
        path(&out_dir),
    ]);
    assert!(!missing.status.success());
    assert!(stderr(&missing).contains("stage `ingest`"), "{}", stderr(&missing));
}
