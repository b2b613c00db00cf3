use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn eqft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqft")).args(args).env_remove("EQFT_CACHE_DIR").output().unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn algebra_report_is_deterministic_and_passes() {
    let a = eqft(&["algebra", "check"]);
    assert_eq!(a.status.code(), Some(0));
    let r = json(&a);
    assert_eq!(r["format"], "eqft-report/1");
    assert_eq!(r["pass"], true);
    let checks = r["checks"].as_array().unwrap();
    assert!(checks.len() >= 5);
    assert!(checks.iter().all(|c| !c["reference"].as_str().unwrap().is_empty()));
    assert_eq!(eqft(&["algebra", "check"]).stdout, a.stdout);
}

#[test]
fn toml_and_json_configs_hash_the_same() {
    let dir = tempfile::tempdir().unwrap();
    let t = write(dir.path(), "run.toml", "seed = 3\n[background]\nn = 6\nextent = [3.0]\n");
    let j = write(dir.path(), "run.json", r#"{"seed": 3, "background": {"n": 6, "extent": [3.0, 3.0]}}"#);
    let a = json(&eqft(&["wick", "axioms", "--config", &t]));
    let b = json(&eqft(&["wick", "axioms", "--config", &j]));
    assert_eq!(a["config_hash"], b["config_hash"]);
    assert_eq!(a["seed"], 3);
    assert_eq!(a["pass"], true);
}

#[test]
fn unknown_config_keys_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let t = write(dir.path(), "bad.toml", "[background]\nsites = 6\n");
    let out = eqft(&["algebra", "check", "--config", &t]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sites"));
}

#[test]
fn empty_task_list_is_a_passing_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let t = write(dir.path(), "none.toml", "tasks = []\n");
    let out = eqft(&["verify", "all", "--config", &t]);
    assert_eq!(out.status.code(), Some(0));
    let r = json(&out);
    assert_eq!(r["pass"], true);
    assert!(r["checks"].as_array().unwrap().is_empty());
}

#[test]
fn failed_checks_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let t = write(dir.path(), "strict.toml", "[tolerances]\nexact = -1.0\n");
    let out = eqft(&["algebra", "check", "--config", &t]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["pass"], false);
}

#[test]
fn parametrix_file_round_trip_and_cache() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("g.bin");
    let file = file.to_str().unwrap();
    assert_eq!(eqft(&["parametrix", "build", "--file", file]).status.code(), Some(0));
    let d = json(&eqft(&["parametrix", "defect", "--file", file]));
    assert!(d["data"]["max_abs"].as_f64().unwrap() < 1e-10);
    assert_eq!(d["data"]["is_exact_green"], true);

    let cache = dir.path().join("cache");
    let run = || {
        Command::new(env!("CARGO_BIN_EXE_eqft"))
            .args(["parametrix", "coincidence"])
            .env("EQFT_CACHE_DIR", &cache)
            .output()
            .unwrap()
    };
    let first = run();
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 1);
    assert_eq!(run().stdout, first.stdout);
    assert_eq!(eqft(&["parametrix", "coincidence"]).stdout, first.stdout);
}

#[test]
fn shifted_parametrix_has_a_defect() {
    let dir = tempfile::tempdir().unwrap();
    let t = write(dir.path(), "p.toml", "[parametrix]\nkind = \"shifted\"\nshift_scale = 0.05\n");
    let file = dir.path().join("p.bin");
    let file = file.to_str().unwrap();
    assert_eq!(eqft(&["parametrix", "build", "--config", &t, "--file", file]).status.code(), Some(0));
    let d = json(&eqft(&["parametrix", "defect", "--config", &t, "--file", file]));
    assert!(d["data"]["max_abs"].as_f64().unwrap() > 1e-3);
    assert_eq!(d["data"]["is_exact_green"], false);
}

#[test]
fn wick_power_feeds_the_moller_map() {
    let dir = tempfile::tempdir().unwrap();
    let v = dir.path().join("v.json");
    let out = eqft(&["wick", "order", "--k", "2", "--out", v.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let out = eqft(&["moller", "run", "--interaction", v.to_str().unwrap(), "--order", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    assert_eq!(r["data"]["coefficients"].as_array().unwrap().len(), 3);
}

#[test]
fn extension_reports_counterterms() {
    let r = json(&eqft(&["extend", "--alpha", "3", "--dim", "3", "--radius", "2", "--spacing", "0.5"]));
    let table = r["data"]["counterterms"].as_array().unwrap();
    let c0 = table[0]["coefficient"].as_f64().unwrap();
    let want = -4.0 * std::f64::consts::PI * 2f64.ln();
    assert!((c0 - want).abs() < 1e-10, "{c0} vs {want}");
    assert_eq!(r["data"]["unique_extension"], false);
    let out = eqft(&["extend", "--alpha", "3", "--dim", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweeps_write_csv() {
    let out = eqft(&["sweep", "refinement", "--ns", "6,8"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n,spacing,p_diagonal,w_p");
    assert_eq!(lines.len(), 3);
    let r = json(&eqft(&["wick", "scaling-sweep", "--D", "3", "--k", "2", "--n", "4"]));
    assert_eq!(r["pass"], true);
    assert!((r["data"]["fit"]["kappa"].as_f64().unwrap() - 1.0).abs() < 1e-6);
}
