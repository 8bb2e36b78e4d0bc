use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/reference.json")
}

fn drsls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drsls")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn edited_config(dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v = read_json(&fixture());
    edit(&mut v);
    let path = dir.join(name);
    fs::write(&path, v.to_string()).unwrap();
    path
}

fn gen_data(out: &Path, config: &Path) -> PathBuf {
    let o = drsls(&["gen-data", p(config), "--out", p(out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("dataset.json")
}

#[test]
fn gen_data_writes_reference_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = drsls(&["gen-data", p(&fixture()), "--out", p(&out), "--seed", "7"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("N=20 T=10 n=2 m=1"));
    let v = read_json(&out.join("dataset.json"));
    assert_eq!(v["schema"], "drsls-dataset-v1");
    assert_eq!(v["seed"], 7);
    let traj = v["trajectories"].as_array().unwrap();
    assert_eq!(traj.len(), 20);
    assert!(traj.iter().all(|t| t["x"].as_array().unwrap().len() == 11 && t["u"].as_array().unwrap().len() == 10));
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["run_id"], v["run_id"]);
    assert_eq!(manifest["seeds"]["data"], 7);

    let again = dir.path().join("b");
    assert!(drsls(&["gen-data", p(&fixture()), "--out", p(&again), "--seed", "7"]).status.success());
    assert_eq!(fs::read(out.join("dataset.json")).unwrap(), fs::read(again.join("dataset.json")).unwrap());
}

#[test]
fn missing_horizon_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_config(dir.path(), "no_t.json", |v| {
        v.as_object_mut().unwrap().remove("T");
    });
    let o = drsls(&["gen-data", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`T`"));
}

#[test]
fn malformed_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ \"schema\": ").unwrap();
    assert_eq!(drsls(&["gen-data", p(&bad), "--out", p(dir.path())]).status.code(), Some(2));
    assert_eq!(drsls(&["synth", p(&fixture()), p(&bad), "--out", p(dir.path())]).status.code(), Some(2));
    assert_eq!(drsls(&["synth", p(&fixture()), p(&bad), "--method", "lqr"]).status.code(), Some(2));
    assert_eq!(drsls(&["validate", p(&bad), p(&fixture()), "--out", p(dir.path())]).status.code(), Some(2));
}

#[test]
fn synth_validate_and_bounds_on_reference() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(&dir.path().join("data"), &fixture());
    let rr_dir = dir.path().join("rr");
    let saa_dir = dir.path().join("saa");
    let o = drsls(&["synth", p(&fixture()), p(&data), "--method", "rr", "--out", p(&rr_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("rr objective"));
    let o = drsls(&["synth", p(&fixture()), p(&data), "--method", "saa", "--out", p(&saa_dir)]);
    assert!(o.status.success());
    let rr = read_json(&rr_dir.join("controller.json"));
    let saa = read_json(&saa_dir.join("controller.json"));
    assert_eq!(rr["schema"], "drsls-controller-v1");
    assert!(saa["gamma"].is_null());
    assert!(saa["objective"].as_f64().unwrap() < rr["objective"].as_f64().unwrap());
    let table = fs::read_to_string(rr_dir.join("gamma_table.csv")).unwrap();
    assert!(table.starts_with("gamma,status,objective\n"));
    assert_eq!(table.lines().count(), 10);

    let val = dir.path().join("val");
    let (ctrl, cfg) = (rr_dir.join("controller.json"), fixture());
    let args = ["validate", p(&ctrl), p(&cfg), "--rollouts", "50", "--data", p(&data), "--out", p(&val)];
    let o = drsls(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("cost_bound_satisfied=") && stdout.contains("cvar_satisfied="));
    let report = read_json(&val.join("validation.json"));
    assert_eq!(report["report"]["n_rollouts"], 50);
    assert!(report["report"]["max_rollout_deviation"].as_f64().unwrap() <= 1e-7);
    assert!(report["report"]["shift_report"]["epsilon_surrogate"].is_number());
    let traj = fs::read_to_string(val.join("traj.csv")).unwrap();
    assert!(traj.starts_with("rollout_id,k,x1,x2,u1\n"));
    assert_eq!(traj.lines().count(), 1 + 50 * 11);
    let first = (fs::read(val.join("validation.json")).unwrap(), traj);
    assert!(drsls(&args).status.success());
    assert_eq!(first.0, fs::read(val.join("validation.json")).unwrap());
    assert_eq!(first.1, fs::read_to_string(val.join("traj.csv")).unwrap());

    let bounds = dir.path().join("bounds");
    let o = drsls(&[
        "bounds",
        p(&rr_dir.join("controller.json")),
        p(&fixture()),
        p(&data),
        "--sets",
        "2",
        "--out",
        p(&bounds),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let b = read_json(&bounds.join("bounds.json"));
    assert_eq!(b["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn huge_error_bounds_have_no_feasible_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(&dir.path().join("data"), &fixture());
    let cfg = edited_config(dir.path(), "big.json", |v| {
        v["error_bounds"] = serde_json::json!({"e_A": 10.0, "e_B": 10.0});
        v.as_object_mut().unwrap().remove("sweep");
    });
    let out = dir.path().join("rr");
    let o = drsls(&["synth", p(&cfg), p(&data), "--method", "rr", "--out", p(&out), "--gamma-grid", "0.2,0.5"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no feasible gamma"));
    let table = fs::read_to_string(out.join("gamma_table.csv")).unwrap();
    assert_eq!(table, "gamma,status,objective\n0.2,infeasible,\n0.5,infeasible,\n");
    assert!(!out.join("controller.json").exists());
}

#[test]
fn zero_noise_validation_is_deterministic_per_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_config(dir.path(), "quiet.json", |v| {
        v["data_collection"]["noise"]["scale"] = 0.0.into();
    });
    let data = gen_data(&dir.path().join("data"), &cfg);
    let saa = dir.path().join("saa");
    assert!(drsls(&["synth", p(&cfg), p(&data), "--method", "saa", "--out", p(&saa)]).status.success());
    let val = dir.path().join("val");
    let o = drsls(&["validate", p(&saa.join("controller.json")), p(&cfg), "--rollouts", "4", "--out", p(&val)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&val.join("validation.json"));
    let rate = r["report"]["violation_rate"].as_f64().unwrap();
    assert!(rate == 0.0 || rate == 1.0);
    let traj = fs::read_to_string(val.join("traj.csv")).unwrap();
    let rows: Vec<Vec<&str>> = traj.lines().skip(1).map(|l| l.split(',').skip(1).collect()).collect();
    assert_eq!(rows.len(), 44);
    assert_eq!(rows[..11], rows[33..]);
}

#[test]
fn sweep_single_zero_draw_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_config(dir.path(), "zero.json", |v| {
        v["sweep"]["norm_range"] = serde_json::json!([0.0, 0.0]);
    });
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o =
            drsls(&["sweep", p(&cfg), "--draws", "1", "--rollouts", "20", "--gamma-grid", "0.2,0.4", "--out", p(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a");
    let b = run("b");
    let csv = fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("draw_id,dA_norm,dB_norm,method,status,opt_cost,val_cost_mean,val_cvar,violation_rate\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("0,0,0,saa,optimal") && csv.contains("0,0,0,rr,optimal"));
    assert_eq!(csv, fs::read_to_string(b.join("sweep.csv")).unwrap());
    assert_eq!(fs::read(a.join("sweep.json")).unwrap(), fs::read(b.join("sweep.json")).unwrap());
    assert_eq!(read_json(&a.join("manifest.json"))["outputs"], serde_json::json!(["sweep.json", "sweep.csv"]));
}
