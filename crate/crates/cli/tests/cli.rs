use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use spiked_core::rs_landscape::classify_phase;
use spiked_core::ModelParams;

fn spiked(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spiked")).args(args).env_remove("SPIKED_WORKERS").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Run directory printed on the last line of stdout.
fn run_dir(out: &Output) -> PathBuf {
    let stdout = String::from_utf8_lossy(&out.stdout);
    PathBuf::from(stdout.lines().last().expect("run directory printed").split(' ').next().unwrap())
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn usage_errors_exit_2() {
    let out = spiked(&["lse", "--delta2", "0.7"]);
    assert_eq!(code(&out), 2);
    let out = spiked(&["lse", "--delta2=-1", "--deltap", "1"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("bad.spec");
    fs::write(&spec, "task = phase\ndelta2 = 1\naxis.deltap = 1:2:1\n").unwrap();
    let out = spiked(&["sweep", "--spec", spec.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&spiked(&["--help"])), 0);
}

#[test]
fn single_cell_phase_matches_classification() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spiked(&[
        "phase",
        "--deltap-min=0.4",
        "--deltap-count=1",
        "--inv-delta2-min=1.25",
        "--inv-delta2-count=1",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(&out);
    let table = rows(&dir.join("phase.csv"));
    assert_eq!(table.len(), 1);
    let pt = classify_phase(&ModelParams::new(3, 1.0 / 1.25, 0.4).unwrap());
    let r = &table[0];
    assert_eq!(&r[5], pt.phase.as_str());
    assert_eq!(r[6].parse::<f64>().unwrap(), pt.m_amp);
    assert_eq!(r[7].parse::<f64>().unwrap(), pt.m_star);
    assert_eq!(r[8].parse::<f64>().unwrap(), pt.mmse);
    let m = manifest(&dir);
    assert_eq!(m["status"], "complete");
    assert_eq!(&r[0], m["run_id"].as_str().unwrap());
}

#[test]
fn rerun_is_a_no_op_and_force_recomputes() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["complexity", "--delta2", "2", "--deltap", "0.3", "--x-grid", "0.2,0.5,0.9", "--out", tmp.path().to_str().unwrap()];
    let first = spiked(&args);
    assert_eq!(code(&first), 0);
    let dir = run_dir(&first);
    let before = fs::read(dir.join("manifest.json")).unwrap();
    let again = spiked(&args);
    assert_eq!(code(&again), 0);
    assert!(String::from_utf8_lossy(&again.stdout).contains("nothing to do"));
    assert_eq!(fs::read(dir.join("manifest.json")).unwrap(), before);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&spiked(&forced)), 0);
    assert_ne!(fs::read(dir.join("manifest.json")).unwrap(), before);
}

#[test]
fn outputs_carry_run_id_and_exist() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spiked(&[
        "instance",
        "--delta2",
        "0.7",
        "--deltap",
        "1",
        "--n",
        "60",
        "--seed",
        "3",
        "--iters",
        "5",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(&out);
    let m = manifest(&dir);
    let id = m["run_id"].as_str().unwrap();
    assert_eq!(m["seeds"], serde_json::json!([3]));
    for name in m["outputs"].as_array().unwrap() {
        let path = dir.join(name.as_str().unwrap());
        assert!(path.exists());
        if path.extension().is_some_and(|e| e == "csv") {
            assert!(rows(&path).iter().all(|r| &r[0] == id));
        }
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.conf");
    fs::write(&conf, "# complexity defaults\ndelta2 = 2.0\ndeltap = 0.3\nx_grid = 0.5\n").unwrap();
    let out_dir = tmp.path().join("runs");
    let out = spiked(&["complexity", "--config", conf.to_str().unwrap(), "--deltap", "0.25", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&run_dir(&out));
    assert_eq!(m["params"]["delta2"], "2");
    assert_eq!(m["params"]["deltap"], "0.25");
    assert_eq!(m["params"]["x_grid"], serde_json::json!(["0.5"]));
}

#[test]
fn lse_defaults_record_the_documented_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spiked(&["lse", "--delta2", "0.7", "--deltap", "1.4", "--tmax", "1e-4", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&run_dir(&out));
    let grid = &m["grid"];
    assert_eq!(grid["nt"], 1024);
    assert_eq!(grid["dt0"], "1e-7");
    assert_eq!(grid["nc"], 2);
    assert_eq!(grid["doublings"], 0);
    assert_eq!(m["params"]["scheme"], "dyn");
}

#[test]
fn short_fdt_window_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spiked(&[
        "fdt",
        "--delta2",
        "0.8",
        "--deltap",
        "0.2",
        "--waiting-times",
        "1",
        "--tmax",
        "2",
        "--nt",
        "64",
        "--dt0",
        "0.01",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let dir = fs::read_dir(tmp.path()).unwrap().next().unwrap().unwrap().path();
    let m = manifest(&dir);
    assert_eq!(m["status"], "failed");
    assert!(m["diagnostics"].as_str().unwrap().contains("aging window"));
    assert!(dir.join("trajectory.csv").exists());
}

#[test]
fn p4_phase_diagram_has_hybrid_hard_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spiked(&["phase", "--p", "4", "--deltap-count", "12", "--inv-delta2-count", "12", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let table = rows(&run_dir(&out).join("phase.csv"));
    assert_eq!(table.len(), 144);
    assert!(table.iter().any(|r| &r[5] == "hybrid_hard"));
    let curves = rows(&run_dir(&out).join("boundaries.csv"));
    assert!(curves.iter().any(|r| &r[2] == "algorithmic"));
}

fn sweep(spec: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["sweep", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    spiked(&args)
}

const SPEC: &str = "task = phase\np = 3\naxis.deltap = 0.2:1.2:3\naxis.delta2 = 0.5:2:3:log\n";

#[test]
fn sweep_results_do_not_depend_on_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("s.spec");
    fs::write(&spec, SPEC).unwrap();
    let one = sweep(&spec, &tmp.path().join("a"), &["--workers", "1"]);
    let three = sweep(&spec, &tmp.path().join("b"), &["--workers", "3"]);
    assert_eq!(code(&one), 0, "{}", String::from_utf8_lossy(&one.stderr));
    assert_eq!(code(&three), 0);
    let a = fs::read(run_dir(&one).join("results.csv")).unwrap();
    let b = fs::read(run_dir(&three).join("results.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(rows(&run_dir(&one).join("results.csv")).len(), 9);
}

#[test]
fn resumed_sweep_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("s.spec");
    fs::write(&spec, SPEC).unwrap();
    let out = tmp.path().join("runs");
    let full = sweep(&spec, &out, &[]);
    assert_eq!(code(&full), 0);
    let dir = run_dir(&full);
    let reference = fs::read(dir.join("results.csv")).unwrap();

    // Simulate an interruption: no manifest, no table, some points missing.
    fs::remove_file(dir.join("manifest.json")).unwrap();
    fs::remove_file(dir.join("results.csv")).unwrap();
    for k in [1, 4, 8] {
        fs::remove_file(dir.join("points").join(format!("{k}.json"))).unwrap();
    }
    let resumed = sweep(&spec, &out, &["--resume"]);
    assert_eq!(code(&resumed), 0);
    assert!(String::from_utf8_lossy(&resumed.stderr).contains("3 of 9 points"));
    assert_eq!(fs::read(dir.join("results.csv")).unwrap(), reference);

    let again = sweep(&spec, &out, &[]);
    assert!(String::from_utf8_lossy(&again.stdout).contains("nothing to do"));
}
