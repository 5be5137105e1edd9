use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use potential_bench::output::read_matrix;

const BIN: &str = env!("CARGO_BIN_EXE_potential-bench");

const FLAT: &str = r#"{
  "domain": {"kind": "graph", "n": 2, "extent": 1.0, "h": 0.1},
  "problem": "dirichlet",
  "data": {"name": "smooth_bump", "radius": 0.5},
  "scales": {"s": 0.1, "S": 0.25, "R": 0.5, "delta": 0.001, "p": 2},
  "truncation": {"t": 0.2, "T": 0.4, "R_tilde": 0.5},
  "export_matrices": true
}"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

fn run(command: &str, config: &Path, out: &Path, threads: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args([command, "--config"]).arg(config).arg("--out").arg(out);
    match threads {
        Some(t) => cmd.env("POTBENCH_THREADS", t),
        None => cmd.env_remove("POTBENCH_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read_csv(path: &Path) -> Vec<HashMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    r.records()
        .map(|rec| header.iter().cloned().zip(rec.unwrap().iter().map(String::from)).collect())
        .collect()
}

fn num(row: &HashMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or_else(|_| panic!("column {key} = {:?}", row[key]))
}

fn manifest(path: &Path) -> HashMap<String, String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn unknown_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"domain": {"kind": "sphere", "level": 2}, "foo": 1}"#);
    let o = run("solve-dirichlet", &cfg, &dir.path().join("out"), None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("foo"));
}

#[test]
fn invalid_thread_count_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), FLAT);
    let o = run("solve-dirichlet", &cfg, &dir.path().join("out"), Some("many"));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("POTBENCH_THREADS"));
}

#[test]
fn unwritable_output_exits_with_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), FLAT);
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = run("solve-dirichlet", &cfg, &blocker.join("out"), None);
    assert_eq!(code(&o), 3);
}

#[test]
fn incompatible_neumann_datum_exits_with_module_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"domain": {"kind": "sphere", "level": 2}, "problem": "neumann",
            "data": {"name": "constant", "value": 1.0}}"#,
    );
    let o = run("solve-neumann", &cfg, &dir.path().join("out"), None);
    assert_eq!(code(&o), 1);
}

#[test]
fn flat_dirichlet_density_is_twice_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), FLAT);
    let out = dir.path().join("out");
    let o = run("solve-dirichlet", &cfg, &out, Some("2"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("density.csv"));
    assert_eq!(rows.len(), 441);
    for row in &rows {
        assert_eq!(num(row, "g"), 2.0 * num(row, "f"));
    }

    let m = manifest(&out.join("manifest.txt"));
    for key in ["nodes", "adr_lower", "adr_upper", "c_d", "truncation_t", "truncation_T", "truncation_R_tilde"] {
        assert!(m.contains_key(key), "manifest lacks {key}");
    }
    assert_eq!(m["nodes"], "441");
    assert_eq!(m["command"], "solve-dirichlet");
    assert_eq!(m["config_sha256"].len(), 64);
}

#[test]
fn flat_spectrum_norms_vanish_and_matrices_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), FLAT);
    let out = dir.path().join("out");
    let o = run("spectrum", &cfg, &out, None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("norms.csv"));
    assert!(rows.len() >= 5);
    for row in &rows {
        assert_eq!(num(row, "norm"), 0.0, "{}", row["operator"]);
    }

    let (m, _) = read_matrix(&out.join("K.bin")).unwrap();
    assert_eq!((m.rows(), m.cols()), (441, 441));
    assert!(m.as_slice().iter().all(|&v| v == 0.0));
    let sidecar = manifest(&out.join("K.bin.txt"));
    assert_eq!(sidecar["rows"], "441");
}

#[test]
fn gauss_study_error_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"domain": {"kind": "sphere", "level": 2},
            "study": {"quantity": "gauss", "levels": [2, 3, 4]}}"#,
    );
    let out = dir.path().join("out");
    let o = run("convergence-study", &cfg, &out, None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("convergence.csv"));
    assert_eq!(rows.len(), 3);
    let errors: Vec<f64> = rows.iter().map(|r| num(r, "error")).collect();
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
}

#[test]
fn unknown_command_is_rejected_by_the_parser() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), FLAT);
    let o = run("bogus", &cfg, &dir.path().join("out"), None);
    assert_eq!(code(&o), 2);
}
