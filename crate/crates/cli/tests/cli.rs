use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfg-errsim"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("scenario.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"{"params": "P6", "mode": "evolve", "N": 40, "steps": 200,
    "error_model": {"E_bar": [0.1, -0.1]}, "k_sweep": [1, 2]}"#;

#[test]
fn validate_accepts_good_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().arg("validate").arg(write_config(dir.path(), SMALL)).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok:"));
}

#[test]
fn validate_names_offending_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"params": {"base": "P6", "T": -1.0}, "mode": "evolve"}"#, "params.T"),
        (r#"{"params": {"base": "P6", "Q": [[1, 0], [0, -1]]}, "mode": "evolve"}"#, "Cholesky"),
        (r#"{"params": "P6", "mode": "evolve", "bogus": 1}"#, "bogus"),
        (r#"{"params": "P6", "mode": "nope"}"#, "nope"),
    ];
    for (text, needle) in cases {
        let o = bin().arg("validate").arg(write_config(dir.path(), text)).output().unwrap();
        assert_eq!(o.status.code(), Some(1), "{text}");
        assert!(stderr(&o).contains(needle), "{text}: {}", stderr(&o));
    }
}

#[test]
fn missing_config_and_bad_args_are_validation_failures() {
    assert_eq!(bin().args(["validate", "/nonexistent/x.json"]).status().unwrap().code(), Some(1));
    assert_eq!(bin().args(["run"]).status().unwrap().code(), Some(1));
    assert_eq!(bin().args(["bench", "--sizes", "12"]).status().unwrap().code(), Some(1));
    let o = bin().arg("validate").arg("x").env("MFG_ERRSIM_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("MFG_ERRSIM_THREADS"));
}

#[test]
fn run_writes_files_listed_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = bin().arg("run").arg(write_config(dir.path(), SMALL)).arg("--out").arg(&out).args(["--seed", "7"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["mode"], "evolve");
    let mut listed: Vec<String> =
        manifest["files"].as_array().unwrap().iter().map(|f| f["name"].as_str().unwrap().to_string()).collect();
    listed.push("manifest.json".into());
    listed.sort();
    let mut present: Vec<String> =
        std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    present.sort();
    assert_eq!(listed, present);
    for name in ["mf_predicted.csv", "mf_actual.csv", "deviations.csv", "linearity.csv", "plot.gp"] {
        assert!(present.iter().any(|p| p == name), "{name} missing");
    }
}

#[test]
fn steps_override_changes_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = bin().arg("run").arg(write_config(dir.path(), SMALL)).arg("--out").arg(&out).args(["--steps", "50"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("mf_actual.csv")).unwrap();
    // header plus 51 nodes for each of the two k values
    assert_eq!(csv.lines().count(), 1 + 2 * 51);
}

#[test]
fn predict_without_errors_has_zero_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), r#"{"params": "P6", "mode": "predict", "N": 20, "steps": 100}"#);
    let o = bin().arg("run").arg(cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(out.join("deviations.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        for (h, v) in headers.iter().zip(rec.iter()) {
            if h.starts_with("dz") || h.starts_with("dg") {
                assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{h}");
            }
        }
        rows += 1;
    }
    assert_eq!(rows, 101);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = |threads: &str| {
        let out = dir.path().join(format!("out{threads}"));
        let o = bin().arg("run").arg(&cfg).arg("--out").arg(&out).env("MFG_ERRSIM_THREADS", threads).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("1"), run("4"));
    for name in ["mf_actual.csv", "deviations.csv", "linearity.csv", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn unwritable_output_is_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = bin().arg("run").arg(write_config(dir.path(), SMALL)).arg("--out").arg(blocker.join("sub")).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn bench_runs_small_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("bench.csv");
    let o = bin().args(["bench", "--sizes", "10x40,20x40", "--reps", "5", "--out"]).arg(&report).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("10x40") && stdout.contains("time(20x40) / time(10x40)"));
    assert_eq!(std::fs::read_to_string(report).unwrap().lines().count(), 3);
}

#[test]
fn shipped_scenarios_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let o = bin().arg("validate").arg(&path).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}: {}", path.display(), stderr(&o));
        seen += 1;
    }
    assert!(seen >= 4);
}
