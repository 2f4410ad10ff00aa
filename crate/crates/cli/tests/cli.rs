use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gda")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{
  "dataset": {"kind": "gaussian_drift", "d": 4, "n_labeled": 60, "n_unlabeled_total": 200,
              "n_target_eval": 100, "seed": 5},
  "method": "gradual_st",
  "selftrain": {"window": 50, "epochs": 3},
  "seeds": [1, 2]
}"#;

#[test]
fn run_is_byte_deterministic_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, SMALL).unwrap();
    let (a, b, csv) = (dir.path().join("a.json"), dir.path().join("b.json"), dir.path().join("s.csv"));
    let o = gda(&["run", "--config", path(&cfg), "--out", path(&a), "--csv", path(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&gda(&["run", "--config", path(&cfg), "--out", path(&b)])), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&a).unwrap()).unwrap();
    assert_eq!(report["per_seed"].as_array().unwrap().len(), 2);
    // Defaults are materialized in the echoed config.
    assert_eq!(report["config"]["selftrain"]["confidence_filter"], 0.1);
    assert!(dir.path().join("a.json.timing.json").exists());
    let csv = fs::read_to_string(&csv).unwrap();
    assert!(csv.starts_with("method,seed,accuracy\ngradual_st,1,"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn config_errors_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, SMALL.replace("\"seeds\"", "\"colour\": 1, \"seeds\"")).unwrap();
    let out = dir.path().join("r.json");
    let o = gda(&["run", "--config", path(&cfg), "--out", path(&out)]);
    assert_eq!(code(&o), 64);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    fs::write(&cfg, SMALL.replace("\"window\": 50", "\"window\": 30")).unwrap();
    assert_eq!(code(&gda(&["run", "--config", path(&cfg), "--out", path(&out)])), 64);
    assert_eq!(code(&gda(&["run", "--config", "/nonexistent.json", "--out", path(&out)])), 65);
    assert_eq!(code(&gda(&["run", "--out", path(&out)])), 64);
}

#[test]
fn ablate_runs_paired_arms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("a.json");
    let o = gda(&["ablate", "--config", path(&cfg), "--ablation", "no_filter", "--out", path(&out)]);
    assert_eq!(code(&o), 0);
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(r["deltas"].as_array().unwrap().len(), 2);
    assert_eq!(r["ablated"]["config"]["selftrain"]["confidence_filter"], 0.0);
    let o = gda(&["ablate", "--config", path(&cfg), "--ablation", "dropout", "--out", path(&out)]);
    assert_eq!(code(&o), 64);
}

#[test]
fn wdist_on_generated_construction() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"kind":"counterexample","construction":{"kind":"baselines_fail"}}"#).unwrap();
    let ce = dir.path().join("ce");
    assert_eq!(code(&gda(&["gen", "--spec", path(&spec), "--out-dir", path(&ce)])), 0);
    let (p0, p1) = (ce.join("domain_0000.csv"), ce.join("domain_0001.csv"));
    let o = gda(&["wdist", "--p", path(&p0), "--q", path(&p1), "--conditional"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["rho"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-9);
    let o = gda(&["wdist", "--p", path(&p0), "--q", path(&p0)]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["winf"], 0.0);
}

#[test]
fn wdist_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let u = dir.path().join("u.csv");
    fs::write(&u, "x0,x1\n0,0\n1,1\n").unwrap();
    assert_eq!(code(&gda(&["wdist", "--p", path(&u), "--q", path(&u), "--conditional"])), 64);
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x0,x1\n0,0\n1,oops\n").unwrap();
    let o = gda(&["wdist", "--p", path(&bad), "--q", path(&u)]);
    assert_eq!(code(&o), 65);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_writes_sequence_directory() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"kind":"rotation","n_points":20,"n_domains":3}"#).unwrap();
    let out = dir.path().join("rot");
    assert_eq!(code(&gda(&["gen", "--spec", path(&spec), "--out-dir", path(&out)])), 0);
    for f in ["source.csv", "inter_0001.csv", "inter_0003.csv", "target_eval.csv", "meta.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    fs::write(&spec, r#"{"kind":"rotation","sides":3}"#).unwrap();
    assert_eq!(code(&gda(&["gen", "--spec", path(&spec), "--out-dir", path(&out)])), 64);
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v.json");
    assert_eq!(code(&gda(&["verify", "--suite", "everything", "--out", path(&out)])), 64);
    let o = gda(&["verify", "--suite", "margin", "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["overall"], "pass");
    let o = gda(&["verify", "--suite", "margin", "--out", path(&out), "--sabotage", "baselines_fail"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let u = dir.path().join("u.csv");
    fs::write(&u, "x0\n0\n1\n").unwrap();
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_gda"))
            .env("GDA_THREADS", threads)
            .args(["wdist", "--p", path(&u), "--q", path(&u)])
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("2")), 0);
    assert_eq!(code(&run("zero")), 64);
    assert_eq!(code(&run("0")), 64);
}

#[test]
fn shipped_configs_match_reference_benchmark() {
    use gradual_core::experiment::{gaussian_default, ExperimentConfig, Method};
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (file, method) in [
        ("gaussian_source_only.json", Method::SourceOnly),
        ("gaussian_target_st.json", Method::TargetSt),
        ("gaussian_all_st.json", Method::AllSt),
        ("gaussian_gradual_st.json", Method::GradualSt),
    ] {
        let cfg = ExperimentConfig::from_json(&fs::read_to_string(root.join(file)).unwrap()).unwrap();
        assert_eq!(cfg, gaussian_default(method, vec![0, 1, 2, 3, 4]), "{file}");
    }
}
