use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use es_adapt::scenario::CONFIG_KEYS;
use es_adapt_cli::output::{parse_manifest, TRACE_COLUMNS};

fn read_manifest(path: &Path) -> HashMap<String, String> {
    parse_manifest(&fs::read_to_string(path).unwrap()).into_iter().collect()
}

fn es_adapt(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_es-adapt"));
    cmd.args(args).env_remove("ES_ADAPT_OUT");
    if let Some(dir) = out_env {
        cmd.env("ES_ADAPT_OUT", dir);
    }
    cmd.output().expect("spawn es-adapt")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn help_documents_keys_and_presets() {
    let out = es_adapt(&["run", "--help"], None);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for (key, _) in CONFIG_KEYS {
        assert!(text.contains(key), "--help misses {key}");
    }
    for preset in ["nominal", "state_dep_case2", "timevar_case1", "synthetic_quadratic"] {
        assert!(text.contains(preset), "--help misses {preset}");
    }
    assert!(text.contains("Table 2") && text.contains("Table 3"));
}

#[test]
fn nominal_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let out = es_adapt(
        &["run", "--scenario", "nominal", "--iterations", "2", "--out", root, "--set", "sim.dt=0.002"],
        None,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let run = dir.path().join("nominal");
    assert_eq!(
        header(&run.join("iterations.csv")),
        "iter,J,delta_hat_1,delta_hat_2,delta_true_1,delta_true_2,max_z"
    );
    assert_eq!(header(&run.join("trace_first.csv")), TRACE_COLUMNS.join(","));

    let last = fs::read_to_string(run.join("trace_last.csv")).unwrap();
    let rows: Vec<&str> = last.lines().skip(1).collect();
    assert_eq!(rows.len(), 2001);
    for row in &rows {
        let z: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(z < 1e-6, "nominal tracking error {z}");
    }
    // 17 significant digits
    let mantissa = rows[1].split(',').nth(1).unwrap().split('e').next().unwrap();
    assert_eq!(mantissa.trim_start_matches('-').replace('.', "").len(), 17);

    let manifest = read_manifest(&run.join("manifest"));
    assert_eq!(manifest["scenario"], "nominal");
    assert_eq!(manifest["iterations"], "2");
    assert_eq!(manifest["config.sim.dt"].parse::<f64>().unwrap(), 0.002);
    assert!(manifest.keys().any(|k| k.starts_with("check.")));
    assert!(!run.read_dir().unwrap().any(|e| e.unwrap().file_name().to_string_lossy().contains(".tmp")));
}

#[test]
fn out_env_sets_default_root() {
    let dir = tempfile::tempdir().unwrap();
    let out = es_adapt(
        &["run", "--scenario", "synthetic_quadratic", "--iterations", "5"],
        Some(dir.path()),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = fs::read_to_string(dir.path().join("synthetic_quadratic/iterations.csv")).unwrap();
    assert_eq!(rows.lines().count(), 6);
}

#[test]
fn schema_errors_exit_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str); 4] = [
        (&["run", "--scenario", "no_such_preset"], "no_such_preset"),
        (&["run", "--scenario", "nominal", "--set", "mes.frequencies=[7.4, 7.4]"], "mes.frequencies"),
        (&["run", "--scenario", "nominal", "--set", "sim.bogus=1"], "sim.bogus"),
        (&["run", "--scenario", "nominal", "--set", "sim.dt=0.0015"], "sim.dt"),
    ];
    for (args, key) in cases {
        let out = es_adapt(args, Some(dir.path()));
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).contains(key), "{args:?}: {}", stderr(&out));
    }
    assert_eq!(code(&es_adapt(&["frobnicate"], None)), 1);
}

#[test]
fn config_file_merges_onto_preset() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("cfg.toml");
    fs::write(&file, "[sim]\niterations = 1\ndt = 0.004\n[cost]\nq1 = 2\n").unwrap();
    let root = dir.path().join("out");
    let out = es_adapt(
        &[
            "run", "--scenario", "timevar_case1",
            "--config", file.to_str().unwrap(),
            "--out", root.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest = read_manifest(&root.join("timevar_case1/manifest"));
    assert_eq!(manifest["config.cost.q1"].parse::<f64>().unwrap(), 2.0);
    assert_eq!(manifest["config.cost.q2"].parse::<f64>().unwrap(), 0.325);
}

#[test]
fn numerical_blowup_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = es_adapt(
        &["run", "--scenario", "state_dep_case2", "--iterations", "1", "--set", "sim.dt=1e-3"],
        Some(dir.path()),
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("blow"), "{}", stderr(&out));
}

#[test]
fn validate_rejects_non_hurwitz_gains() {
    let out = es_adapt(&["validate", "--set", "gains.k=[[-1, 1], [1, 1]]"], None);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("gains_hurwitz"), "{}", stderr(&out));
}

#[test]
fn sweep_writes_one_directory_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("sweep.toml");
    fs::write(
        &file,
        r#"
[[run]]
scenario = "synthetic_quadratic"
name = "slow"
iterations = 3
set = ["mes.gains=[0.5, 0.5]"]

[[run]]
scenario = "synthetic_quadratic"
name = "fast"
iterations = 3
"#,
    )
    .unwrap();
    let root = dir.path().join("out");
    let out = es_adapt(&["sweep", "--config", file.to_str().unwrap(), "--out", root.to_str().unwrap()], None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["slow", "fast"] {
        assert!(root.join(name).join("manifest").is_file(), "{name}");
    }
    let slow = read_manifest(&root.join("slow/manifest"));
    assert_eq!(slow["config.mes.gains"], "[0.5, 0.5]");

    fs::write(&file, "[[run]]\nscenario = \"nominal\"\nname = \"a\"\n[[run]]\nscenario = \"nominal\"\nname = \"a\"\n").unwrap();
    let dup = es_adapt(&["sweep", "--config", file.to_str().unwrap(), "--out", root.to_str().unwrap()], None);
    assert_eq!(code(&dup), 1);
}

// Recorded from the first validated run; guards against silent changes in the loop.
#[test]
fn timevar_case1_regression() {
    let dir = tempfile::tempdir().unwrap();
    let out = es_adapt(&["run", "--scenario", "timevar_case1", "--iterations", "100"], Some(dir.path()));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest = read_manifest(&dir.path().join("timevar_case1/manifest"));
    let estimate: Vec<f64> = manifest["final_delta_hat"]
        .split(',')
        .map(|v| v.trim().parse().unwrap())
        .collect();
    let recorded = [0.38142369872426135, 0.3137943835441648];
    for (got, want) in estimate.iter().zip(recorded) {
        assert!((got - want).abs() < 1e-9, "{estimate:?}");
    }
}
