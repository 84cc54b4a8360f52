use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sddej_cli::output::Trajectory;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn sddej(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sddej"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn zero_field_simulation_is_constant() {
    let dir = tempfile::tempdir().unwrap();
    let out = sddej(&["simulate"], &configs().join("flat_zero.toml"), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let table = Trajectory::parse(&text).unwrap();
    assert_eq!(table.columns, ["t", "x_1", "e_11"]);
    assert!(table.rows.iter().all(|r| r[1] == 0.25));
    // a jump node appears twice: left limit, then value
    assert_eq!(table.rows.len(), 51 + 200 + 1);
    assert_eq!(table.to_csv(), text);
    assert!(dir.path().join("report.json").exists());
    assert!(dir.path().join("trajectory.json").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = configs().join("sphere_stochastic.toml");
    for dir in [&a, &b] {
        assert!(sddej(&["simulate"], &cfg, dir.path()).status.success());
    }
    for name in ["trajectory.csv", "trajectory.json", "report.json"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    assert!(sddej(&["simulate", "--seed", "12"], &cfg, c.path()).status.success());
    assert_ne!(
        std::fs::read(a.path().join("trajectory.csv")).unwrap(),
        std::fs::read(c.path().join("trajectory.csv")).unwrap()
    );
}

#[test]
fn single_member_ensemble_matches_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("sphere_stochastic.toml"))
        .unwrap()
        .replace("trajectories = false", "trajectories = true")
        + "\n[ensemble]\nsize = 1\n";
    let cfg = write_config(dir.path(), &text);
    let sim = dir.path().join("sim");
    let ens = dir.path().join("ens");
    assert!(sddej(&["simulate"], &cfg, &sim).status.success());
    assert!(sddej(&["ensemble", "--threads", "2"], &cfg, &ens).status.success());
    assert_eq!(
        std::fs::read(sim.join("trajectory.csv")).unwrap(),
        std::fs::read(ens.join("trajectory_0.csv")).unwrap()
    );
}

#[test]
fn ensemble_report_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("brownian_ensemble.toml"))
        .unwrap()
        .replace("size = 10000", "size = 200");
    let cfg = write_config(dir.path(), &text);
    let one = dir.path().join("one");
    let four = dir.path().join("four");
    assert!(sddej(&["ensemble", "--threads", "1"], &cfg, &one).status.success());
    assert!(sddej(&["ensemble", "--threads", "4"], &cfg, &four).status.success());
    for name in ["report.json", "ensemble.csv"] {
        assert_eq!(std::fs::read(one.join(name)).unwrap(), std::fs::read(four.join(name)).unwrap());
    }
}

#[test]
fn lift_check_discrepancies_halve() {
    let dir = tempfile::tempdir().unwrap();
    let out = sddej(&["lift-check"], &configs().join("sphere_lift.toml"), dir.path());
    assert!(out.status.success());
    let report = json(&out.stdout);
    let levels = report["summary"]["lift_check"]["levels"].as_array().unwrap().clone();
    assert_eq!(levels.len(), 3);
    let d: Vec<f64> = levels.iter().map(|l| l["frame_discrepancy"].as_f64().unwrap()).collect();
    assert!(d[1] <= 0.5 * d[0] && d[2] <= 0.5 * d[1], "{d:?}");
    // the reported norm can be recomputed from the written tables
    let lifted = Trajectory::parse(&std::fs::read_to_string(dir.path().join("lifted_h0.001.csv")).unwrap()).unwrap();
    let lift = Trajectory::parse(&std::fs::read_to_string(dir.path().join("liftpath_h0.001.csv")).unwrap()).unwrap();
    assert_eq!(lifted.rows.len(), lift.rows.len());
    let recomputed = lifted
        .rows
        .iter()
        .zip(&lift.rows)
        .flat_map(|(a, b)| a[3..].iter().zip(&b[3..]).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    assert_eq!(recomputed, d[2]);
}

#[test]
fn latitude_holonomy_is_pi() {
    let dir = tempfile::tempdir().unwrap();
    let out = sddej(&["transport"], &configs().join("latitude.toml"), dir.path());
    assert!(out.status.success());
    let report = json(&out.stdout);
    let levels = report["summary"]["transport"]["levels"].as_array().unwrap().clone();
    let last = levels.last().unwrap();
    assert!((last["angle"].as_f64().unwrap() - std::f64::consts::PI).abs() < 1e-6);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(configs().join("flat_zero.toml")).unwrap();

    let cfg = write_config(dir.path(), &base.replace("step = 0.01", "step = 0.03"));
    let out = sddej(&["simulate"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out.stderr)["category"], "config");

    let cfg = write_config(dir.path(), &base.replace("[solver]", "[solver]\nbogus = 1"));
    assert_eq!(sddej(&["simulate"], &cfg, dir.path()).status.code(), Some(2));

    let blowup = base.replace(
        "kind = \"zero\"",
        "kind = \"affine\"\nmatrix = [[1e90]]\noffset = [1.0]",
    );
    let cfg = write_config(dir.path(), &blowup);
    let out = sddej(&["simulate"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = json(&out.stderr);
    assert_eq!(err["category"], "numerical");
    assert!(err["time"].as_f64().is_some());

    let halfplane = r#"
        [manifold]
        name = "halfplane"
        [[fields]]
        kind = "constant"
        value = [0.0, -1.0]
        [equation]
        delay = 0.5
        [initial]
        kind = "constant"
        point = [0.0, 0.3]
        [solver]
        step = 0.01
        horizon = 2.0
    "#;
    // the transported drift shrinks with y, so the frame degenerates first
    let cfg = write_config(dir.path(), halfplane);
    let out = sddej(&["simulate"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(3));
    // a fill curve follows the field itself and crosses y = 0
    let jump = format!("{halfplane}\n[driver]\nkind = \"deterministic\"\njumps = [{{ time = 0.1, mark = 1.0 }}]\n");
    let cfg = write_config(dir.path(), &jump);
    let out = sddej(&["simulate"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(4));
    let err = json(&out.stderr);
    assert_eq!(err["category"], "chart_exit");
    assert_eq!(err["jump"], 1);
}
