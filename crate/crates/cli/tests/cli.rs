use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn vemis(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vemis"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Temp dir with scenario 2541 (first passenger car scenario) extracted into `data/`.
fn with_data() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = vemis(&["extract", "--scenarios", "2541..2542", "--out", "data"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn trained() -> TempDir {
    let dir = with_data();
    let o = vemis(&["train", "data", "--out", "model.nmnn", "--epochs", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn extract_one_scenario_then_skip() {
    let dir = tempfile::tempdir().unwrap();
    let o = vemis(&["extract", "--scenarios", "0..1", "--out", "d"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("extracted 4791 records"), "{}", stdout(&o));
    let report = json(&dir.path().join("d/extract_0_1.json"));
    assert_eq!(report["report"]["records_written"], 4791);
    assert_eq!(report["manifest"]["subcommand"], "extract");

    let again = vemis(&["extract", "--scenarios", "0..1", "--out", "d"], dir.path());
    assert_eq!(code(&again), 0);
    assert!(stdout(&again).contains("already extracted"));
}

#[test]
fn extract_empty_range_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = vemis(&["extract", "--scenarios", "0..0", "--out", "d"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("extracted 0 records"));
    assert_eq!(code(&vemis(&["extract", "--scenarios", "3..1", "--out", "d"], dir.path())), 2);
    assert_eq!(code(&vemis(&["extract", "--scenarios", "0..30000", "--out", "d"], dir.path())), 2);
    assert_eq!(code(&vemis(&["extract", "--scenarios", "0..1"], dir.path())), 2);
    assert_eq!(code(&vemis(&["no-such-command"], dir.path())), 2);
}

#[test]
fn binary_partitions_load_like_csv() {
    let dir = tempfile::tempdir().unwrap();
    for (fmt, out) in [("csv", "c"), ("binary", "b")] {
        let o = vemis(&["extract", "--scenarios", "9..10", "--out", out, "--format", fmt], dir.path());
        assert_eq!(code(&o), 0);
    }
    assert!(dir.path().join("b/scenario_00009.nmre").is_file());
    let a = vemis(&["stats", "c", "--out", "c.json"], dir.path());
    let b = vemis(&["stats", "b", "--out", "b.json"], dir.path());
    assert_eq!(code(&a), 0);
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(json(&dir.path().join("c.json"))["stats"], json(&dir.path().join("b.json"))["stats"]);
}

#[test]
fn train_one_epoch_writes_model_and_log() {
    let dir = with_data();
    let o = vemis(&["train", "data", "--out", "m.nmnn", "--epochs", "1"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("m.nmnn").is_file());
    let log = std::fs::read_to_string(dir.path().join("m.nmnn.log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows, ["class,epoch,train_mape_pct", rows[1]]);
    assert!(rows[1].starts_with("passenger_car/gasoline,1,"));
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let dir = with_data();
    let run = || {
        let o = vemis(&["train", "data", "--out", "m.nmnn", "--epochs", "2", "--seed", "7"], dir.path());
        assert_eq!(code(&o), 0);
        std::fs::read(dir.path().join("m.nmnn")).unwrap()
    };
    let first = run();
    assert_eq!(first, run());
    let o = vemis(&["train", "data", "--out", "m.nmnn", "--epochs", "2", "--seed", "8"], dir.path());
    assert_eq!(code(&o), 0);
    assert_ne!(first, std::fs::read(dir.path().join("m.nmnn")).unwrap());
}

#[test]
fn training_on_nothing_fails() {
    let dir = with_data();
    let o = vemis(&["train", "data", "--out", "m.nmnn", "--class", "transit_bus/diesel"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no records"));
    let bad = vemis(&["train", "data", "--out", "m.nmnn", "--class", "motorcycle/diesel"], dir.path());
    assert_eq!(code(&bad), 2);
}

#[test]
fn config_file_values_and_flag_overrides() {
    let dir = with_data();
    std::fs::write(dir.path().join("run.toml"), "[train]\ndata = [\"data\"]\nout = \"cfg.nmnn\"\nepochs = 3\n").unwrap();
    let o = vemis(&["--config", "run.toml", "train", "--epochs", "1"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.path().join("cfg.nmnn.log.csv")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("passenger_car")).count(), 1);

    std::fs::write(dir.path().join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    assert_eq!(code(&vemis(&["--config", "bad.toml", "train", "data", "--out", "x"], dir.path())), 2);
}

#[test]
fn predict_reports_value_and_gradient() {
    let dir = trained();
    let o = vemis(
        &["predict", "--model", "model.nmnn", "--v", "12", "--a", "-0.5", "--grade", "-2"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let e: f64 = out.lines().next().unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(e > 0.0);
    assert!(out.contains("de_dv") && out.contains("de_da"));
    let missing_class = vemis(
        &["predict", "--model", "model.nmnn", "--v", "1", "--a", "0", "--class", "transit_bus/diesel"],
        dir.path(),
    );
    assert_eq!(code(&missing_class), 1);
}

#[test]
fn oracle_self_validation_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let o = vemis(
        &["validate", "--model", "oracle", "--cycles", "5", "--scenarios", "2", "--duration", "120", "--out", "r.json"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("MAPE 0.000%"));
    let r = json(&dir.path().join("r.json"));
    assert_eq!(r["stats"]["overall"]["n"], 10);
    assert_eq!(r["stats"]["by_strategy"].as_object().unwrap().len(), 5);
    assert_eq!(r["manifest"]["subcommand"], "validate");
}

#[test]
fn gate_sets_the_exit_code() {
    let dir = trained();
    let args = ["validate", "--model", "model.nmnn", "--cycles", "5", "--scenarios", "2", "--duration", "120"];
    let mut open = args.to_vec();
    open.extend(["--gate", "1000"]);
    assert_eq!(code(&vemis(&open, dir.path())), 0);
    let mut shut = args.to_vec();
    shut.extend(["--gate", "0"]);
    let o = vemis(&shut, dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("gate failed"));
}

#[test]
fn validation_needs_a_model() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&vemis(&["validate", "--model", "absent.nmnn"], dir.path())), 1);
    assert_eq!(code(&vemis(&["validate"], dir.path())), 2);
}

#[test]
fn generated_cycles_feed_validation() {
    let dir = tempfile::tempdir().unwrap();
    let o = vemis(&["gen-cycles", "--count", "2", "--duration", "60", "--seed", "3", "--out", "cyc"], dir.path());
    assert_eq!(code(&o), 0);
    let files = std::fs::read_dir(dir.path().join("cyc")).unwrap().count();
    assert_eq!(files, 10);
    let text = std::fs::read_to_string(dir.path().join("cyc/random_walk_000.csv")).unwrap();
    assert!(text.starts_with("# manifest: ") && text.contains("\"seed\":3"));
    let v = vemis(
        &["validate", "--model", "oracle", "--cycles-dir", "cyc", "--scenarios", "3", "--out", "r.json"],
        dir.path(),
    );
    assert_eq!(code(&v), 0, "{}", stderr(&v));
    assert_eq!(json(&dir.path().join("r.json"))["stats"]["overall"]["n"], 30);
}

#[test]
fn grade_sweep_writes_three_deterministic_trajectories() {
    let dir = trained();
    let run = |out: &str| {
        let o = vemis(&["ecodrive", "--model", "model.nmnn", "--mode", "sweep", "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    run("a");
    run("a2");
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["sweep_grade_-5.csv", "sweep_grade_0.csv", "sweep_grade_5.csv"]);
    // bodies match; only the manifest line names the output directory
    let body = |p: &str| {
        std::fs::read_to_string(dir.path().join(p))
            .unwrap()
            .lines()
            .skip(1)
            .collect::<Vec<_>>()
            .join("\n")
    };
    for n in &names {
        assert_eq!(body(&format!("a/{n}")), body(&format!("a2/{n}")));
    }
    let text = std::fs::read_to_string(dir.path().join("a/sweep_grade_0.csv")).unwrap();
    assert!(text.contains("\"seed\":0"));
    assert_eq!(text.lines().nth(1), Some("t_s,x_m,v_mps,a_mps2,e_step_g"));
}

#[test]
fn infeasible_scenario_lists_violations() {
    let dir = trained();
    std::fs::write(
        dir.path().join("far.toml"),
        "[ecodrive]\nmode = \"sweep\"\n[ecodrive.problem]\nhorizon = 5\nq2 = 5.0\nq3 = 500.0\nq4 = 600.0\n",
    )
    .unwrap();
    let o = vemis(&["--config", "far.toml", "ecodrive", "--model", "model.nmnn", "--out", "t"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("TerminalMin"), "{}", stderr(&o));
}

#[test]
fn intersection_run_writes_a_trajectory() {
    let dir = trained();
    let o = vemis(&["ecodrive", "--model", "model.nmnn", "--steps", "45", "--out", "t"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("t/intersection.csv")).unwrap();
    // manifest, header, 46 states
    assert_eq!(text.lines().count(), 48);
}
