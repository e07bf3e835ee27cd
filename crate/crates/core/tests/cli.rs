use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use lqgame::trace::{read_csv, CSV_HEADER};

fn lqgame(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lqgame"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

fn json_stdout(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn oracle_reports_margins() {
    let dir = tempfile::tempdir().unwrap();
    let one = lqgame(&["oracle", "--game", "case1", "--json"], dir.path());
    assert!(one.status.success());
    let v = json_stdout(&one);
    let ql = v["assumptions"]["ql_margin"].as_f64().unwrap();
    assert!((ql - 0.8739).abs() <= 1e-3, "{ql}");

    let two = lqgame(&["oracle", "--game", "case2", "--json"], dir.path());
    let ql = json_stdout(&two)["assumptions"]["ql_margin"].as_f64().unwrap();
    assert!((ql + 0.0011).abs() <= 5e-4, "{ql}");

    let text = lqgame(&["oracle", "--game", "case1"], dir.path());
    let text = String::from_utf8(text.stdout).unwrap();
    let line = text.lines().find(|l| l.starts_with("ql_margin = ")).unwrap();
    let printed: f64 = line["ql_margin = ".len()..]
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!((printed - 0.8739).abs() <= 1e-3, "{line}");
}

#[test]
fn oracle_on_static_scalar_game_returns_q() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("g.json"),
        r#"{"d": 1, "m1": 1, "m2": 1, "A": [0.0], "B": [1.0], "C": [0.5], "Q": [2.5],
            "Ru": [1.0], "Rv": [3.0], "Sigma0": [1.0]}"#,
    )
    .unwrap();
    let out = lqgame(&["oracle", "--game", "g.json", "--json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let p = json_stdout(&out)["solution"]["p_star"][0][0].as_f64().unwrap();
    assert!((p - 2.5).abs() < 1e-12, "{p}");
}

#[test]
fn run_writes_artifacts_and_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.json",
        r#"{"game": "case1", "seed": 5, "solvers": [
            {"kind": "nested", "variant": "gauss_newton_nested_gradient"},
            {"kind": "modelfree", "variant": "nested_gradient", "m": 10, "steps": 2,
             "inner_m": 5, "inner_steps": 1}
        ]}"#,
    );
    let first = lqgame(&["run", "--config", &cfg, "--out", "a"], dir.path());
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let second = lqgame(&["run", "--config", &cfg, "--out", "b"], dir.path());
    assert!(second.status.success());

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for name in ["nested_gauss_newton_ng", "modelfree_ng"] {
        for ext in [".csv", ".json", "_cost.svg", "_mapping.svg", "_lambda.svg"] {
            let file = format!("{name}{ext}");
            let left = fs::read(a.join(&file)).unwrap_or_else(|_| panic!("missing {file}"));
            assert_eq!(left, fs::read(b.join(&file)).unwrap(), "{file} differs");
        }
        let text = fs::read_to_string(a.join(format!("{name}.csv"))).unwrap();
        assert_eq!(text.lines().next(), Some(CSV_HEADER));
        let rows = read_csv(text.as_bytes()).unwrap();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.rho < 1.0));
    }
    assert_eq!(
        fs::read(a.join("summary.json")).unwrap(),
        fs::read(b.join("summary.json")).unwrap()
    );

    let summary: Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    let gn = &summary["solvers"][0];
    assert_eq!(gn["name"], "nested_gauss_newton_ng");
    assert!(gn["summary"]["gap_to_oracle"].as_f64().unwrap() <= 1e-5);

    let reseeded = lqgame(&["run", "--config", &cfg, "--out", "c", "--seed", "6"], dir.path());
    assert!(reseeded.status.code().is_some());
    assert_ne!(
        fs::read(a.join("modelfree_ng.csv")).unwrap(),
        fs::read(dir.path().join("c").join("modelfree_ng.csv")).unwrap()
    );
}

#[test]
fn case2_descent_ascent_converges_without_monotone_cost() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.json",
        r#"{"game": "case2", "solvers": [
            {"kind": "gda", "flavor": "natural_policy_gradient"},
            {"kind": "gda", "flavor": "gauss_newton"}
        ]}"#,
    );
    let out = lqgame(&["compare", "--config", &cfg, "--out", "o", "--json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json_stdout(&out);
    for s in v["solvers"].as_array().unwrap() {
        assert_eq!(s["met_tolerance"], true, "{}", s["name"]);
        assert!(s["l_error"].as_f64().unwrap() <= 1e-3);
    }
    assert_eq!(v["solvers"][1]["summary"]["monotone_cost"], false);
    assert!(v["assumptions"]["ql_margin"].as_f64().unwrap() < 0.0);

    let table = lqgame(&["compare", "--config", &cfg, "--out", "o"], dir.path());
    let text = String::from_utf8(table.stdout).unwrap();
    assert!(text.contains("gda_natural_pg") && text.contains("gda_gauss_newton"));
}

#[test]
fn missed_tolerance_exits_one_and_names_the_solver() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.json",
        r#"{"game": "case1", "solvers": [
            {"kind": "nested", "variant": "nested_gradient", "max_iter": 3},
            {"kind": "nested", "variant": "gauss_newton_nested_gradient"}
        ]}"#,
    );
    let out = lqgame(&["run", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("nested_ng"));
    assert!(!stderr.contains("nested_gauss_newton_ng"));
    // The partial trace is still written.
    let rows = read_csv(fs::File::open(dir.path().join("o/nested_ng.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
}

#[test]
fn bad_configs_fail_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write_config(dir.path(), "empty.json", r#"{"game": "case1", "solvers": []}"#);
    let out = lqgame(&["run", "--config", &empty, "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("empty"));
    assert!(!dir.path().join("o").exists());

    let missing = write_config(
        dir.path(),
        "missing.json",
        r#"{"game": {"path": "nope.json"}, "solvers": [{"kind": "nested", "variant": "nested_gradient"}]}"#,
    );
    assert_eq!(
        lqgame(&["run", "--config", &missing], dir.path()).status.code(),
        Some(2)
    );

    let unknown = write_config(
        dir.path(),
        "unknown.json",
        r#"{"solvers": [{"kind": "nested", "variant": "nested_gradient"}], "sed": 1}"#,
    );
    assert_eq!(
        lqgame(&["run", "--config", &unknown], dir.path()).status.code(),
        Some(2)
    );
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = lqgame::experiments::ExperimentConfig::load(&path).unwrap();
        cfg.validate().unwrap();
        cfg.game.load(&dir).unwrap();
        seen += 1;
    }
    assert!(seen >= 3);
}
