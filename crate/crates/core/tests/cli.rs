//! End-to-end command-line tests: exit codes, diagnostics, report files.

use std::path::Path;
use std::process::{Command, Output};

fn nsdp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsdp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

const QUADRATIC_MODEL: &str = r#"{
  "atoms": {
    "track": {"kind": "quadratic", "matrix": [[2.0, -2.0], [-2.0, 2.0]], "linear": [0.0, 0.0], "offset": 0.0}
  },
  "stages": [
    {"grid": [[-1.0, -0.5, 0.0, 0.5, 1.0]],
     "cost": {"kind": "atom", "name": "track"},
     "feasibility": {"kind": "box", "lower": [-1.0], "upper": [1.0]}},
    {"grid": [[-1.0, -0.5, 0.0, 0.5, 1.0]],
     "cost": {"kind": "atom", "name": "track"},
     "feasibility": {"kind": "box", "lower": [-1.0], "upper": [1.0]}}
  ],
  "terminal_grid": [[-1.0, -0.5, 0.0, 0.5, 1.0]],
  "bounds": {"mode": "finite"}
}"#;

const TWO_ATOM_MODEL: &str = r#"{
  "atoms": {
    "track": {"kind": "quadratic", "matrix": [[2.0, -2.0], [-2.0, 2.0]], "linear": [0.0, 0.0], "offset": 0.0},
    "track2": {"kind": "quadratic", "matrix": [[8.0, -4.0], [-4.0, 2.0]], "linear": [0.0, 0.0], "offset": 0.0}
  },
  "filtration": {
    "probabilities": [0.5, 0.5],
    "partitions": [[[0, 1]], [[0], [1]]]
  },
  "stages": [
    {"grid": [[-1.0, -0.5, 0.0, 0.5, 1.0]],
     "costs": [{"kind": "atom", "name": "track"}],
     "feasibilities": [{"kind": "box", "lower": [-2.0], "upper": [2.0]}],
     "lipschitz": [20.0, 20.0]},
    {"grid": [[-1.0, -0.5, 0.0, 0.5, 1.0]],
     "costs": [{"kind": "atom", "name": "track"}, {"kind": "atom", "name": "track2"}],
     "feasibilities": [{"kind": "box", "lower": [-2.0], "upper": [2.0]},
                        {"kind": "box", "lower": [-2.0], "upper": [2.0]}],
     "lipschitz": [20.0, 30.0]}
  ],
  "terminal_grid": [[-1.0, -0.5, 0.0, 0.5, 1.0]],
  "bounds": {"mode": "finite", "alpha": [100.0, 100.0]},
  "p": 2
}"#;

#[test]
fn validate_passes_good_models_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "model.json", QUADRATIC_MODEL);
    let out = nsdp(&["validate", &model], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn validate_names_refinement_violations_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    // Fine partition first, coarse second.
    let text = TWO_ATOM_MODEL.replace(
        r#""partitions": [[[0, 1]], [[0], [1]]]"#,
        r#""partitions": [[[0], [1]], [[0, 1]]]"#,
    );
    let model = write(dir.path(), "model.json", &text);
    let out = nsdp(&["validate", &model], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("refinement violated at stage 1"), "{stdout}");
}

#[test]
fn validate_flags_divergent_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let text = QUADRATIC_MODEL.replace(
        r#""bounds": {"mode": "finite"}"#,
        r#""bounds": {"mode": "truncated", "tail": {"kind": "geometric", "base": 1.0, "ratio": 1.0}, "epsilon": 1e-6}"#,
    );
    let model = write(dir.path(), "model.json", &text);
    let out = nsdp(&["validate", &model], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("divergent"), "{stdout}");
}

#[test]
fn parse_errors_carry_location_and_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "model.json", "{ not json");
    let out = nsdp(&["validate", &model], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line"), "{stderr}");
}

#[test]
fn solve_writes_the_table_and_records_the_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "model.json", QUADRATIC_MODEL);
    let out = nsdp(&["solve", &model, "--out", "table.tsv"], dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("T_eff = 1"), "{stdout}");
    let table = std::fs::read_to_string(dir.path().join("table.tsv")).unwrap();
    assert!(table.starts_with("stage\tcoords\tvalue\tpolicy"));
    // Quadratic tracking costs solve to zero on the whole grid.
    for line in table.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[2], "0");
    }
}

#[test]
fn solve_on_a_single_atom_stochastic_model_matches_its_deterministic_twin() {
    let dir = tempfile::tempdir().unwrap();
    let det = write(dir.path(), "det.json", QUADRATIC_MODEL);
    // Same two quadratic stages as a one-atom tree.
    let sto_text = r#"{
      "atoms": {
        "track": {"kind": "quadratic", "matrix": [[2.0, -2.0], [-2.0, 2.0]], "linear": [0.0, 0.0], "offset": 0.0}
      },
      "filtration": {"probabilities": [1.0], "partitions": [[[0]], [[0]]]},
      "stages": [
        {"grid": [[-1.0, -0.5, 0.0, 0.5, 1.0]],
         "costs": [{"kind": "atom", "name": "track"}],
         "feasibilities": [{"kind": "box", "lower": [-1.0], "upper": [1.0]}]},
        {"grid": [[-1.0, -0.5, 0.0, 0.5, 1.0]],
         "costs": [{"kind": "atom", "name": "track"}],
         "feasibilities": [{"kind": "box", "lower": [-1.0], "upper": [1.0]}]}
      ],
      "terminal_grid": [[-1.0, -0.5, 0.0, 0.5, 1.0]],
      "bounds": {"mode": "finite", "alpha": [10.0]}
    }"#;
    let sto = write(dir.path(), "sto.json", sto_text);
    assert!(nsdp(&["solve", &det, "--out", "det.tsv"], dir.path()).status.success());
    assert!(nsdp(&["solve", &sto, "--out", "sto.tsv"], dir.path()).status.success());
    let det_table = std::fs::read_to_string(dir.path().join("det.tsv")).unwrap();
    let sto_table = std::fs::read_to_string(dir.path().join("sto.tsv")).unwrap();
    assert_eq!(det_table, sto_table);
}

#[test]
fn audit_accepts_the_optimum_and_rejects_perturbations() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "model.json", QUADRATIC_MODEL);
    let optimum = write(dir.path(), "good.json", r#"{"states": [[0.5], [0.5], [0.5]]}"#);
    let perturbed = write(dir.path(), "bad.json", r#"{"states": [[0.5], [0.8], [0.8]]}"#);

    let out = nsdp(&["audit", &model, &optimum], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));

    let out = nsdp(&["audit", &model, &perturbed], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("non-member"), "{stdout}");
    assert!(stdout.contains("separator"), "{stdout}");
}

#[test]
fn audit_rejects_inadmissible_programs_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "model.json", QUADRATIC_MODEL);
    let program = write(dir.path(), "prog.json", r#"{"states": [[0.5], [3.0], [0.5]]}"#);
    let out = nsdp(&["audit", &model, &program], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stage 0"), "{stderr}");
}

#[test]
fn audit_rejects_non_adapted_processes_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "model.json", TWO_ATOM_MODEL);
    // Stage-1 values split across the coarse stage-0 information cell.
    let program = write(
        dir.path(),
        "prog.json",
        r#"{"stages": [[[0.0], [0.0]], [[0.1], [0.2]], [[0.1], [0.2]]]}"#,
    );
    let out = nsdp(&["audit", &model, &program], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("not adapted"), "{stderr}");
}

#[test]
fn audit_runs_stochastic_euler_checks_per_atom() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "model.json", TWO_ATOM_MODEL);
    let optimum = write(
        dir.path(),
        "good.json",
        r#"{"stages": [[[0.0], [0.0]], [[0.0], [0.0]], [[0.0], [0.0]]]}"#,
    );
    let out = nsdp(&["audit", &model, &optimum, "--checks", "euler,bellman"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("member on every atom"), "{stdout}");

    // Perturbed adapted action: the fine-cell atom separates.
    let perturbed = write(
        dir.path(),
        "bad.json",
        r#"{"stages": [[[0.0], [0.0]], [[0.4], [0.4]], [[0.4], [0.8]]]}"#,
    );
    let out = nsdp(&["audit", &model, &perturbed, "--checks", "euler"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("non-member on atoms"), "{stdout}");
}

#[test]
fn unknown_checks_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "model.json", QUADRATIC_MODEL);
    let program = write(dir.path(), "prog.json", r#"{"states": [[0.5], [0.5], [0.5]]}"#);
    let out = nsdp(&["audit", &model, &program, "--checks", "belman"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solve_records_the_truncation_horizon_from_epsilon() {
    // Geometric bounds 0.5^t with epsilon 1e-6 truncate at T_eff = 20, so the
    // model defines 21 stages (costs shrink with the same ratio).
    let dir = tempfile::tempdir().unwrap();
    let mut stages = String::new();
    for t in 0..21 {
        if t > 0 {
            stages.push(',');
        }
        stages.push_str(&format!(
            r#"{{"grid": [[-1.0, 0.0, 1.0]],
                "cost": {{"kind": "scale", "factor": {}, "child": {{"kind": "atom", "name": "track"}}}},
                "feasibility": {{"kind": "box", "lower": [-1.0], "upper": [1.0]}}}}"#,
            0.5f64.powi(t)
        ));
    }
    let text = format!(
        r#"{{
  "atoms": {{
    "track": {{"kind": "quadratic", "matrix": [[2.0, -2.0], [-2.0, 2.0]], "linear": [0.0, 0.0], "offset": 0.0}}
  }},
  "stages": [{stages}],
  "terminal_grid": [[-1.0, 0.0, 1.0]],
  "bounds": {{"mode": "truncated", "tail": {{"kind": "geometric", "base": 1.0, "ratio": 0.5}}, "epsilon": 1e-4}}
}}"#
    );
    let model = write(dir.path(), "model.json", &text);
    let out = nsdp(
        &["solve", &model, "--out", "table.tsv", "--epsilon", "1e-6"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("T_eff = 20"), "{stdout}");
}

#[test]
fn reports_are_byte_identical_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "model.json", QUADRATIC_MODEL);
    let program = write(dir.path(), "prog.json", r#"{"states": [[0.5], [0.5], [0.5]]}"#);
    for args in [
        vec!["audit", &model, &program, "--seed", "42", "--report", "a.json"],
        vec!["audit", &model, &program, "--seed", "42", "--report", "b.json"],
    ] {
        assert!(nsdp(&args, dir.path()).status.success());
    }
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    let b = std::fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty());
}
