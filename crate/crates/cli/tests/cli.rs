//! End-to-end tests of the command-line surface: CSV shapes, exit codes,
//! manifests and reproducibility.

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedgen"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn theory_preset_curve_has_one_row_per_round() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "theory", "--preset", "fig2", "--alpha", "0.05", "--delta0", "1.0", "--out",
        dir.path().to_str().unwrap(),
    ]);
    let csv = read(&dir.path().join("theory.csv"));
    assert!(csv.starts_with("t,regime,expected_model_error\n"));
    assert_eq!(csv.lines().count(), 12); // header + t = 0..=10
    assert!(!csv.contains('\r'));
    let rows = csv_rows(&csv);
    assert_eq!(rows[0][0], "0");
    let initial: f64 = rows[0][2].parse().unwrap();
    assert!((initial - 1.0).abs() < 1e-12);
}

#[test]
fn theory_zero_rounds_emits_initial_error_only() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "theory", "--m", "2", "--p", "10", "--n", "4", "--t", "0", "--regime", "k1", "--alpha",
        "0.1", "--sigma", "0.3", "--delta0", "0.5", "--out", dir.path().to_str().unwrap(),
    ]);
    let csv = read(&dir.path().join("theory.csv"));
    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 1);
    let initial: f64 = rows[0][2].parse().unwrap();
    assert!((initial - 0.25).abs() < 1e-12);
}

#[test]
fn theory_verbose_coefficients_adds_columns() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "theory", "--m", "2", "--p", "10", "--n", "4", "--t", "2", "--regime", "k1", "--alpha",
        "0.1", "--sigma", "0.3", "--delta0", "0.5", "--verbose-coefficients", "--out",
        dir.path().to_str().unwrap(),
    ]);
    let csv = read(&dir.path().join("theory.csv"));
    assert!(csv.starts_with("t,regime,expected_model_error,contraction,forcing\n"));
    let rows = csv_rows(&csv);
    assert_eq!(rows[0][3], ""); // no coefficients ahead of the first round
    assert!(!rows[1][3].is_empty());
}

#[test]
fn converged_regime_inside_band_is_rejected() {
    let out = bin()
        .args(["theory", "--regime", "kinf", "--m", "3", "--p", "24", "--n", "25", "--t", "4",
               "--sigma", "0.7"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("RegimeGap"), "stderr: {err}");
    serde_json::from_str::<serde_json::Value>(err.trim()).expect("stderr is JSON");
}

#[test]
fn simulate_is_reproducible_and_guards_trials() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "simulate", "--m", "2", "--p", "12", "--n", "5", "--t", "3", "--regime", "k1", "--alpha",
        "0.05", "--sigma", "0.4", "--delta0", "1.0", "--trials", "16", "--seed", "5",
    ];
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_ok(&[&args[..], &["--out", out_a.to_str().unwrap()]].concat());
    run_ok(&[&args[..], &["--out", out_b.to_str().unwrap()]].concat());
    assert_eq!(
        std::fs::read(out_a.join("simulate.csv")).unwrap(),
        std::fs::read(out_b.join("simulate.csv")).unwrap()
    );

    let bad = bin()
        .args(["simulate", "--m", "2", "--p", "12", "--n", "5", "--t", "3", "--regime", "k1",
               "--alpha", "0.05", "--sigma", "0.4", "--trials", "1"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn simulate_fig2_plotting_scale_fits_the_time_budget() {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    run_ok(&[
        "simulate", "--preset", "fig2", "--alpha", "0.05", "--delta0", "1.0", "--trials", "20",
        "--seed", "1", "--out", dir.path().to_str().unwrap(),
    ]);
    assert!(started.elapsed().as_secs() < 60);
}

#[test]
fn compare_noiseless_homogeneous_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "compare", "--m", "3", "--p", "16", "--n", "6", "--t", "3", "--regime", "k1", "--alpha",
        "0.05", "--sigma", "0", "--het-norm", "0", "--delta0", "0", "--trials", "8", "--out",
        dir.path().to_str().unwrap(),
    ]);
    let rows = csv_rows(&read(&dir.path().join("compare.csv")));
    for row in rows {
        assert_eq!(row[4], "0.0000000000000000e0", "z must be exactly zero: {row:?}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("compare_summary.json"))).unwrap();
    assert_eq!(summary["pass"], true);
    assert_eq!(summary["max_abs_z"], 0.0);
}

#[test]
fn compare_preset_passes_the_consistency_gate() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "compare", "--preset", "fig2", "--alpha", "0.05", "--delta0", "1.0", "--trials", "200",
        "--seed", "17", "--out", dir.path().to_str().unwrap(),
    ]);
    let summary: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("compare_summary.json"))).unwrap();
    assert_eq!(summary["pass"], true, "summary: {summary}");
}

#[test]
fn compare_mismatched_noise_fails_the_consistency_gate() {
    // Start at the target with zero offsets so the curve is purely
    // noise-driven; doubling the simulation's noise is then unmistakable.
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "compare", "--m", "3", "--p", "20", "--n", "8", "--t", "4", "--regime", "k1", "--alpha",
        "0.05", "--sigma", "0.3", "--het-norm", "0", "--delta0", "0", "--trials", "400",
        "--seed", "9", "--override-sim-sigma", "0.6", "--out", dir.path().to_str().unwrap(),
    ]);
    let summary: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("compare_summary.json"))).unwrap();
    assert_eq!(summary["pass"], false);
}

#[test]
fn sweep_over_local_steps_has_interior_argmin() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "sweep", "--axis", "k", "--range", "1:60", "--preset", "fig3", "--alpha", "0.0276",
        "--out", dir.path().to_str().unwrap(),
    ]);
    let rows = csv_rows(&read(&dir.path().join("sweep.csv")));
    assert_eq!(rows.len(), 60);
    let values: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    let argmin = (0..values.len()).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    assert!(argmin > 0 && argmin < values.len() - 1, "argmin at edge: {argmin}");
}

#[test]
fn sweep_over_dimension_marks_the_band() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "sweep", "--axis", "p", "--values", "10,24,25,26,50", "--preset", "fig4", "--at-rounds",
        "1,40", "--out", dir.path().to_str().unwrap(),
    ]);
    let rows = csv_rows(&read(&dir.path().join("sweep.csv")));
    assert_eq!(rows.len(), 10);
    for row in rows {
        let p: usize = row[0].parse().unwrap();
        if (24..=26).contains(&p) {
            assert_eq!(row[3], "RegimeGap");
            assert_eq!(row[2], "");
        } else {
            assert_eq!(row[3], "");
            assert!(!row[2].is_empty());
        }
    }
}

#[test]
fn sweep_over_fleet_size_reports_non_decreasing_kopt() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "sweep", "--axis", "m", "--values", "3,10,25", "--preset", "fig3", "--alpha", "0.0276",
        "--k-max", "60", "--out", dir.path().to_str().unwrap(),
    ]);
    let rows = csv_rows(&read(&dir.path().join("sweep.csv")));
    let kopts: Vec<usize> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(kopts.len(), 3);
    assert!(kopts.windows(2).all(|w| w[0] <= w[1]), "K_opt not monotone: {kopts:?}");
}

#[test]
fn opt_k_limit_mode_reports_bracket_only_when_noiseless() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "opt-k", "--m", "3", "--p", "200", "--n", "144", "--t", "5", "--regime", "kfinite",
        "--k", "1", "--alpha", "0.05", "--sigma", "0", "--delta0", "1.0", "--out",
        dir.path().to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("optk_report.json"))).unwrap();
    assert!(report["bracket"].is_array());
    assert_eq!(report["f_argmin"], 20);
    assert_eq!(report["bracket_contains"], false);

    let dir2 = tempfile::tempdir().unwrap();
    run_ok(&[
        "opt-k", "--m", "3", "--p", "200", "--n", "144", "--t", "5", "--regime", "kfinite",
        "--k", "1", "--alpha", "0.05", "--sigma", "0.7", "--fixed-batch", "50", "--k-max", "64",
        "--limit", "--delta0", "1.0", "--out", dir2.path().to_str().unwrap(),
    ]);
    let report2: serde_json::Value =
        serde_json::from_str(&read(&dir2.path().join("optk_report.json"))).unwrap();
    assert_eq!(report2["k_opt"], 1);
    assert_eq!(report2["finite_opt"], true);
    assert!(report2["bracket"].is_null());
}

#[test]
fn verify_all_passes_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(&[
        "verify", "--suite", "all", "--trials", "3000", "--out", dir.path().to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("verify_report.json"))).unwrap();
    assert_eq!(report["all_pass"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 13);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 13);
}

#[test]
fn manifest_rerun_reproduces_outputs_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    run_ok(&[
        "simulate", "--m", "3", "--p", "18", "--n", "7", "--t", "3", "--regime", "k1", "--alpha",
        "0.06", "--sigma", "0.5", "--het-norm", "0.4", "--delta0", "1.0", "--trials", "24",
        "--seed", "21", "--out", first.to_str().unwrap(),
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&read(&first.join("simulate_manifest.json"))).unwrap();
    // The resolved config embedded in the manifest is a complete, valid
    // config file; rerunning from it must reproduce the CSV bytes.
    let config_path = dir.path().join("from_manifest.json");
    std::fs::write(
        &config_path,
        serde_json::to_string(&manifest["resolved_config"]).unwrap(),
    )
    .unwrap();
    let second = dir.path().join("second");
    run_ok(&[
        "simulate", "--config", config_path.to_str().unwrap(), "--out", second.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(first.join("simulate.csv")).unwrap(),
        std::fs::read(second.join("simulate.csv")).unwrap()
    );
}

#[test]
fn fingerprint_is_stable_under_config_key_reordering() {
    let dir = tempfile::tempdir().unwrap();
    let a = r#"{"m":2,"p":10,"T":2,"regime":"k1","n":4,"alpha":0.05,"sigma":0.3,"base_seed":3}"#;
    let b = r#"{"sigma":0.3,"alpha":0.05,"n":4,"regime":"k1","T":2,"p":10,"m":2,"base_seed":3}"#;
    let mut fingerprints = Vec::new();
    for (name, text) in [("a", a), ("b", b)] {
        let config_path = dir.path().join(format!("{name}.json"));
        std::fs::write(&config_path, text).unwrap();
        let out = dir.path().join(name);
        run_ok(&[
            "theory", "--config", config_path.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ]);
        let manifest: serde_json::Value =
            serde_json::from_str(&read(&out.join("theory_manifest.json"))).unwrap();
        fingerprints.push(manifest["fingerprint"].as_str().unwrap().to_string());
    }
    assert_eq!(fingerprints[0], fingerprints[1]);
}

#[test]
fn unknown_preset_and_missing_alpha_are_invalid_input() {
    let out = bin().args(["theory", "--preset", "fig9"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin()
        .args(["theory", "--preset", "fig2", "--delta0", "1.0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("alpha"), "stderr: {err}");
}
