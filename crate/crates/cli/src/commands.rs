//! Implementations of the six subcommands.

use std::path::Path;

use fedgen_core::analysis::{
    kopt_search, lemma_oracle, Horizon, KOptMode, KOptParams, KStudyConfig, LemmaDims, LemmaId,
};
use fedgen_core::config::{validate_spec, RunConfig, ScalarOrMatrix};
use fedgen_core::sim::run_monte_carlo;
use fedgen_core::theory::{
    classical_single_round, curve_k1, curve_k1_negated_forcing, curve_kfinite, curve_kinf,
    k1_simple, kfinite_simple, kinf_simple, TheoryCurve,
};
use fedgen_core::{Error, Regime, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::output::{Cell, CsvTable, OutputWriter};
use crate::overlay::build_config;
use crate::{CommonOpts, SweepAxis};

fn resolved(opts: &CommonOpts) -> Result<(RunConfig, fedgen_core::SystemSpec, fedgen_core::RoundPlan)> {
    let config = build_config(opts)?;
    let (spec, plan) = config.resolve()?;
    let report = validate_spec(&spec, &plan);
    if !report.is_valid() {
        if report.violations.len() == 1 && report.violations[0].starts_with("RegimeGap") {
            return Err(Error::RegimeGap { p: spec.p, min_n: plan.min_n(), max_n: plan.max_n() });
        }
        return Err(Error::InvalidConfig(report.violations.join("; ")));
    }
    Ok((config, spec, plan))
}

fn theory_curve(spec: &fedgen_core::SystemSpec, plan: &fedgen_core::RoundPlan) -> Result<TheoryCurve> {
    match spec.regime {
        Regime::K1 => Ok(curve_k1(spec, plan)),
        Regime::KFinite(k) => curve_kfinite(spec, plan, k),
        Regime::KInfinite => curve_kinf(spec, plan),
    }
}

// --- theory -------------------------------------------------------------------

pub fn cmd_theory(opts: &CommonOpts, out_dir: &Path, verbose_coefficients: bool) -> Result<()> {
    let (config, spec, plan) = resolved(opts)?;
    let curve = theory_curve(&spec, &plan)?;
    let mut writer = OutputWriter::new(out_dir)?;
    let mut table = if verbose_coefficients {
        CsvTable::new(vec!["t", "regime", "expected_model_error", "contraction", "forcing"])
    } else {
        CsvTable::new(vec!["t", "regime", "expected_model_error"])
    };
    let label = spec.regime.label();
    for (t, value) in curve.values.iter().enumerate() {
        let mut row = vec![
            Cell::Int(t as i64),
            Cell::Str(label.clone()),
            Cell::Float(*value),
        ];
        if verbose_coefficients {
            if t == 0 {
                row.push(Cell::Empty);
                row.push(Cell::Empty);
            } else {
                row.push(Cell::Float(curve.coeffs[t - 1].0));
                row.push(Cell::Float(curve.coeffs[t - 1].1));
            }
        }
        table.push(row);
    }
    writer.write_csv("theory.csv", &table)?;
    writer.write_manifest("theory", &config)?;
    Ok(())
}

// --- simulate -----------------------------------------------------------------

pub fn cmd_simulate(opts: &CommonOpts, out_dir: &Path) -> Result<()> {
    let (config, spec, plan) = resolved(opts)?;
    if config.trials < 2 {
        return Err(Error::InvalidConfig("simulate requires trials >= 2".into()));
    }
    let curve = run_monte_carlo(&spec, &plan, config.trials)?;
    let mut writer = OutputWriter::new(out_dir)?;
    let mut table = CsvTable::new(vec!["t", "mean_model_error", "stderr", "trials"]);
    for (t, (mean, se)) in curve.mean.iter().zip(&curve.stderr).enumerate() {
        table.push(vec![
            Cell::Int(t as i64),
            Cell::Float(*mean),
            Cell::Float(*se),
            Cell::Int(curve.trials as i64),
        ]);
    }
    writer.write_csv("simulate.csv", &table)?;
    writer.write_manifest("simulate", &config)?;
    Ok(())
}

// --- compare ------------------------------------------------------------------

#[derive(Serialize)]
struct CompareSummary {
    max_abs_z: f64,
    pass: bool,
    rounds: usize,
    trials: usize,
}

pub fn z_score(mc_mean: f64, theory: f64, stderr: f64) -> f64 {
    let diff = mc_mean - theory;
    if stderr == 0.0 {
        if diff.abs() <= 1e-12 {
            0.0
        } else {
            f64::INFINITY * diff.signum()
        }
    } else {
        diff / stderr
    }
}

pub fn cmd_compare(opts: &CommonOpts, out_dir: &Path, override_sim_sigma: Option<f64>) -> Result<()> {
    let (config, spec, plan) = resolved(opts)?;
    if config.trials < 2 {
        return Err(Error::InvalidConfig("compare requires trials >= 2".into()));
    }
    let theory = theory_curve(&spec, &plan)?;
    let (sim_spec, sim_plan) = match override_sim_sigma {
        None => (spec, plan),
        Some(sigma) => {
            let mut sim_config = config.clone();
            sim_config.sigma = ScalarOrMatrix::Scalar(sigma);
            sim_config.resolve()?
        }
    };
    let sim = run_monte_carlo(&sim_spec, &sim_plan, config.trials)?;
    let mut writer = OutputWriter::new(out_dir)?;
    let mut table = CsvTable::new(vec!["t", "theory", "mc_mean", "mc_stderr", "z_score"]);
    let mut max_abs_z: f64 = 0.0;
    for t in 0..theory.values.len() {
        let z = z_score(sim.mean[t], theory.values[t], sim.stderr[t]);
        max_abs_z = max_abs_z.max(z.abs());
        table.push(vec![
            Cell::Int(t as i64),
            Cell::Float(theory.values[t]),
            Cell::Float(sim.mean[t]),
            Cell::Float(sim.stderr[t]),
            Cell::Float(z),
        ]);
    }
    writer.write_csv("compare.csv", &table)?;
    let summary = CompareSummary {
        max_abs_z,
        pass: max_abs_z <= 3.0,
        rounds: config.rounds,
        trials: config.trials,
    };
    writer.write_json("compare_summary.json", &summary)?;
    writer.write_manifest("compare", &config)?;
    Ok(())
}

// --- sweep --------------------------------------------------------------------

fn scalar_usize(field: &ScalarOrMatrix<usize>, name: &str) -> Result<usize> {
    match field {
        ScalarOrMatrix::Scalar(v) => Ok(*v),
        ScalarOrMatrix::Matrix(_) => Err(Error::InvalidConfig(format!(
            "sweep requires a scalar {name}"
        ))),
    }
}

fn scalar_f64(field: &ScalarOrMatrix<f64>, name: &str) -> Result<f64> {
    match field {
        ScalarOrMatrix::Scalar(v) => Ok(*v),
        ScalarOrMatrix::Matrix(_) => Err(Error::InvalidConfig(format!(
            "sweep requires a scalar {name}"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    opts: &CommonOpts,
    out_dir: &Path,
    axis: SweepAxis,
    values: Vec<usize>,
    at_rounds: Option<Vec<usize>>,
    k_max: Option<usize>,
) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one axis value".into()));
    }
    let config = build_config(opts)?;
    let mut writer = OutputWriter::new(out_dir)?;
    let mut table;
    match axis {
        SweepAxis::T => {
            let (_, spec, plan) = resolved(opts)?;
            let curve = theory_curve(&spec, &plan)?;
            table = CsvTable::new(vec!["t", "expected_model_error", "skipped_reason"]);
            for &t in &values {
                if t < curve.values.len() {
                    table.push(vec![
                        Cell::Int(t as i64),
                        Cell::Float(curve.values[t]),
                        Cell::Empty,
                    ]);
                } else {
                    table.push(vec![
                        Cell::Int(t as i64),
                        Cell::Empty,
                        Cell::Str("BeyondHorizon".to_string()),
                    ]);
                }
            }
        }
        SweepAxis::K => {
            table = CsvTable::new(vec!["k", "expected_model_error", "skipped_reason"]);
            for &k in &values {
                let mut row_config = config.clone();
                row_config.regime = "kfinite".to_string();
                row_config.k = Some(k);
                let (spec, plan) = row_config.resolve()?;
                match curve_kfinite(&spec, &plan, k) {
                    Ok(curve) => table.push(vec![
                        Cell::Int(k as i64),
                        Cell::Float(curve.final_value()),
                        Cell::Empty,
                    ]),
                    Err(Error::BatchTooSmall { .. }) => table.push(vec![
                        Cell::Int(k as i64),
                        Cell::Empty,
                        Cell::Str("BatchTooSmall".to_string()),
                    ]),
                    Err(e) => return Err(e),
                }
            }
        }
        SweepAxis::P => {
            table = CsvTable::new(vec!["p", "t", "expected_model_error", "skipped_reason"]);
            let rounds = at_rounds.unwrap_or_else(|| vec![config.rounds]);
            for &p in &values {
                let mut row_config = config.clone();
                row_config.p = p;
                row_config.regime = "kinf".to_string();
                let (spec, plan) = row_config.resolve()?;
                match curve_kinf(&spec, &plan) {
                    Ok(curve) => {
                        for &t in &rounds {
                            table.push(vec![
                                Cell::Int(p as i64),
                                Cell::Int(t as i64),
                                Cell::Float(curve.values[t]),
                                Cell::Empty,
                            ]);
                        }
                    }
                    Err(Error::RegimeGap { .. }) => {
                        for &t in &rounds {
                            table.push(vec![
                                Cell::Int(p as i64),
                                Cell::Int(t as i64),
                                Cell::Empty,
                                Cell::Str("RegimeGap".to_string()),
                            ]);
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        SweepAxis::M => {
            table = CsvTable::new(vec!["m", "k_opt", "expected_model_error", "skipped_reason"]);
            let n = scalar_usize(&config.n, "n")?;
            let alpha = scalar_f64(&config.alpha, "alpha")?;
            let sigma = scalar_f64(&config.sigma, "sigma")?;
            let study = KStudyConfig {
                p: config.p,
                n,
                sigma,
                het_norm: config.het_norm,
                delta0: config.delta0_norm,
                rounds: config.rounds,
                k_max: k_max.unwrap_or_else(|| n.min(512)),
                seed: config.base_seed,
            };
            let report = fedgen_core::analysis::kopt_vs_m_study(&values, alpha, &study)?;
            for point in report.points {
                table.push(vec![
                    Cell::Int(point.m as i64),
                    Cell::Int(point.k_opt as i64),
                    Cell::Float(point.value),
                    Cell::Empty,
                ]);
            }
        }
    }
    writer.write_csv("sweep.csv", &table)?;
    writer.write_manifest("sweep", &config)?;
    Ok(())
}

// --- opt-k --------------------------------------------------------------------

pub fn cmd_opt_k(
    opts: &CommonOpts,
    out_dir: &Path,
    fixed_batch: Option<usize>,
    k_max: Option<usize>,
    limit: bool,
) -> Result<()> {
    let config = build_config(opts)?;
    let alpha = scalar_f64(&config.alpha, "alpha")?;
    let sigma = scalar_f64(&config.sigma, "sigma")?;
    let params = KOptParams {
        p: config.p,
        m: config.m,
        alpha,
        sigma,
        delta0_sq: config.delta0_norm * config.delta0_norm,
    };
    let (mode, default_k_max) = match fixed_batch {
        Some(batch) => (KOptMode::FixedBatch { batch }, 512),
        None => {
            let n = scalar_usize(&config.n, "n")?;
            (KOptMode::FixedTotal { n }, n.min(512))
        }
    };
    let horizon = if limit { Horizon::Limit } else { Horizon::Finite(config.rounds) };
    let report = kopt_search(&params, mode, k_max.unwrap_or(default_k_max), horizon)?;
    let mut writer = OutputWriter::new(out_dir)?;
    let mut table = CsvTable::new(vec!["k", "expected_model_error"]);
    for (k, v) in report.k_grid.iter().zip(&report.values) {
        table.push(vec![Cell::Int(*k as i64), Cell::Float(*v)]);
    }
    writer.write_csv("optk.csv", &table)?;
    writer.write_json("optk_report.json", &report)?;
    writer.write_manifest("optk", &config)?;
    Ok(())
}

// --- verify -------------------------------------------------------------------

#[derive(Serialize)]
struct VerifyCheck {
    name: String,
    pass: bool,
    detail: String,
}

#[derive(Serialize)]
struct VerifyReport {
    suite: String,
    checks: Vec<VerifyCheck>,
    all_pass: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-30)
}

fn balanced_pair(
    m: usize,
    p: usize,
    rounds: usize,
    regime: &str,
    k: Option<usize>,
    n: usize,
    alpha: f64,
    sigma: f64,
    het_norm: f64,
    delta0: f64,
    seed: u64,
) -> Result<(fedgen_core::SystemSpec, fedgen_core::RoundPlan)> {
    let config = RunConfig {
        m,
        p,
        s: p.min(5),
        rounds,
        regime: regime.to_string(),
        k,
        n: ScalarOrMatrix::Scalar(n),
        alpha: ScalarOrMatrix::Scalar(alpha),
        sigma: ScalarOrMatrix::Scalar(sigma),
        het_kind: if het_norm == 0.0 { "zero".into() } else { "stationary_symmetric".into() },
        het_norm,
        delta0_norm: delta0,
        w_star_norm: 1.0,
        base_seed: seed,
        trials: 2,
    };
    config.resolve()
}

/// Specialization identities: the general engines restricted to balanced
/// inputs must match the closed simple-case formulas to 1e-10 relative,
/// and the converged single-fleet, single-round value must match the
/// classical expression to 1e-12 relative.
fn identity_checks(inject_fault: Option<&str>, seed: u64) -> Result<Vec<VerifyCheck>> {
    const TOL: f64 = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let fault_k1 = inject_fault == Some("g-sign");

    // One-step regime, heterogeneity allowed.
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let m = rng.gen_range(2..6);
        let n = rng.gen_range(4..40);
        let p = rng.gen_range(5..200);
        let rounds = rng.gen_range(1..7);
        let alpha = rng.gen_range(0.01..0.12);
        let sigma = rng.gen_range(0.0..1.0);
        let het: f64 = rng.gen_range(0.0..0.8);
        let delta0 = rng.gen_range(0.0..1.5);
        let (spec, plan) = balanced_pair(
            m, p, rounds, "k1", None, n, alpha, sigma, het, delta0,
            seed.wrapping_add(100 + i),
        )?;
        let curve = if fault_k1 {
            curve_k1_negated_forcing(&spec, &plan)
        } else {
            curve_k1(&spec, &plan)
        };
        for t in 0..=rounds {
            let simple =
                k1_simple(p, m, n, alpha, sigma, het * het, spec.initial_error(), t);
            worst = worst.max(rel_err(curve.values[t], simple));
        }
    }
    checks.push(VerifyCheck {
        name: "identity_one_step_general_vs_simple".into(),
        pass: worst <= TOL,
        detail: format!("max relative error {worst:.3e} (tolerance {TOL:.0e})"),
    });

    // Finite multi-step regime, offset-free simple case.
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let m = rng.gen_range(2..6);
        let k = rng.gen_range(1..7);
        let batch = rng.gen_range(2..12);
        let n = k * batch;
        let p = rng.gen_range(5..120);
        let rounds = rng.gen_range(1..6);
        let alpha = rng.gen_range(0.01..0.12);
        let sigma = rng.gen_range(0.0..1.0);
        let delta0 = rng.gen_range(0.0..1.5);
        let (spec, plan) = balanced_pair(
            m, p, rounds, "kfinite", Some(k), n, alpha, sigma, 0.0, delta0,
            seed.wrapping_add(200 + i),
        )?;
        let curve = curve_kfinite(&spec, &plan, k)?;
        for t in 0..=rounds {
            let simple =
                kfinite_simple(p, m, n, k, alpha, sigma, spec.initial_error(), t)?;
            worst = worst.max(rel_err(curve.values[t], simple));
        }
    }
    checks.push(VerifyCheck {
        name: "identity_multi_step_general_vs_simple".into(),
        pass: worst <= TOL,
        detail: format!("max relative error {worst:.3e} (tolerance {TOL:.0e})"),
    });

    // Converged regime, both sides of the dimension band.
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let m = rng.gen_range(2..6);
        let over = i % 2 == 0;
        let n = rng.gen_range(6..30);
        let p = if over { n + 2 + rng.gen_range(1..200) } else { rng.gen_range(2..n - 1) };
        let rounds = rng.gen_range(1..6);
        let sigma = rng.gen_range(0.0..1.0);
        let het: f64 = rng.gen_range(0.0..0.8);
        let delta0 = rng.gen_range(0.0..1.5);
        let (spec, plan) = balanced_pair(
            m, p, rounds, "kinf", None, n, 0.05, sigma, het, delta0,
            seed.wrapping_add(300 + i),
        )?;
        let curve = curve_kinf(&spec, &plan)?;
        for t in 0..=rounds {
            let simple =
                kinf_simple(p, m, n, sigma, het * het, spec.initial_error(), t)?;
            worst = worst.max(rel_err(curve.values[t], simple));
        }
    }
    checks.push(VerifyCheck {
        name: "identity_converged_general_vs_simple".into(),
        pass: worst <= TOL,
        detail: format!("max relative error {worst:.3e} (tolerance {TOL:.0e})"),
    });

    // Classical single-fleet reduction at one round.
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let n = rng.gen_range(4..40);
        let p = n + 2 + rng.gen_range(1..300);
        let sigma = rng.gen_range(0.0..1.2);
        let delta0 = rng.gen_range(0.0..2.0);
        let (spec, plan) = balanced_pair(
            1, p, 1, "kinf", None, n, 0.05, sigma, 0.0, delta0,
            seed.wrapping_add(400 + i),
        )?;
        let curve = curve_kinf(&spec, &plan)?;
        let classical = classical_single_round(p, n, sigma, spec.initial_error())?;
        worst = worst.max(rel_err(curve.values[1], classical));
    }
    checks.push(VerifyCheck {
        name: "identity_classical_single_fleet_reduction".into(),
        pass: worst <= 1e-12,
        detail: format!("max relative error {worst:.3e} (tolerance 1e-12)"),
    });

    Ok(checks)
}

/// The nine analytic expectation targets, each estimated by Monte Carlo and
/// held to the three-standard-error rule.
fn lemma_checks(trials: usize, seed: u64) -> Result<Vec<VerifyCheck>> {
    let mut checks = Vec::new();
    for lemma in LemmaId::ALL {
        let dims = match lemma {
            LemmaId::MeanProjection | LemmaId::ProjectionEnergy | LemmaId::ComplementEnergy => {
                LemmaDims { p: 50, n: 10, n2: None }
            }
            LemmaId::InverseGramDiagonal | LemmaId::InterpolatorNoise => {
                LemmaDims { p: 40, n: 8, n2: None }
            }
            LemmaId::GramDiagonal => LemmaDims { p: 30, n: 6, n2: None },
            LemmaId::GramFourthMoment => LemmaDims { p: 6, n: 4, n2: None },
            LemmaId::CrossProjection => LemmaDims { p: 40, n: 8, n2: Some(12) },
            LemmaId::TestErrorDecomposition => LemmaDims { p: 12, n: 1, n2: None },
        };
        let res = lemma_oracle(lemma, dims, trials, seed)?;
        checks.push(VerifyCheck {
            name: format!("lemma_{:?}", lemma).to_lowercase(),
            pass: res.pass,
            detail: format!(
                "estimate {:.6e}, target {:.6e}, stderr {:.3e}, trials {}",
                res.estimate, res.target, res.stderr, res.trials
            ),
        });
    }
    Ok(checks)
}

/// Returns true when every check passed.
pub fn cmd_verify(
    out_dir: &Path,
    suite: &str,
    trials: usize,
    inject_fault: Option<&str>,
    seed: u64,
) -> Result<bool> {
    let mut checks = Vec::new();
    match suite {
        "identities" => checks.extend(identity_checks(inject_fault, seed)?),
        "lemmas" => checks.extend(lemma_checks(trials, seed)?),
        "all" => {
            checks.extend(identity_checks(inject_fault, seed)?);
            checks.extend(lemma_checks(trials, seed)?);
        }
        other => return Err(Error::InvalidConfig(format!("unknown suite {other:?}"))),
    }
    let all_pass = checks.iter().all(|c| c.pass);
    for check in &checks {
        println!("{} {}: {}", if check.pass { "PASS" } else { "FAIL" }, check.name, check.detail);
    }
    let report = VerifyReport { suite: suite.to_string(), checks, all_pass };
    let mut writer = OutputWriter::new(out_dir)?;
    writer.write_json("verify_report.json", &report)?;
    Ok(all_pass)
}

