//! Closed-form expected squared model error of the averaged iterate, for all
//! three local-update regimes, in both the general (heterogeneous,
//! non-stationary) and the balanced simple-case forms.
//!
//! Each engine maintains two coupled recursions per round: the scalar
//! expected squared error `v_t = a_t v_{t-1} + b_t`, and the p-dimensional
//! mean deviation `g_t` feeding the cross terms of the next round's forcing
//! coefficient. Carrying the full vector is what makes heterogeneous and
//! non-stationary plans exact; scalar shortcuts are valid only in the
//! balanced case.

use nalgebra::DVector;

use crate::config::{Regime, RoundPlan, SystemSpec};
use crate::error::{Error, Result};

/// A linear recurrence v_i = a_i v_{i-1} + b_i held as explicit sequences.
#[derive(Debug, Clone)]
pub struct RecurrenceSeq {
    pub initial: f64,
    pub coeffs: Vec<f64>,
    pub offsets: Vec<f64>,
}

/// Closed-form value after all steps:
/// prod(a) * initial + sum_i b_i * prod_{j > i} a_j.
pub fn eval_recurrence(seq: &RecurrenceSeq) -> f64 {
    assert_eq!(seq.coeffs.len(), seq.offsets.len());
    let l = seq.coeffs.len();
    let mut suffix = vec![1.0; l + 1];
    for i in (0..l).rev() {
        suffix[i] = suffix[i + 1] * seq.coeffs[i];
    }
    let mut value = suffix[0] * seq.initial;
    for i in 0..l {
        value += seq.offsets[i] * suffix[i + 1];
    }
    value
}

/// 1 + h + ... + h^{t-1}, with the h = 1 degeneracy replaced by the exact
/// term count.
pub fn geometric_sum(h: f64, t: usize) -> f64 {
    if h == 1.0 {
        t as f64
    } else {
        (1.0 - h.powi(t as i32)) / (1.0 - h)
    }
}

/// Exact error curve plus the auxiliary state that produced it.
#[derive(Debug, Clone)]
pub struct TheoryCurve {
    pub regime: Regime,
    /// Expected squared model error, indexed t = 0..=T.
    pub values: Vec<f64>,
    /// Expected deviation vector per round (entry 0 is the initial
    /// deviation).
    pub mean_dev: Vec<DVector<f64>>,
    /// Per-round (contraction, forcing) coefficient pair.
    pub coeffs: Vec<(f64, f64)>,
}

impl TheoryCurve {
    pub fn final_value(&self) -> f64 {
        *self.values.last().unwrap()
    }
}

fn initial_deviation(spec: &SystemSpec) -> DVector<f64> {
    &spec.w_star - &spec.w0
}

// --- one-step regime ---------------------------------------------------------

/// Exact curve for one gradient step per round. Valid for any plan; no
/// dimension guard is needed.
pub fn curve_k1(spec: &SystemSpec, plan: &RoundPlan) -> TheoryCurve {
    curve_k1_impl(spec, plan, 1.0)
}

/// Negative-control variant with the forcing coefficient's sign flipped.
/// Only meaningful to verification harnesses.
#[doc(hidden)]
pub fn curve_k1_negated_forcing(spec: &SystemSpec, plan: &RoundPlan) -> TheoryCurve {
    curve_k1_impl(spec, plan, -1.0)
}

fn curve_k1_impl(spec: &SystemSpec, plan: &RoundPlan, forcing_sign: f64) -> TheoryCurve {
    let p = spec.p as f64;
    let delta0 = initial_deviation(spec);
    let mut values = vec![delta0.norm_squared()];
    let mut mean_dev = vec![delta0];
    let mut coeffs = Vec::with_capacity(spec.rounds);
    for t in 0..spec.rounds {
        let g_prev = mean_dev.last().unwrap().clone();
        let total = plan.total_n(t) as f64;
        let mut sum_keep = 0.0; // sum_i n_i (1 - alpha_i)
        let mut sum_step_sq = 0.0; // sum_i alpha_i^2 n_i (p + 1)
        let mut sum_noise = 0.0; // sum_i alpha_i^2 p n_i sigma_i^2
        let mut sum_offset_vec = DVector::zeros(spec.p); // sum_i alpha_i n_i gamma_i
        let mut sum_offset_sq = 0.0; // sum_i alpha_i^2 n_i (p+1) ||gamma_i||^2
        let mut sum_cross_keep = 0.0; // sum_i n_i alpha_i gamma_i . g_{t-1}
        let mut sum_cross_step = 0.0; // sum_i alpha_i^2 n_i (p+1) gamma_i . g_{t-1}
        for i in 0..spec.m {
            let n = plan.n(i, t) as f64;
            let a = plan.alpha(i, t);
            let s = plan.sigma(i, t);
            let gamma = plan.gamma(i, t);
            sum_keep += n * (1.0 - a);
            sum_step_sq += a * a * n * (p + 1.0);
            sum_noise += a * a * p * n * s * s;
            sum_offset_vec += gamma * (a * n);
            sum_offset_sq += a * a * n * (p + 1.0) * gamma.norm_squared();
            let dot = gamma.dot(&g_prev);
            sum_cross_keep += n * a * dot;
            sum_cross_step += a * a * n * (p + 1.0) * dot;
        }
        let contraction = (sum_keep * sum_keep + sum_step_sq) / (total * total);
        let forcing = forcing_sign
            * (sum_noise
                + sum_offset_vec.norm_squared()
                + sum_offset_sq
                + 2.0 * sum_keep * sum_cross_keep
                - 2.0 * sum_cross_step)
            / (total * total);
        values.push(contraction * values[t] + forcing);
        coeffs.push((contraction, forcing));
        mean_dev.push(g_prev * (sum_keep / total) + sum_offset_vec / total);
    }
    TheoryCurve { regime: Regime::K1, values, mean_dev, coeffs }
}

/// Balanced-case value after `t` rounds for one local step:
/// H^t d0 + (1 - H^t)/(1 - H) * G with
/// H = (1 - alpha)^2 + alpha^2 (p+1)/(m n) and
/// G = p alpha^2 sigma^2 / (m n) + alpha^2 (p+1)/(m n) * gamma_bar_sq.
#[allow(clippy::too_many_arguments)]
pub fn k1_simple(
    p: usize,
    m: usize,
    n: usize,
    alpha: f64,
    sigma: f64,
    gamma_bar_sq: f64,
    delta0_sq: f64,
    t: usize,
) -> f64 {
    let (p, mn) = (p as f64, (m * n) as f64);
    let h = (1.0 - alpha).powi(2) + alpha * alpha * (p + 1.0) / mn;
    let g = p * alpha * alpha * sigma * sigma / mn + alpha * alpha * (p + 1.0) / mn * gamma_bar_sq;
    h.powi(t as i32) * delta0_sq + geometric_sum(h, t) * g
}

/// Largest stable step size for the one-step regime: below
/// 2 / (1 + (p+1)/(m n)) the contraction coefficient H stays below one.
pub fn stability_threshold_k1(p: usize, m: usize, n: usize) -> f64 {
    2.0 / (1.0 + (p as f64 + 1.0) / ((m * n) as f64))
}

// --- finite multi-step regime -------------------------------------------------

/// Exact curve for `k` local steps per round on disjoint batches of
/// floor(n / k) samples.
pub fn curve_kfinite(spec: &SystemSpec, plan: &RoundPlan, k: usize) -> Result<TheoryCurve> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be >= 1".into()));
    }
    let p = spec.p as f64;
    let delta0 = initial_deviation(spec);
    let mut values = vec![delta0.norm_squared()];
    let mut mean_dev = vec![delta0];
    let mut coeffs = Vec::with_capacity(spec.rounds);
    for t in 0..spec.rounds {
        let g_prev = mean_dev.last().unwrap().clone();
        let total = plan.total_n(t) as f64;
        let m = spec.m;

        // Per-client quantities reused by both the diagonal and the cross
        // sums.
        let mut batch = vec![0.0; m];
        let mut contraction_local = vec![0.0; m]; // per-step squared-error contraction
        let mut keep_pow = vec![0.0; m]; // (1 - alpha_i)^K
        for i in 0..m {
            let n_i = plan.n(i, t);
            let b = n_i / k;
            if b == 0 {
                return Err(Error::BatchTooSmall { n: n_i, k });
            }
            batch[i] = b as f64;
            let a = plan.alpha(i, t);
            contraction_local[i] = (1.0 - a).powi(2) + a * a * (p + 1.0) / batch[i];
            keep_pow[i] = (1.0 - a).powi(k as i32);
        }

        let mut diag_contraction = 0.0;
        let mut diag_forcing = 0.0;
        for i in 0..m {
            let n_i = plan.n(i, t) as f64;
            let a = plan.alpha(i, t);
            let s = plan.sigma(i, t);
            let gamma = plan.gamma(i, t);
            let gg = gamma.norm_squared();
            let gdot = gamma.dot(&g_prev);
            let al = contraction_local[i];
            let q = a * (batch[i] + p + 1.0) / batch[i];
            let noise = a * a * p * s * s / batch[i];
            let mut forcing_sum = 0.0;
            for step in 1..=k {
                let decay = (1.0 - a).powi(step as i32 - 1);
                let per_step = noise
                    + (a * q + 2.0 * a * (1.0 - q) * (1.0 - decay)) * gg
                    + 2.0 * a * (1.0 - q) * decay * gdot;
                forcing_sum += per_step * al.powi((k - step) as i32);
            }
            diag_contraction += n_i * n_i * al.powi(k as i32);
            diag_forcing += n_i * n_i * forcing_sum;
        }

        let mut cross_contraction = 0.0;
        let mut cross_forcing = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let nn = plan.n(i, t) as f64 * plan.n(j, t) as f64;
                cross_contraction += nn * keep_pow[i] * keep_pow[j];
                cross_forcing += nn
                    * (2.0 * keep_pow[i] * (1.0 - keep_pow[j]) * plan.gamma(j, t).dot(&g_prev)
                        + (1.0 - keep_pow[i])
                            * (1.0 - keep_pow[j])
                            * plan.gamma(i, t).dot(plan.gamma(j, t)));
            }
        }

        let contraction = (diag_contraction + cross_contraction) / (total * total);
        let forcing = (diag_forcing + cross_forcing) / (total * total);
        values.push(contraction * values[t] + forcing);
        coeffs.push((contraction, forcing));

        let mut keep = 0.0;
        let mut offset = DVector::zeros(spec.p);
        for i in 0..m {
            let n_i = plan.n(i, t) as f64;
            keep += n_i * keep_pow[i];
            offset += plan.gamma(i, t) * (n_i * (1.0 - keep_pow[i]));
        }
        mean_dev.push(g_prev * (keep / total) + offset / total);
    }
    Ok(TheoryCurve { regime: Regime::KFinite(k), values, mean_dev, coeffs })
}

/// Balanced, offset-free value after `t` rounds for `k` local steps:
/// J^t d0 + (1 - J^t)/(1 - J) * (alpha^2 p sigma^2 / (m nb)) * (1 - A^K)/(1 - A)
/// with nb = floor(n / k), A = (1 - alpha)^2 + alpha^2 (p+1)/nb and
/// J = (A^K + (m - 1)(1 - alpha)^{2K}) / m.
#[allow(clippy::too_many_arguments)]
pub fn kfinite_simple(
    p: usize,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    sigma: f64,
    delta0_sq: f64,
    t: usize,
) -> Result<f64> {
    let batch = n / k;
    if batch == 0 {
        return Err(Error::BatchTooSmall { n, k });
    }
    let (pf, mf, bf) = (p as f64, m as f64, batch as f64);
    let a_local = (1.0 - alpha).powi(2) + alpha * alpha * (pf + 1.0) / bf;
    let j = (a_local.powi(k as i32) + (mf - 1.0) * (1.0 - alpha).powi(2 * k as i32)) / mf;
    let noise = alpha * alpha * pf * sigma * sigma / (mf * bf);
    Ok(j.powi(t as i32) * delta0_sq + geometric_sum(j, t) * noise * geometric_sum(a_local, k))
}

// --- converged regime ----------------------------------------------------------

/// Exact curve for local training run to convergence. Over-parameterized
/// plans (p > max n + 1) follow the interpolation recursion; fully
/// under-parameterized plans (p < min n - 1) are memoryless in t. Mixed or
/// in-band dimensions are rejected.
pub fn curve_kinf(spec: &SystemSpec, plan: &RoundPlan) -> Result<TheoryCurve> {
    let (min_n, max_n) = (plan.min_n(), plan.max_n());
    let over = spec.p > max_n + 1;
    let under = spec.p + 1 < min_n;
    if !over && !under {
        return Err(Error::RegimeGap { p: spec.p, min_n, max_n });
    }
    let p = spec.p as f64;
    let delta0 = initial_deviation(spec);
    let mut values = vec![delta0.norm_squared()];
    let mut mean_dev = vec![delta0];
    let mut coeffs = Vec::with_capacity(spec.rounds);

    for t in 0..spec.rounds {
        let total = plan.total_n(t) as f64;
        let m = spec.m;
        if over {
            let g_prev = mean_dev.last().unwrap().clone();
            let mut diag_c = 0.0;
            let mut diag_d = 0.0;
            for i in 0..m {
                let n_i = plan.n(i, t) as f64;
                let s = plan.sigma(i, t);
                let gamma = plan.gamma(i, t);
                diag_c += n_i * n_i * (1.0 - n_i / p);
                diag_d += n_i * n_i * n_i * s * s / (p - n_i - 1.0)
                    + n_i * n_i * n_i / p * gamma.norm_squared();
            }
            let mut cross_c = 0.0;
            let mut cross_d = 0.0;
            for i in 0..m {
                for j in 0..m {
                    if i == j {
                        continue;
                    }
                    let n_i = plan.n(i, t) as f64;
                    let n_j = plan.n(j, t) as f64;
                    cross_c += n_i * n_j * (1.0 - n_i / p) * (1.0 - n_j / p);
                    cross_d += n_i * n_i * n_j * n_j / (p * p)
                        * plan.gamma(i, t).dot(plan.gamma(j, t))
                        + 2.0 * n_j * n_j / p * n_i * (1.0 - n_i / p)
                            * plan.gamma(j, t).dot(&g_prev);
                }
            }
            let contraction = (diag_c + cross_c) / (total * total);
            let forcing = (diag_d + cross_d) / (total * total);
            values.push(contraction * values[t] + forcing);
            coeffs.push((contraction, forcing));

            let mut keep = 0.0;
            let mut offset = DVector::zeros(spec.p);
            for i in 0..m {
                let n_i = plan.n(i, t) as f64;
                keep += n_i * (1.0 - n_i / p);
                offset += plan.gamma(i, t) * (n_i * n_i / p);
            }
            mean_dev.push(g_prev * (keep / total) + offset / total);
        } else {
            // Memoryless: each round's error depends only on that round's
            // plan entries.
            let mut offset = DVector::zeros(spec.p);
            let mut noise = 0.0;
            for i in 0..m {
                let n_i = plan.n(i, t) as f64;
                offset += plan.gamma(i, t) * n_i;
                let s = plan.sigma(i, t);
                noise += n_i * n_i * p * s * s / (n_i - p - 1.0);
            }
            offset /= total;
            let value = offset.norm_squared() + noise / (total * total);
            values.push(value);
            coeffs.push((0.0, value));
            mean_dev.push(offset);
        }
    }
    Ok(TheoryCurve { regime: Regime::KInfinite, values, mean_dev, coeffs })
}

/// Balanced-case value after `t` rounds of converged local updates.
///
/// Over-parameterized (p > n + 1): C^t d0 + (1 - C^t)/(1 - C) * D with
/// C = (1/m)(1 - n/p) + ((m-1)/m)(1 - n/p)^2 and
/// D = n sigma^2 / (m (p - n - 1)) + (n / (m p)) (1 - n/p) gamma_bar_sq,
/// the exact specialization of the general recursion under balanced
/// zero-sum offsets.
/// Under-parameterized (p < n - 1): p sigma^2 / (m (n - p - 1)), constant
/// in t.
#[allow(clippy::too_many_arguments)]
pub fn kinf_simple(
    p: usize,
    m: usize,
    n: usize,
    sigma: f64,
    gamma_bar_sq: f64,
    delta0_sq: f64,
    t: usize,
) -> Result<f64> {
    let (pf, mf, nf) = (p as f64, m as f64, n as f64);
    if p > n + 1 {
        let ratio = 1.0 - nf / pf;
        let c = ratio / mf + (mf - 1.0) / mf * ratio * ratio;
        let d = nf * sigma * sigma / (mf * (pf - nf - 1.0))
            + nf / (mf * pf) * ratio * gamma_bar_sq;
        Ok(c.powi(t as i32) * delta0_sq + geometric_sum(c, t) * d)
    } else if p + 1 < n {
        if t == 0 {
            Ok(delta0_sq)
        } else {
            Ok(pf * sigma * sigma / (mf * (nf - pf - 1.0)))
        }
    } else {
        Err(Error::RegimeGap { p, min_n: n, max_n: n })
    }
}

/// Expected error of a single converged fit from deviation d0:
/// (1 - n/p) d0 + n sigma^2 / (p - n - 1), for p > n + 1.
pub fn classical_single_round(p: usize, n: usize, sigma: f64, delta0_sq: f64) -> Result<f64> {
    if p <= n + 1 {
        return Err(Error::DimensionViolation(format!(
            "classical overfitted risk needs p > n + 1 (p = {p}, n = {n})"
        )));
    }
    let (pf, nf) = (p as f64, n as f64);
    Ok((1.0 - nf / pf) * delta0_sq + nf * sigma * sigma / (pf - nf - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        make_heterogeneity, make_init, make_target, HeterogeneitySchedule,
    };
    use crate::sim::run_monte_carlo;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn balanced(
        m: usize,
        p: usize,
        rounds: usize,
        regime: Regime,
        n: usize,
        alpha: f64,
        sigma: f64,
        het_norm: f64,
        delta0: f64,
        seed: u64,
    ) -> (SystemSpec, RoundPlan) {
        let w_star = make_target(p, p.min(5), 1.0, seed);
        let w0 = make_init(&w_star, delta0, seed);
        let schedule = if het_norm == 0.0 {
            HeterogeneitySchedule::Zero
        } else {
            HeterogeneitySchedule::StationarySymmetric { norm: het_norm }
        };
        let gamma = make_heterogeneity(m, p, rounds, &schedule, seed).unwrap();
        let spec = SystemSpec { m, p, s: p.min(5), rounds, regime, w_star, w0, base_seed: seed };
        let plan = RoundPlan::new(
            vec![vec![n; rounds]; m],
            vec![vec![alpha; rounds]; m],
            vec![vec![sigma; rounds]; m],
            gamma,
        )
        .unwrap();
        (spec, plan)
    }

    #[test]
    fn recurrence_single_step() {
        let seq = RecurrenceSeq { initial: 1.0, coeffs: vec![2.0], offsets: vec![3.0] };
        assert_eq!(eval_recurrence(&seq), 5.0);
    }

    #[test]
    fn recurrence_constant_coefficients() {
        let seq = RecurrenceSeq {
            initial: 0.0,
            coeffs: vec![0.5; 3],
            offsets: vec![1.0; 3],
        };
        assert_relative_eq!(eval_recurrence(&seq), 1.75, epsilon = 1e-15);
    }

    #[test]
    fn recurrence_matches_direct_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = 50;
        let coeffs: Vec<f64> = (0..l).map(|_| rng.gen_range(0.2..1.4)).collect();
        let offsets: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let initial = 0.7;
        let seq = RecurrenceSeq { initial, coeffs: coeffs.clone(), offsets: offsets.clone() };
        let mut v = initial;
        for i in 0..l {
            v = coeffs[i] * v + offsets[i];
        }
        assert_relative_eq!(eval_recurrence(&seq), v, max_relative = 1e-12);
    }

    #[test]
    fn geometric_sum_handles_unit_ratio_exactly() {
        assert_eq!(geometric_sum(1.0, 7), 7.0);
        assert_relative_eq!(geometric_sum(0.5, 3), 1.75, epsilon = 1e-15);
    }

    #[test]
    fn curve_values_match_recurrence_formula() {
        let (spec, plan) = balanced(3, 20, 6, Regime::K1, 10, 0.05, 0.4, 0.3, 1.0, 2);
        let curve = curve_k1(&spec, &plan);
        for t in 0..=6 {
            let seq = RecurrenceSeq {
                initial: curve.values[0],
                coeffs: curve.coeffs[..t].iter().map(|c| c.0).collect(),
                offsets: curve.coeffs[..t].iter().map(|c| c.1).collect(),
            };
            assert_relative_eq!(eval_recurrence(&seq), curve.values[t], max_relative = 1e-12);
        }
    }

    #[test]
    fn k1_noiseless_homogeneous_curve_is_zero() {
        let (spec, plan) = balanced(3, 20, 5, Regime::K1, 10, 0.05, 0.0, 0.0, 0.0, 3);
        let curve = curve_k1(&spec, &plan);
        for v in curve.values {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn k1_general_specializes_to_simple_form() {
        let (m, p, n, alpha, sigma, het) = (3, 24, 9, 0.06, 0.5, 0.4);
        let (spec, plan) = balanced(m, p, 5, Regime::K1, n, alpha, sigma, het, 0.8, 4);
        let curve = curve_k1(&spec, &plan);
        let gamma_bar_sq = het * het;
        for t in 0..=5 {
            let simple =
                k1_simple(p, m, n, alpha, sigma, gamma_bar_sq, spec.initial_error(), t);
            assert_relative_eq!(curve.values[t], simple, max_relative = 1e-10);
        }
    }

    #[test]
    fn k1_simple_at_zero_rounds_is_initial_error() {
        assert_eq!(k1_simple(10, 2, 5, 0.1, 0.3, 0.2, 0.49, 0), 0.49);
    }

    fn h_of(alpha: f64, p: usize, m: usize, n: usize) -> f64 {
        (1.0 - alpha).powi(2) + alpha * alpha * (p as f64 + 1.0) / ((m * n) as f64)
    }

    #[test]
    fn k1_simple_pure_contraction_without_forcing() {
        let (p, m, n, alpha) = (30, 2, 8, 0.07);
        let h = h_of(alpha, p, m, n);
        for t in [1usize, 3, 9] {
            let v = k1_simple(p, m, n, alpha, 0.0, 0.0, 0.6, t);
            assert_relative_eq!(v, h.powi(t as i32) * 0.6, max_relative = 1e-12);
        }
    }

    #[test]
    fn k1_simple_long_horizon_reaches_fixed_point() {
        let (p, m, n, alpha, sigma) = (200, 3, 50, 0.05, 0.7);
        let h = h_of(alpha, p, m, n);
        assert!(h < 1.0);
        let g = p as f64 * alpha * alpha * sigma * sigma / ((m * n) as f64)
            + alpha * alpha * (p as f64 + 1.0) / ((m * n) as f64) * 0.25;
        let limit = g / (1.0 - h);
        let v = k1_simple(p, m, n, alpha, sigma, 0.25, 1.0, 10_000);
        assert!((v - limit).abs() < 1e-6);
    }

    #[test]
    fn stability_threshold_matches_direct_arithmetic() {
        // p + 1 = m n makes the threshold exactly one.
        assert_relative_eq!(stability_threshold_k1(9, 2, 5), 1.0, epsilon = 1e-15);
        assert_relative_eq!(
            stability_threshold_k1(200, 3, 50),
            0.8547008547008547,
            epsilon = 1e-15
        );
    }

    #[test]
    fn stability_threshold_brackets_contraction() {
        let (p, m, n) = (200, 3, 50);
        let thr = stability_threshold_k1(p, m, n);
        assert!(h_of(thr * 0.999, p, m, n) < 1.0);
        assert!(h_of(thr * 1.001, p, m, n) > 1.0);
    }

    #[test]
    fn k1_theory_matches_monte_carlo() {
        let (spec, plan) = balanced(3, 30, 4, Regime::K1, 10, 0.06, 0.5, 0.3, 1.0, 5);
        let theory = curve_k1(&spec, &plan);
        let mc = run_monte_carlo(&spec, &plan, 3000).unwrap();
        for t in 1..=4 {
            let z = (mc.mean[t] - theory.values[t]) / mc.stderr[t];
            assert!(z.abs() <= 3.0, "t = {t}, z = {z}");
        }
    }

    #[test]
    fn kfinite_k1_equals_one_step_engine() {
        let (spec, plan) = balanced(3, 24, 5, Regime::KFinite(1), 9, 0.06, 0.5, 0.4, 0.8, 6);
        let multi = curve_kfinite(&spec, &plan, 1).unwrap();
        let single = curve_k1(&spec, &plan);
        for t in 0..=5 {
            assert_relative_eq!(multi.values[t], single.values[t], max_relative = 1e-10);
        }
    }

    #[test]
    fn kfinite_noiseless_homogeneous_contracts_geometrically() {
        let (m, p, n, k, alpha) = (3, 20, 12, 3, 0.05);
        let (spec, plan) = balanced(m, p, 4, Regime::KFinite(k), n, alpha, 0.0, 0.0, 1.0, 7);
        let curve = curve_kfinite(&spec, &plan, k).unwrap();
        let batch = (n / k) as f64;
        let a = (1.0 - alpha).powi(2) + alpha * alpha * (p as f64 + 1.0) / batch;
        let j = (a.powi(k as i32) + (m as f64 - 1.0) * (1.0 - alpha).powi(2 * k as i32))
            / m as f64;
        for t in 0..=4 {
            assert_relative_eq!(
                curve.values[t],
                j.powi(t as i32) * spec.initial_error(),
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn kfinite_general_specializes_to_simple_form() {
        let (m, p, n, k, alpha, sigma) = (3, 20, 12, 4, 0.05, 0.3);
        let (spec, plan) = balanced(m, p, 5, Regime::KFinite(k), n, alpha, sigma, 0.0, 1.0, 8);
        let curve = curve_kfinite(&spec, &plan, k).unwrap();
        for t in 0..=5 {
            let simple =
                kfinite_simple(p, m, n, k, alpha, sigma, spec.initial_error(), t).unwrap();
            assert_relative_eq!(curve.values[t], simple, max_relative = 1e-10);
        }
    }

    #[test]
    fn kfinite_simple_degenerates_to_k1_simple() {
        let (p, m, n, alpha, sigma) = (18, 3, 7, 0.08, 0.4);
        for t in 0..4 {
            assert_relative_eq!(
                kfinite_simple(p, m, n, 1, alpha, sigma, 0.9, t).unwrap(),
                k1_simple(p, m, n, alpha, sigma, 0.0, 0.9, t),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn kfinite_simple_t0_is_initial_error() {
        assert_eq!(kfinite_simple(20, 3, 12, 3, 0.05, 0.3, 0.36, 0).unwrap(), 0.36);
    }

    #[test]
    fn kfinite_rejects_oversized_k() {
        let (spec, plan) = balanced(2, 10, 2, Regime::KFinite(9), 6, 0.05, 0.1, 0.0, 0.5, 9);
        assert!(matches!(
            curve_kfinite(&spec, &plan, 9),
            Err(Error::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn kfinite_theory_matches_monte_carlo() {
        let (spec, plan) = balanced(3, 20, 5, Regime::KFinite(3), 12, 0.05, 0.3, 0.0, 1.0, 10);
        let theory = curve_kfinite(&spec, &plan, 3).unwrap();
        let mc = run_monte_carlo(&spec, &plan, 2000).unwrap();
        for t in 1..=5 {
            let z = (mc.mean[t] - theory.values[t]) / mc.stderr[t];
            assert!(z.abs() <= 3.0, "t = {t}, z = {z}");
        }
    }

    #[test]
    fn kfinite_theory_matches_monte_carlo_with_offsets() {
        // Heterogeneous offsets exercise the cross terms and the
        // mean-deviation recursion.
        let (spec, plan) = balanced(3, 25, 4, Regime::KFinite(2), 8, 0.06, 0.4, 0.5, 0.7, 11);
        let theory = curve_kfinite(&spec, &plan, 2).unwrap();
        let mc = run_monte_carlo(&spec, &plan, 4000).unwrap();
        for t in 1..=4 {
            let z = (mc.mean[t] - theory.values[t]) / mc.stderr[t];
            assert!(z.abs() <= 3.0, "t = {t}, z = {z}");
        }
    }

    #[test]
    fn kinf_single_agent_single_round_is_classical() {
        let (p, n, sigma) = (40, 12, 0.6);
        let (spec, plan) = balanced(1, p, 1, Regime::KInfinite, n, 0.05, sigma, 0.0, 0.9, 12);
        let curve = curve_kinf(&spec, &plan).unwrap();
        let classical =
            classical_single_round(p, n, sigma, spec.initial_error()).unwrap();
        assert_relative_eq!(curve.values[1], classical, max_relative = 1e-12);
    }

    #[test]
    fn kinf_up_value_is_constant_and_matches_arithmetic() {
        // p = 10, n = 25, m = 3, sigma = 0.7 with zero-sum offsets:
        // p sigma^2 / (m (n - p - 1)) = 49/420.
        let (spec, plan) = balanced(3, 10, 4, Regime::KInfinite, 25, 0.05, 0.7, 0.5, 1.0, 13);
        let curve = curve_kinf(&spec, &plan).unwrap();
        let expected = 49.0 / 420.0;
        for t in 1..=4 {
            assert_relative_eq!(curve.values[t], expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn kinf_rejects_band_dimensions() {
        for p in [24, 25, 26] {
            let (spec, plan) =
                balanced(3, p, 2, Regime::KInfinite, 25, 0.05, 0.7, 0.0, 1.0, 14);
            assert!(matches!(curve_kinf(&spec, &plan), Err(Error::RegimeGap { .. })));
        }
    }

    #[test]
    fn kinf_general_specializes_to_simple_form() {
        let (m, p, n, sigma, het) = (3, 60, 14, 0.5, 0.4);
        let (spec, plan) = balanced(m, p, 5, Regime::KInfinite, n, 0.05, sigma, het, 0.9, 15);
        let curve = curve_kinf(&spec, &plan).unwrap();
        for t in 0..=5 {
            let simple =
                kinf_simple(p, m, n, sigma, het * het, spec.initial_error(), t).unwrap();
            assert_relative_eq!(curve.values[t], simple, max_relative = 1e-10);
        }
    }

    #[test]
    fn kinf_simple_t0_is_initial_error() {
        assert_eq!(kinf_simple(50, 3, 10, 0.7, 0.25, 0.81, 0).unwrap(), 0.81);
    }

    #[test]
    fn kinf_simple_single_agent_matches_classical_shape() {
        let (p, n, sigma) = (50, 10, 0.7);
        let v1 = kinf_simple(p, 1, n, sigma, 0.0, 1.0, 1).unwrap();
        let classical = classical_single_round(p, n, sigma, 1.0).unwrap();
        assert_relative_eq!(v1, classical, max_relative = 1e-12);
    }

    #[test]
    fn kinf_theory_matches_monte_carlo_op_with_offsets() {
        let (spec, plan) = balanced(3, 50, 4, Regime::KInfinite, 12, 0.05, 0.5, 0.4, 1.0, 16);
        let theory = curve_kinf(&spec, &plan).unwrap();
        let mc = run_monte_carlo(&spec, &plan, 4000).unwrap();
        for t in 1..=4 {
            let z = (mc.mean[t] - theory.values[t]) / mc.stderr[t];
            assert!(z.abs() <= 3.0, "t = {t}, z = {z}");
        }
    }

    #[test]
    fn kinf_theory_matches_monte_carlo_up_with_offsets() {
        let (spec, plan) = balanced(3, 6, 3, Regime::KInfinite, 20, 0.05, 0.5, 0.3, 1.0, 17);
        let theory = curve_kinf(&spec, &plan).unwrap();
        let mc = run_monte_carlo(&spec, &plan, 4000).unwrap();
        for t in 1..=3 {
            let z = (mc.mean[t] - theory.values[t]) / mc.stderr[t];
            assert!(z.abs() <= 3.0, "t = {t}, z = {z}");
        }
    }

    #[test]
    fn negated_forcing_is_a_real_fault() {
        let (spec, plan) = balanced(3, 24, 3, Regime::K1, 9, 0.06, 0.5, 0.4, 0.8, 18);
        let good = curve_k1(&spec, &plan);
        let bad = curve_k1_negated_forcing(&spec, &plan);
        assert!((good.values[3] - bad.values[3]).abs() > 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn op_contraction_below_one(m in 1usize..30, n in 1usize..200, extra in 2usize..400) {
            let p = n + 1 + extra; // strictly over-parameterized
            let (pf, mf, nf) = (p as f64, m as f64, n as f64);
            let ratio = 1.0 - nf / pf;
            let c = ratio / mf + (mf - 1.0) / mf * ratio * ratio;
            prop_assert!(c < 1.0);
            prop_assert!(c > 0.0);
        }

        #[test]
        fn recurrence_closed_form_equals_iteration(
            l in 1usize..30,
            seed in 0u64..10_000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let coeffs: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.2..1.2)).collect();
            let offsets: Vec<f64> = (0..l).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let initial = rng.gen_range(-1.0..1.0);
            let seq = RecurrenceSeq { initial, coeffs: coeffs.clone(), offsets: offsets.clone() };
            let mut v = initial;
            for i in 0..l {
                v = coeffs[i] * v + offsets[i];
            }
            let closed = eval_recurrence(&seq);
            prop_assert!((closed - v).abs() <= 1e-12 * (1.0 + v.abs().max(closed.abs())));
        }
    }
}
