//! FedAvg execution on fresh Gaussian data: per-client local updates for all
//! three step regimes, sample-count-weighted averaging and Monte-Carlo
//! aggregation of the squared model error.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{trial_seed, Regime, RoundPlan, SystemSpec};
use crate::error::{Error, Result};
use crate::linalg::{least_squares_solve, min_norm_update, sample_design, sample_noise};

/// Averaged model plus the per-client local results of the round that
/// produced it.
#[derive(Debug, Clone)]
pub struct FleetState {
    pub w_avg: DVector<f64>,
    /// Rounds completed so far (0 = initialization).
    pub round: usize,
    pub locals: Vec<DVector<f64>>,
}

impl FleetState {
    pub fn initial(w0: DVector<f64>) -> Self {
        Self { w_avg: w0, round: 0, locals: Vec::new() }
    }
}

/// Monte-Carlo summary of the squared model error per round.
#[derive(Debug, Clone)]
pub struct SimCurve {
    /// Mean of ||delta_t||^2 over trials, indexed t = 0..=T.
    pub mean: Vec<f64>,
    /// Unbiased sample variance per round.
    pub variance: Vec<f64>,
    /// Standard error per round: sqrt(variance / trials).
    pub stderr: Vec<f64>,
    pub trials: usize,
    /// Structural hash of the system spec and round plan that produced the curve.
    pub fingerprint: u64,
}

/// Stable structural hash over every quantity that determines a simulation:
/// dimensions, regime, seed, per-cell plan entries and the target and
/// initialization vectors.
pub fn config_fingerprint(spec: &SystemSpec, plan: &RoundPlan) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut fold = |x: u64| h = mix(h ^ x.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    for dim in [spec.m, spec.p, spec.s, spec.rounds] {
        fold(dim as u64);
    }
    fold(match spec.regime {
        Regime::K1 => 1,
        Regime::KFinite(k) => 0x1000 + k as u64,
        Regime::KInfinite => 2,
    });
    fold(spec.base_seed);
    for v in spec.w_star.iter().chain(spec.w0.iter()) {
        fold(v.to_bits());
    }
    for t in 0..plan.rounds {
        for i in 0..plan.m {
            fold(plan.n(i, t) as u64);
            fold(plan.alpha(i, t).to_bits());
            fold(plan.sigma(i, t).to_bits());
            for g in plan.gamma(i, t).iter() {
                fold(g.to_bits());
            }
        }
    }
    h
}

/// One exact gradient step on the mean-squared-error loss over `n` samples:
/// w - (alpha / n) (X X^T w - X y).
pub fn local_step_k1(
    w_in: &DVector<f64>,
    x: &nalgebra::DMatrix<f64>,
    y: &DVector<f64>,
    alpha: f64,
) -> DVector<f64> {
    let n = x.ncols() as f64;
    let residual = x.tr_mul(w_in) - y;
    w_in - x * residual * (alpha / n)
}

/// K sequential gradient steps, each on its own disjoint batch of
/// floor(n / K) columns; trailing columns beyond K * floor(n / K) are
/// discarded.
pub fn local_multibatch(
    w_in: &DVector<f64>,
    x: &nalgebra::DMatrix<f64>,
    y: &DVector<f64>,
    k: usize,
    alpha: f64,
) -> Result<DVector<f64>> {
    let n = x.ncols();
    let batch = n / k;
    if batch == 0 {
        return Err(Error::BatchTooSmall { n, k });
    }
    if batch * k != n {
        log::warn!(
            "dropping {} trailing samples: n = {n} not divisible by K = {k}",
            n - batch * k
        );
    }
    let mut w = w_in.clone();
    for step in 0..k {
        let xb = x.columns(step * batch, batch);
        let yb = y.rows(step * batch, batch);
        let residual = xb.tr_mul(&w) - yb;
        w -= xb * residual * (alpha / batch as f64);
    }
    Ok(w)
}

/// Local training run to convergence: the minimum-norm-change interpolating
/// update when p > n, the least-squares solution when p < n. The boundary
/// p = n is rejected.
pub fn local_converge(
    w_in: &DVector<f64>,
    design: &crate::linalg::DesignMatrix,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (p, n) = (design.p(), design.n());
    if p == n {
        return Err(Error::BoundaryDimension(p));
    }
    if p > n {
        min_norm_update(design, y, w_in)
    } else {
        least_squares_solve(design, y)
    }
}

/// Runs one communication round: every client draws fresh data, runs its
/// regime-appropriate local update, and the server takes the
/// sample-count-weighted average.
pub fn run_round(
    state: &FleetState,
    spec: &SystemSpec,
    plan: &RoundPlan,
    trial: usize,
) -> Result<FleetState> {
    let t = state.round; // plan row for the upcoming round
    let mut locals = Vec::with_capacity(spec.m);
    for i in 0..spec.m {
        let n = plan.n(i, t);
        let seed = trial_seed(spec.base_seed, trial, t + 1, i);
        let design = sample_design(spec.p, n, seed);
        // Noise comes from the same per-cell stream, after the design draw.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let noise = sample_noise(n, plan.sigma(i, t), &mut rng);
        let w_tilde = &spec.w_star - plan.gamma(i, t);
        let y = design.x.tr_mul(&w_tilde) + &noise.e;
        let w_local = match spec.regime {
            Regime::K1 => local_step_k1(&state.w_avg, &design.x, &y, plan.alpha(i, t)),
            Regime::KFinite(k) => {
                local_multibatch(&state.w_avg, &design.x, &y, k, plan.alpha(i, t))?
            }
            Regime::KInfinite => local_converge(&state.w_avg, &design, &y)?,
        };
        locals.push(w_local);
    }
    let total: f64 = plan.total_n(t) as f64;
    let mut w_avg = DVector::zeros(spec.p);
    for (i, w) in locals.iter().enumerate() {
        w_avg += w * (plan.n(i, t) as f64);
    }
    w_avg /= total;
    Ok(FleetState { w_avg, round: t + 1, locals })
}

/// One full trajectory of squared model errors, entry 0 being the
/// initialization error. Deterministic in (base_seed, trial).
pub fn run_trial(spec: &SystemSpec, plan: &RoundPlan, trial: usize) -> Result<Vec<f64>> {
    let mut state = FleetState::initial(spec.w0.clone());
    let mut errors = Vec::with_capacity(spec.rounds + 1);
    errors.push((&spec.w_star - &state.w_avg).norm_squared());
    for _ in 0..spec.rounds {
        state = run_round(&state, spec, plan, trial)?;
        errors.push((&spec.w_star - &state.w_avg).norm_squared());
    }
    Ok(errors)
}

/// Runs `trials` independent trajectories (in parallel) and reduces them in
/// ascending trial order, so the summary is identical regardless of worker
/// scheduling.
pub fn run_monte_carlo(spec: &SystemSpec, plan: &RoundPlan, trials: usize) -> Result<SimCurve> {
    if trials < 2 {
        return Err(Error::InvalidConfig(format!(
            "Monte Carlo needs at least 2 trials, got {trials}"
        )));
    }
    let curves: Vec<Result<Vec<f64>>> = (0..trials)
        .into_par_iter()
        .map(|trial| run_trial(spec, plan, trial))
        .collect();
    let mut ordered = Vec::with_capacity(trials);
    for c in curves {
        ordered.push(c?);
    }
    let mut curve = reduce_curves(&ordered);
    curve.fingerprint = config_fingerprint(spec, plan);
    Ok(curve)
}

/// Sequential two-pass mean/variance reduction over per-trial trajectories.
///
/// A round where every trial produced the same bits (always the case at
/// t = 0, where each trajectory starts from the configured initialization
/// error) reduces to that exact value with zero variance instead of
/// picking up summation rounding noise.
pub fn reduce_curves(curves: &[Vec<f64>]) -> SimCurve {
    let trials = curves.len();
    let len = curves[0].len();
    let mut mean = vec![0.0; len];
    let mut variance = vec![0.0; len];
    for j in 0..len {
        let first = curves[0][j];
        if curves.iter().all(|c| c[j] == first) {
            mean[j] = first;
            continue;
        }
        let sum: f64 = curves.iter().map(|c| c[j]).sum();
        let m = sum / trials as f64;
        mean[j] = m;
        if trials > 1 {
            let ss: f64 = curves.iter().map(|c| (c[j] - m) * (c[j] - m)).sum();
            variance[j] = ss / (trials - 1) as f64;
        }
    }
    let stderr = variance.iter().map(|v| (v / trials as f64).sqrt()).collect();
    SimCurve { mean, variance, stderr, trials, fingerprint: 0 }
}
