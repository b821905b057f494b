//! Problem specifications: fleet shape, per-round plans, heterogeneity
//! schedules and the deterministic seeding discipline.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of local update steps per communication round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// One gradient step per round.
    K1,
    /// A finite number of steps, each on its own disjoint batch.
    KFinite(usize),
    /// Local training run to convergence (interpolation when p > n,
    /// least squares when p < n).
    KInfinite,
}

impl Regime {
    pub fn label(&self) -> String {
        match self {
            Regime::K1 => "k1".to_string(),
            Regime::KFinite(k) => format!("kfinite({k})"),
            Regime::KInfinite => "kinf".to_string(),
        }
    }
}

/// Global problem description: fleet size, dimensions, horizon, target and
/// initialization. Immutable after construction.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    /// Number of clients.
    pub m: usize,
    /// Model dimension.
    pub p: usize,
    /// Number of true features (leading entries of `w_star`).
    pub s: usize,
    /// Communication rounds.
    pub rounds: usize,
    pub regime: Regime,
    /// Target solution; entries `s..p` are exactly zero.
    pub w_star: DVector<f64>,
    /// Initialization of the averaged model.
    pub w0: DVector<f64>,
    pub base_seed: u64,
}

impl SystemSpec {
    /// Squared distance between initialization and target.
    pub fn initial_error(&self) -> f64 {
        (&self.w_star - &self.w0).norm_squared()
    }
}

/// Per-(client, round) quantities: sample counts, learning rates, noise
/// levels and heterogeneity offsets. Indexed `(i, t)` with `i < m`, `t < T`.
#[derive(Debug, Clone)]
pub struct RoundPlan {
    pub m: usize,
    pub rounds: usize,
    n: Vec<usize>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    gamma: Vec<DVector<f64>>,
    /// When set, `validate_spec` additionally checks the balanced-plan
    /// requirements (constant n/alpha/sigma, zero-sum offsets with constant
    /// mean squared norm).
    pub simple_case: bool,
}

impl RoundPlan {
    /// Builds a plan from full matrices. Outer index is the client, inner
    /// index the round.
    pub fn new(
        n: Vec<Vec<usize>>,
        alpha: Vec<Vec<f64>>,
        sigma: Vec<Vec<f64>>,
        gamma: Vec<Vec<DVector<f64>>>,
    ) -> Result<Self> {
        let m = n.len();
        if m == 0 {
            return Err(Error::InvalidConfig("at least one client required".into()));
        }
        let rounds = n[0].len();
        for (name, len_ok) in [
            ("n", n.iter().all(|r| r.len() == rounds) && n.len() == m),
            ("alpha", alpha.iter().all(|r| r.len() == rounds) && alpha.len() == m),
            ("sigma", sigma.iter().all(|r| r.len() == rounds) && sigma.len() == m),
            ("gamma", gamma.iter().all(|r| r.len() == rounds) && gamma.len() == m),
        ] {
            if !len_ok {
                return Err(Error::InvalidConfig(format!(
                    "field {name} must be an m x T matrix (m = {m}, T = {rounds})"
                )));
            }
        }
        let flatten = |rows: Vec<Vec<f64>>| -> Vec<f64> {
            let mut flat = vec![0.0; m * rounds];
            for (i, row) in rows.into_iter().enumerate() {
                for (t, v) in row.into_iter().enumerate() {
                    flat[t * m + i] = v;
                }
            }
            flat
        };
        let mut n_flat = vec![0usize; m * rounds];
        for (i, row) in n.into_iter().enumerate() {
            for (t, v) in row.into_iter().enumerate() {
                n_flat[t * m + i] = v;
            }
        }
        let mut gamma_flat = vec![DVector::zeros(0); m * rounds];
        for (i, row) in gamma.into_iter().enumerate() {
            for (t, v) in row.into_iter().enumerate() {
                gamma_flat[t * m + i] = v;
            }
        }
        Ok(Self {
            m,
            rounds,
            n: n_flat,
            alpha: flatten(alpha),
            sigma: flatten(sigma),
            gamma: gamma_flat,
            simple_case: false,
        })
    }

    /// Constant-everywhere plan: one sample count, rate and noise level for
    /// all clients and rounds, with a fixed per-client offset set reused
    /// every round.
    pub fn constant(
        m: usize,
        rounds: usize,
        n: usize,
        alpha: f64,
        sigma: f64,
        gamma: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if gamma.len() != m {
            return Err(Error::InvalidConfig(format!(
                "expected {m} offset vectors, got {}",
                gamma.len()
            )));
        }
        let per_client: Vec<Vec<DVector<f64>>> = gamma
            .into_iter()
            .map(|g| vec![g; rounds])
            .collect();
        Self::new(
            vec![vec![n; rounds]; m],
            vec![vec![alpha; rounds]; m],
            vec![vec![sigma; rounds]; m],
            per_client,
        )
    }

    #[inline]
    pub fn n(&self, client: usize, round: usize) -> usize {
        self.n[round * self.m + client]
    }
    #[inline]
    pub fn alpha(&self, client: usize, round: usize) -> f64 {
        self.alpha[round * self.m + client]
    }
    #[inline]
    pub fn sigma(&self, client: usize, round: usize) -> f64 {
        self.sigma[round * self.m + client]
    }
    #[inline]
    pub fn gamma(&self, client: usize, round: usize) -> &DVector<f64> {
        &self.gamma[round * self.m + client]
    }

    pub fn min_n(&self) -> usize {
        self.n.iter().copied().min().unwrap_or(0)
    }
    pub fn max_n(&self) -> usize {
        self.n.iter().copied().max().unwrap_or(0)
    }
    pub fn total_n(&self, round: usize) -> usize {
        (0..self.m).map(|i| self.n(i, round)).sum()
    }
}

/// How per-client heterogeneity offsets are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HeterogeneitySchedule {
    /// All offsets are exactly zero.
    Zero,
    /// One zero-sum, equal-norm offset set shared by every round.
    StationarySymmetric { norm: f64 },
    /// A fresh zero-sum, equal-norm offset set per round.
    NonStationary { norm: f64 },
}

impl HeterogeneitySchedule {
    pub fn norm(&self) -> f64 {
        match self {
            HeterogeneitySchedule::Zero => 0.0,
            HeterogeneitySchedule::StationarySymmetric { norm }
            | HeterogeneitySchedule::NonStationary { norm } => *norm,
        }
    }
}

/// Outcome of `validate_spec`: empty means valid.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

const ZERO_SUM_TOL: f64 = 1e-12;

/// Checks a spec/plan pair against all structural invariants and
/// regime-compatibility rules. Report-style: never errors.
pub fn validate_spec(spec: &SystemSpec, plan: &RoundPlan) -> ValidationReport {
    let mut v = Vec::new();
    if spec.m == 0 {
        v.push("m must be at least 1".to_string());
    }
    if spec.p == 0 {
        v.push("p must be at least 1".to_string());
    }
    if spec.s == 0 || spec.s > spec.p {
        v.push(format!("s must satisfy 1 <= s <= p (s = {}, p = {})", spec.s, spec.p));
    }
    if spec.w_star.len() != spec.p {
        v.push(format!(
            "w_star has length {}, expected p = {}",
            spec.w_star.len(),
            spec.p
        ));
    } else if spec.w_star.iter().skip(spec.s).any(|&x| x != 0.0) {
        v.push(format!("w_star entries beyond s = {} must be exactly zero", spec.s));
    }
    if spec.w0.len() != spec.p {
        v.push(format!("w0 has length {}, expected p = {}", spec.w0.len(), spec.p));
    }
    if plan.m != spec.m {
        v.push(format!("plan has {} clients, spec has {}", plan.m, spec.m));
    }
    if plan.rounds != spec.rounds {
        v.push(format!("plan has {} rounds, spec has {}", plan.rounds, spec.rounds));
    }
    if v.iter().any(|s| s.contains("plan has")) {
        return ValidationReport { violations: v };
    }

    for t in 0..plan.rounds {
        for i in 0..plan.m {
            if plan.n(i, t) == 0 {
                v.push(format!("n({i},{t}) must be >= 1"));
            }
            if plan.alpha(i, t) <= 0.0 {
                v.push(format!("alpha({i},{t}) must be > 0"));
            }
            if plan.sigma(i, t) < 0.0 {
                v.push(format!("sigma({i},{t}) must be >= 0"));
            }
            if plan.gamma(i, t).len() != spec.p {
                v.push(format!("gamma({i},{t}) has wrong dimension"));
            }
        }
    }

    match spec.regime {
        Regime::K1 => {}
        Regime::KFinite(k) => {
            if k == 0 {
                v.push("K must be >= 1".to_string());
            } else if plan.min_n() < k {
                v.push(format!("K <= min n violated (K = {k}, min n = {})", plan.min_n()));
            }
        }
        Regime::KInfinite => {
            let (min_n, max_n) = (plan.min_n(), plan.max_n());
            let op = spec.p > max_n + 1;
            let up = spec.p + 1 < min_n;
            if !op && !up {
                v.push(format!(
                    "RegimeGap: p = {} lies in the uncovered band [{} - 1, {} + 1] for converged local updates",
                    spec.p, min_n, max_n
                ));
            }
        }
    }

    if plan.simple_case {
        let n0 = plan.n(0, 0);
        let a0 = plan.alpha(0, 0);
        let s0 = plan.sigma(0, 0);
        let mut constant = true;
        for t in 0..plan.rounds {
            for i in 0..plan.m {
                constant &= plan.n(i, t) == n0
                    && plan.alpha(i, t) == a0
                    && plan.sigma(i, t) == s0;
            }
        }
        if !constant {
            v.push("simple case requires constant n, alpha, sigma across (i,t)".to_string());
        }
        let mut mean_sq = None;
        for t in 0..plan.rounds {
            let mut sum = DVector::zeros(spec.p);
            let mut sq = 0.0;
            for i in 0..plan.m {
                sum += plan.gamma(i, t);
                sq += plan.gamma(i, t).norm_squared();
            }
            if sum.norm() > ZERO_SUM_TOL * (1.0 + sq.sqrt()) {
                v.push(format!("simple case requires zero-sum offsets at round {t}"));
            }
            let bar = sq / plan.m as f64;
            match mean_sq {
                None => mean_sq = Some(bar),
                Some(prev) => {
                    if (prev - bar).abs() > 1e-9 * (1.0 + prev.abs()) {
                        v.push(format!(
                            "simple case requires a constant mean squared offset norm (round {t})"
                        ));
                    }
                }
            }
        }
    }

    ValidationReport { violations: v }
}

// --- deterministic seeding -------------------------------------------------

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer; bijective on u64.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the RNG seed for one (trial, round, client) cell.
///
/// Injective over the index tuple for indices below 2^16 each, stable across
/// runs and platforms: the tuple is packed into the low 48 bits, mapped
/// through an odd-multiplier affine step (bijective mod 2^64) and finished
/// with a bijective mixer.
pub fn trial_seed(base_seed: u64, trial: usize, round: usize, client: usize) -> u64 {
    debug_assert!(trial < (1 << 16) && round < (1 << 16) && client < (1 << 16));
    let packed = ((trial as u64) << 32) | ((round as u64) << 16) | client as u64;
    mix(base_seed.wrapping_add(packed.wrapping_mul(GOLDEN)))
}

/// Seed stream tags for non-trial randomness (target construction,
/// initialization direction, offset directions). Disjoint from the 48-bit
/// packed space used by `trial_seed`.
#[derive(Debug, Clone, Copy)]
pub enum SeedDomain {
    Target,
    Init,
    Offsets { round: usize },
}

pub fn domain_seed(base_seed: u64, domain: SeedDomain) -> u64 {
    let tag = match domain {
        SeedDomain::Target => 1u64 << 52,
        SeedDomain::Init => 2u64 << 52,
        SeedDomain::Offsets { round } => (3u64 << 52) | round as u64,
    };
    mix(base_seed.wrapping_add(tag.wrapping_mul(GOLDEN)))
}

// --- heterogeneity construction --------------------------------------------

/// Generates the offset field for `m` clients over `rounds` rounds.
///
/// Symmetric schedules draw m i.i.d. Gaussian directions, project to zero
/// sum, rescale to the target norm and iterate until both constraints hold
/// to 1e-12.
pub fn make_heterogeneity(
    m: usize,
    p: usize,
    rounds: usize,
    schedule: &HeterogeneitySchedule,
    seed: u64,
) -> Result<Vec<Vec<DVector<f64>>>> {
    match schedule {
        HeterogeneitySchedule::Zero => {
            Ok(vec![vec![DVector::zeros(p); rounds]; m])
        }
        HeterogeneitySchedule::StationarySymmetric { norm } => {
            let set = zero_sum_equal_norm(m, p, *norm, domain_seed(seed, SeedDomain::Offsets { round: 0 }))?;
            Ok(set.into_iter().map(|g| vec![g; rounds]).collect())
        }
        HeterogeneitySchedule::NonStationary { norm } => {
            let mut per_client: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(rounds); m];
            for t in 0..rounds {
                let set = zero_sum_equal_norm(
                    m,
                    p,
                    *norm,
                    domain_seed(seed, SeedDomain::Offsets { round: t + 1 }),
                )?;
                for (i, g) in set.into_iter().enumerate() {
                    per_client[i].push(g);
                }
            }
            Ok(per_client)
        }
    }
}

/// m vectors in R^p, each of the given norm, summing to zero within 1e-12.
///
/// Gaussian directions are projected to zero sum and rescaled iteratively
/// (at most 50 passes). Unlucky draws can stall that iteration when p is
/// small relative to m, so up to 8 fresh deterministic redraws are attempted
/// before failing loudly.
pub fn zero_sum_equal_norm(m: usize, p: usize, norm: f64, seed: u64) -> Result<Vec<DVector<f64>>> {
    if norm == 0.0 {
        return Ok(vec![DVector::zeros(p); m]);
    }
    if m < 2 {
        return Err(Error::ImpossibleSchedule(format!(
            "zero-sum offsets with norm {norm} need at least 2 clients"
        )));
    }
    for attempt in 0..8u64 {
        if let Some(vs) = zero_sum_attempt(m, p, norm, mix(seed.wrapping_add(attempt))) {
            return Ok(vs);
        }
    }
    Err(Error::ImpossibleSchedule(format!(
        "zero-sum projection did not converge for m = {m}, p = {p}, norm = {norm}"
    )))
}

fn zero_sum_attempt(m: usize, p: usize, norm: f64, seed: u64) -> Option<Vec<DVector<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vs: Vec<DVector<f64>> = (0..m)
        .map(|_| DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    for _ in 0..50 {
        let mean = vs.iter().fold(DVector::zeros(p), |acc, v| acc + v) / m as f64;
        for v in vs.iter_mut() {
            *v -= &mean;
            let len = v.norm();
            if len == 0.0 {
                return None;
            }
            *v *= norm / len;
        }
        let sum_norm = vs.iter().fold(DVector::zeros(p), |acc, v| acc + v).norm();
        let norms_ok = vs.iter().all(|v| (v.norm() - norm).abs() <= ZERO_SUM_TOL);
        if sum_norm <= ZERO_SUM_TOL && norms_ok {
            return Some(vs);
        }
    }
    None
}

/// Target vector: first `s` entries drawn from a seeded standard Gaussian,
/// rescaled so the whole vector has the requested norm; the rest exactly zero.
pub fn make_target(p: usize, s: usize, norm: f64, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(domain_seed(seed, SeedDomain::Target));
    let mut w = DVector::zeros(p);
    for j in 0..s.min(p) {
        w[j] = rng.sample::<f64, _>(StandardNormal);
    }
    let len = w.norm();
    if len > 0.0 && norm > 0.0 {
        w *= norm / len;
    } else if norm == 0.0 {
        w.fill(0.0);
    }
    w
}

/// Initialization at exact distance `dist` from the target, along a seeded
/// uniform direction.
pub fn make_init(w_star: &DVector<f64>, dist: f64, seed: u64) -> DVector<f64> {
    if dist == 0.0 {
        return w_star.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(domain_seed(seed, SeedDomain::Init));
    let p = w_star.len();
    let mut u = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let len = u.norm();
    u /= len;
    w_star + u * dist
}

// --- JSON configuration schema ----------------------------------------------

/// A scalar broadcast to all (i, t) cells, or a full m x T matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrMatrix<T> {
    Scalar(T),
    Matrix(Vec<Vec<T>>),
}

impl<T: Copy> ScalarOrMatrix<T> {
    fn materialize(&self, m: usize, rounds: usize, name: &str) -> Result<Vec<Vec<T>>> {
        match self {
            ScalarOrMatrix::Scalar(x) => Ok(vec![vec![*x; rounds]; m]),
            ScalarOrMatrix::Matrix(rows) => {
                if rows.len() != m || rows.iter().any(|r| r.len() != rounds) {
                    return Err(Error::InvalidConfig(format!(
                        "{name} matrix must be {m} x {rounds}"
                    )));
                }
                Ok(rows.clone())
            }
        }
    }
}

/// The on-disk experiment configuration. Scalars broadcast to every
/// (client, round) cell; matrices are accepted for full generality.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub m: usize,
    pub p: usize,
    #[serde(default = "default_s")]
    pub s: usize,
    #[serde(rename = "T")]
    pub rounds: usize,
    /// "k1" | "kfinite" | "kinf"
    pub regime: String,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub n: ScalarOrMatrix<usize>,
    pub alpha: ScalarOrMatrix<f64>,
    pub sigma: ScalarOrMatrix<f64>,
    #[serde(default = "default_het_kind")]
    pub het_kind: String,
    #[serde(default)]
    pub het_norm: f64,
    #[serde(default)]
    pub delta0_norm: f64,
    #[serde(default = "default_w_star_norm")]
    pub w_star_norm: f64,
    #[serde(default = "default_seed")]
    pub base_seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

fn default_s() -> usize {
    1
}
fn default_het_kind() -> String {
    "stationary_symmetric".to_string()
}
fn default_w_star_norm() -> f64 {
    1.0
}
fn default_seed() -> u64 {
    0
}
fn default_trials() -> usize {
    20
}

impl RunConfig {
    pub fn regime(&self) -> Result<Regime> {
        match self.regime.as_str() {
            "k1" => Ok(Regime::K1),
            "kfinite" => match self.k {
                Some(k) if k >= 1 => Ok(Regime::KFinite(k)),
                _ => Err(Error::InvalidConfig(
                    "regime kfinite requires K >= 1".into(),
                )),
            },
            "kinf" => Ok(Regime::KInfinite),
            other => Err(Error::InvalidConfig(format!("unknown regime {other:?}"))),
        }
    }

    pub fn schedule(&self) -> Result<HeterogeneitySchedule> {
        match self.het_kind.as_str() {
            "zero" => Ok(HeterogeneitySchedule::Zero),
            "stationary_symmetric" => {
                if self.het_norm == 0.0 {
                    Ok(HeterogeneitySchedule::Zero)
                } else {
                    Ok(HeterogeneitySchedule::StationarySymmetric { norm: self.het_norm })
                }
            }
            "non_stationary" => Ok(HeterogeneitySchedule::NonStationary { norm: self.het_norm }),
            other => Err(Error::InvalidConfig(format!(
                "unknown het_kind {other:?}"
            ))),
        }
    }

    /// Materializes the system spec and round plan, constructing target,
    /// initialization and offsets deterministically from `base_seed`.
    pub fn resolve(&self) -> Result<(SystemSpec, RoundPlan)> {
        if self.m == 0 || self.p == 0 {
            return Err(Error::InvalidConfig("m and p must be >= 1".into()));
        }
        let regime = self.regime()?;
        let schedule = self.schedule()?;
        let n = self.n.materialize(self.m, self.rounds, "n")?;
        let alpha = self.alpha.materialize(self.m, self.rounds, "alpha")?;
        let sigma = self.sigma.materialize(self.m, self.rounds, "sigma")?;
        let gamma = make_heterogeneity(self.m, self.p, self.rounds, &schedule, self.base_seed)?;
        let w_star = make_target(self.p, self.s.min(self.p), self.w_star_norm, self.base_seed);
        let w0 = make_init(&w_star, self.delta0_norm, self.base_seed);
        let spec = SystemSpec {
            m: self.m,
            p: self.p,
            s: self.s,
            rounds: self.rounds,
            regime,
            w_star,
            w0,
            base_seed: self.base_seed,
        };
        let plan = RoundPlan::new(n, alpha, sigma, gamma)?;
        Ok((spec, plan))
    }
}
