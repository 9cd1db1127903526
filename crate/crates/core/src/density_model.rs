//! Lognormal-factor model for the joint conditional density of `n` random
//! times.
//!
//! Coordinate `i` is driven by its own Brownian factor `W^i` plus an
//! independent idiosyncratic Gaussian:
//!
//! ```text
//! τ_i = exp(μ_i + σ_i (ρ_i W^i_1 + sqrt(1 - ρ_i²) ε_i)),   ε_i ~ N(0,1).
//! ```
//!
//! The reference filtration is generated by the factor vector
//! `W = (W^1, …, W^n)` on `[0, t_max]`, `t_max < 1`. Given `F_t`, the log
//! times are independent Gaussians with mean `m_i(t) = μ_i + σ_i ρ_i W^i_t`
//! and variance `s_i²(t) = σ_i² (1 - ρ_i² t)`, so the conditional density
//! `a_t(x)` is a product of lognormal densities — a closed form that is an
//! exact martingale in `t` for each fixed `x`, with product structure the
//! marginalizer exploits coordinate by coordinate.
//!
//! The base martingale `M` is either the aggregated factor
//! `B_t = n^{-1/2} Σ_i W^i_t` (a standard Brownian motion, `<M,M>_t = t`) or
//! the bounded option `M_t = E[tanh(B_1) | F_t]`. The derivative process
//! `u^M_t(x)`, defined by `d<a(x), M>_v = u^M_v(x) d<M,M>_v`, is
//! `a · n^{-1/2} Σ_i score_i / slope(M)` with
//! `score_i = σ_i ρ_i (ln x_i - m_i(t)) / s_i²(t)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combinatorics::{rank_and_sort, ExtendedTime, Injection, TimeConfig};
use crate::numutil::{gauss_legendre, norm_pdf};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("factor loading must satisfy |rho| < 1, got {0}")]
    BadLoading(f64),
    #[error("horizon must satisfy 0 < t_max < 1, got {0}")]
    BadHorizon(f64),
    #[error("evaluation point must be strictly positive, got {0} at coordinate {1}")]
    NonPositivePoint(f64, usize),
    #[error("evaluation time {0} outside [0, t_max = {1}]")]
    TimeOutOfRange(f64, f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("symmetrization over n = {0} coordinates exceeds the n <= 6 guard; use the Monte Carlo path instead")]
    TooManyCoordinates(usize),
}

/// Per-time lognormal-factor parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CoordinateParams {
    /// Log-mean of the time.
    pub mu: f64,
    /// Log-volatility, > 0.
    pub sigma: f64,
    /// Factor loading in (-1, 1).
    pub rho: f64,
}

/// Base martingale selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseMartingale {
    /// `M = B`, the aggregated factor; unbounded, `<M,M>_t = t`.
    #[default]
    Brownian,
    /// `M_t = E[tanh(B_1) | F_t]`, bounded in (-1, 1).
    BoundedTanh,
}

/// Full model: coordinate parameters, horizon and base martingale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub coords: Vec<CoordinateParams>,
    pub t_max: f64,
    #[serde(default)]
    pub martingale: BaseMartingale,
}

impl ModelParams {
    pub fn new(
        coords: Vec<CoordinateParams>,
        t_max: f64,
        martingale: BaseMartingale,
    ) -> Result<Self, ModelError> {
        let params = ModelParams {
            coords,
            t_max,
            martingale,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for c in &self.coords {
            if !(c.sigma > 0.0) {
                return Err(ModelError::BadSigma(c.sigma));
            }
            if !(c.rho.abs() < 1.0) {
                return Err(ModelError::BadLoading(c.rho));
            }
        }
        if !(self.t_max > 0.0 && self.t_max < 1.0) {
            return Err(ModelError::BadHorizon(self.t_max));
        }
        Ok(())
    }

    /// Desk-scale defaults: n symmetric coordinates with median time 0.5,
    /// sigma 0.4, loading 0.5, horizon 0.9.
    pub fn default_n(n: usize) -> Self {
        ModelParams {
            coords: vec![
                CoordinateParams {
                    mu: 0.5f64.ln(),
                    sigma: 0.4,
                    rho: 0.5,
                };
                n
            ],
            t_max: 0.9,
            martingale: BaseMartingale::Brownian,
        }
    }

    /// Same defaults with all loadings zero: times independent of the factor.
    pub fn independent_n(n: usize) -> Self {
        let mut p = Self::default_n(n);
        for c in &mut p.coords {
            c.rho = 0.0;
        }
        p
    }

    pub fn n(&self) -> usize {
        self.coords.len()
    }

    /// Conditional log-mean `m_i(t) = μ_i + σ_i ρ_i w_i`.
    pub fn cond_mean(&self, i: usize, w_i: f64) -> f64 {
        let c = self.coords[i];
        c.mu + c.sigma * c.rho * w_i
    }

    /// Conditional log-variance `s_i²(t) = σ_i² (1 - ρ_i² t)`.
    pub fn cond_var(&self, i: usize, t: f64) -> f64 {
        let c = self.coords[i];
        c.sigma * c.sigma * (1.0 - c.rho * c.rho * t)
    }

    /// Lognormal density of coordinate `i` at `x` given the factor value.
    pub fn coord_pdf(&self, i: usize, t: f64, w_i: f64, x: f64) -> f64 {
        debug_assert!(x > 0.0);
        let m = self.cond_mean(i, w_i);
        let s = self.cond_var(i, t).sqrt();
        let z = (x.ln() - m) / s;
        norm_pdf(z) / (x * s)
    }

    /// The score `σ_i ρ_i (ln x - m_i(t)) / s_i²(t)` of coordinate `i`:
    /// the logarithmic derivative of the coordinate density in `w_i`.
    pub fn score(&self, i: usize, t: f64, w_i: f64, x: f64) -> f64 {
        let c = self.coords[i];
        c.sigma * c.rho * (x.ln() - self.cond_mean(i, w_i)) / self.cond_var(i, t)
    }
}

/// Factor values at a fixed time.
#[derive(Debug, Clone)]
pub struct FactorState {
    pub t: f64,
    /// One factor value per coordinate.
    pub w: Vec<f64>,
}

impl FactorState {
    pub fn origin(n: usize) -> Self {
        FactorState {
            t: 0.0,
            w: vec![0.0; n],
        }
    }

    /// The aggregated factor `b = n^{-1/2} Σ_i w_i` driving the base
    /// martingale.
    pub fn aggregate(&self) -> f64 {
        self.w.iter().sum::<f64>() / (self.w.len() as f64).sqrt()
    }
}

/// `E[tanh(b + sqrt(1-t) Z)]` and its b-derivative, by 64-point
/// Gauss-Legendre against the Gaussian weight.
fn tanh_martingale(t: f64, b: f64) -> (f64, f64) {
    use std::sync::OnceLock;
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    let (nodes, weights) = RULE.get_or_init(|| gauss_legendre(64));
    let s = (1.0 - t).max(0.0).sqrt();
    let half = 8.5;
    let mut value = 0.0;
    let mut slope = 0.0;
    for (x, w) in nodes.iter().zip(weights) {
        let z = half * x;
        let weight = w * half * norm_pdf(z);
        let th = (b + s * z).tanh();
        value += weight * th;
        slope += weight * (1.0 - th * th);
    }
    (value, slope)
}

impl BaseMartingale {
    /// `M_v` at the state.
    pub fn value(&self, state: &FactorState) -> f64 {
        match self {
            BaseMartingale::Brownian => state.aggregate(),
            BaseMartingale::BoundedTanh => tanh_martingale(state.t, state.aggregate()).0,
        }
    }

    /// dM/db at the state; the bracket rate is its square.
    pub fn slope(&self, state: &FactorState) -> f64 {
        match self {
            BaseMartingale::Brownian => 1.0,
            BaseMartingale::BoundedTanh => tanh_martingale(state.t, state.aggregate()).1,
        }
    }

    /// `d<M,M>_v / dv` at the state.
    pub fn bracket_rate(&self, state: &FactorState) -> f64 {
        let s = self.slope(state);
        s * s
    }
}

/// Pointwise density evaluation.
#[derive(Debug, Clone)]
pub struct DensityEval {
    /// `a_t(x)`, the joint conditional density value.
    pub a: f64,
    /// `u^M_t(x)`, the derivative of `<a(x), M>` with respect to `<M,M>`.
    pub u: f64,
    /// Conditional log-means per coordinate.
    pub means: Vec<f64>,
    /// Conditional log-variances per coordinate.
    pub vars: Vec<f64>,
}

/// Evaluate `a_t(x)` and `u^M_t(x)` at a factor state. The left version
/// `a_{t-}` equals `a_t`: the paths of `(t, w) ↦ a` are continuous.
pub fn density(
    params: &ModelParams,
    state: &FactorState,
    x: &[f64],
) -> Result<DensityEval, ModelError> {
    let n = params.n();
    if x.len() != n || state.w.len() != n {
        return Err(ModelError::DimensionMismatch {
            expected: n,
            got: x.len(),
        });
    }
    if !(0.0..=params.t_max).contains(&state.t) {
        return Err(ModelError::TimeOutOfRange(state.t, params.t_max));
    }
    for (i, &xi) in x.iter().enumerate() {
        if !(xi > 0.0) {
            return Err(ModelError::NonPositivePoint(xi, i));
        }
    }
    let mut a = 1.0;
    let mut score_sum = 0.0;
    let mut means = Vec::with_capacity(n);
    let mut vars = Vec::with_capacity(n);
    for i in 0..n {
        a *= params.coord_pdf(i, state.t, state.w[i], x[i]);
        score_sum += params.score(i, state.t, state.w[i], x[i]);
        means.push(params.cond_mean(i, state.w[i]));
        vars.push(params.cond_var(i, state.t));
    }
    let slope = params.martingale.slope(state);
    let u = a * score_sum / ((n as f64).sqrt() * slope);
    Ok(DensityEval { a, u, means, vars })
}

/// One simulated scenario: factor paths on the grid, the terminal factors,
/// realized times, their increasing re-ordering and the partition label.
#[derive(Debug, Clone)]
pub struct SimulatedScenario {
    /// Time grid inside [0, t_max].
    pub grid: Arc<Vec<f64>>,
    /// `factors[j][i]` = `W^i` at `grid[j]`.
    pub factors: Vec<Vec<f64>>,
    /// `W^i_1`, the factor values at time 1 that set the times.
    pub terminal_factors: Vec<f64>,
    /// Realized times `τ_1..τ_n`.
    pub taus: Vec<f64>,
    /// All `n` times in increasing order.
    pub sorted: Vec<f64>,
    /// Partition label for the chosen selection size.
    pub label: Injection,
    pub k: usize,
}

impl SimulatedScenario {
    pub fn state(&self, step: usize) -> FactorState {
        FactorState {
            t: self.grid[step],
            w: self.factors[step].clone(),
        }
    }

    /// The k smallest realized times in increasing order.
    pub fn sorted_selection(&self) -> &[f64] {
        &self.sorted[..self.k]
    }
}

/// Uniform grid `0 = v_0 < … < v_steps = t_max`.
pub fn uniform_grid(t_max: f64, steps: usize) -> Arc<Vec<f64>> {
    Arc::new(
        (0..=steps)
            .map(|j| t_max * j as f64 / steps as f64)
            .collect(),
    )
}

/// Deterministic per-path RNG stream: `master_seed` selects the key,
/// `path_index` the stream, so any parallel schedule reproduces paths.
pub fn path_rng(master_seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(path_index);
    rng
}

/// Simulate one scenario on the given grid.
pub fn simulate(
    params: &ModelParams,
    k: usize,
    grid: &Arc<Vec<f64>>,
    master_seed: u64,
    path_index: u64,
) -> SimulatedScenario {
    let mut rng = path_rng(master_seed, path_index);
    simulate_with_rng(params, k, grid, &mut rng)
}

/// Simulate one scenario drawing from the supplied RNG.
pub fn simulate_with_rng(
    params: &ModelParams,
    k: usize,
    grid: &Arc<Vec<f64>>,
    rng: &mut ChaCha8Rng,
) -> SimulatedScenario {
    let n = params.n();
    let steps = grid.len();
    let mut factors = vec![vec![0.0; n]; steps];
    for i in 0..n {
        let mut w = 0.0;
        for j in 1..steps {
            let dt = grid[j] - grid[j - 1];
            let z: f64 = rng.sample(StandardNormal);
            w += dt.sqrt() * z;
            factors[j][i] = w;
        }
    }
    let t_last = *grid.last().expect("non-empty grid");
    let terminal_factors: Vec<f64> = (0..n)
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            factors[steps - 1][i] + (1.0 - t_last).max(0.0).sqrt() * z
        })
        .collect();
    let taus: Vec<f64> = (0..n)
        .map(|i| {
            let c = params.coords[i];
            let eps: f64 = rng.sample(StandardNormal);
            (c.mu + c.sigma * (c.rho * terminal_factors[i] + (1.0 - c.rho * c.rho).sqrt() * eps))
                .exp()
        })
        .collect();
    finish_scenario(grid.clone(), factors, terminal_factors, taus, k)
}

fn finish_scenario(
    grid: Arc<Vec<f64>>,
    factors: Vec<Vec<f64>>,
    terminal_factors: Vec<f64>,
    taus: Vec<f64>,
    k: usize,
) -> SimulatedScenario {
    let times: Vec<ExtendedTime> = taus
        .iter()
        .map(|&t| ExtendedTime::finite(t).expect("positive times"))
        .collect();
    let sorted: Vec<f64> = rank_and_sort(&times)
        .sorted
        .iter()
        .map(|t| t.as_f64())
        .collect();
    let config = TimeConfig::new(taus.len(), k).expect("1 <= k <= n");
    let label = config.label(&times);
    SimulatedScenario {
        grid,
        factors,
        terminal_factors,
        taus,
        sorted,
        label,
        k,
    }
}

/// Draw times conditionally on a factor state: the remaining factor
/// uncertainty is `N(0, 1 - t)` per coordinate. Used by simulation-side
/// oracles for conditional expectations.
pub fn simulate_taus_given_state(
    params: &ModelParams,
    state: &FactorState,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    (0..params.n())
        .map(|i| {
            let c = params.coords[i];
            let z: f64 = rng.sample(StandardNormal);
            let w1 = state.w[i] + (1.0 - state.t).sqrt() * z;
            let eps: f64 = rng.sample(StandardNormal);
            (c.mu + c.sigma * (c.rho * w1 + (1.0 - c.rho * c.rho).sqrt() * eps)).exp()
        })
        .collect()
}

/// `Σ_{π ∈ S_n} g(π(x))`, guarded at n ≤ 6.
pub fn symmetrize(g: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Result<f64, ModelError> {
    let n = x.len();
    if n > 6 {
        return Err(ModelError::TooManyCoordinates(n));
    }
    let mut buf = x.to_vec();
    let mut total = 0.0;
    heap_permutations(&mut buf, n, &mut |perm| total += g(perm));
    Ok(total)
}

fn heap_permutations(buf: &mut [f64], k: usize, visit: &mut impl FnMut(&[f64])) {
    if k == 1 {
        visit(buf);
        return;
    }
    for i in 0..k {
        heap_permutations(buf, k - 1, visit);
        if k % 2 == 0 {
            buf.swap(i, k - 1);
        } else {
            buf.swap(0, k - 1);
        }
    }
}

/// `ã_t(x) = 1_{x_1 < … < x_n} Σ_{π ∈ S_n} a_t(π(x))`: the joint density of
/// the increasing re-ordering.
pub fn a_tilde(params: &ModelParams, state: &FactorState, x: &[f64]) -> Result<f64, ModelError> {
    if !is_strictly_increasing(x) {
        return Ok(0.0);
    }
    let g = |y: &[f64]| -> f64 {
        density(params, state, y)
            .map(|eval| eval.a)
            .unwrap_or(0.0)
    };
    symmetrize(&g, x)
}

/// `ã^ρ_t(x) = 1_{x_1 < … < x_n} Σ_{π: π(ρ(i)) = i ∀ i ≤ k} a_t(π(x))`:
/// only the permutations fixing the injection contribute.
pub fn a_tilde_rho(
    params: &ModelParams,
    state: &FactorState,
    rho: &Injection,
    x: &[f64],
) -> Result<f64, ModelError> {
    let n = params.n();
    if x.len() != n {
        return Err(ModelError::DimensionMismatch {
            expected: n,
            got: x.len(),
        });
    }
    if !is_strictly_increasing(x) {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for perm in crate::combinatorics::fixing_permutations(rho, n) {
        // pi(x) has coordinate i equal to x_{pi(i)}.
        let permuted: Vec<f64> = (0..n).map(|i| x[perm[i]]).collect();
        total += density(params, state, &permuted)?.a;
    }
    Ok(total)
}

fn is_strictly_increasing(x: &[f64]) -> bool {
    x.windows(2).all(|w| w[0] < w[1])
}

/// Monte Carlo report on the integrability bound
/// `E[∫_0^{t_max} |u_s(τ)| / a_{s-}(τ) d<M,M>_s]`.
#[derive(Debug, Clone, Serialize)]
pub struct IntegrabilityReport {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    /// Finite-with-margin verdict: the estimate plus three standard errors.
    pub upper_bound: f64,
    pub finite_margin_ok: bool,
    /// The Brownian base martingale is unbounded, so this bound is verified
    /// empirically rather than implied by boundedness.
    pub unbounded_martingale: bool,
}

/// Estimate the integrability bound by simulation with a left-point rule.
pub fn check_a_integrability(
    params: &ModelParams,
    grid: &Arc<Vec<f64>>,
    n_paths: usize,
    master_seed: u64,
) -> IntegrabilityReport {
    let n = params.n();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for path in 0..n_paths {
        let scenario = simulate(params, 1.min(n), grid, master_seed, path as u64);
        let mut integral = 0.0;
        for j in 0..grid.len() - 1 {
            let state = scenario.state(j);
            let dv = grid[j + 1] - grid[j];
            // |u|/a * d<M,M> = n^{-1/2} |Σ score_i| * slope * dv.
            let score_sum: f64 = (0..n)
                .map(|i| params.score(i, state.t, state.w[i], scenario.taus[i]))
                .sum();
            let slope = params.martingale.slope(&state);
            integral += score_sum.abs() * slope * dv / (n as f64).sqrt();
        }
        sum += integral;
        sum_sq += integral * integral;
    }
    let mean = sum / n_paths as f64;
    let var = (sum_sq / n_paths as f64 - mean * mean).max(0.0);
    let std_error = (var / n_paths as f64).sqrt();
    IntegrabilityReport {
        estimate: mean,
        std_error,
        n_paths,
        upper_bound: mean + 3.0 * std_error,
        finite_margin_ok: mean.is_finite() && std_error.is_finite(),
        unbounded_martingale: params.martingale == BaseMartingale::Brownian,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::numutil::integrate_adaptive;

    fn state_at(params: &ModelParams, t: f64, w: f64) -> FactorState {
        FactorState {
            t,
            w: vec![w; params.n()],
        }
    }

    #[test]
    fn validation() {
        assert!(ModelParams::default_n(2).validate().is_ok());
        let mut p = ModelParams::default_n(2);
        p.coords[0].sigma = 0.0;
        assert!(matches!(p.validate(), Err(ModelError::BadSigma(_))));
        let mut p = ModelParams::default_n(2);
        p.coords[1].rho = 1.0;
        assert!(matches!(p.validate(), Err(ModelError::BadLoading(_))));
        let mut p = ModelParams::default_n(2);
        p.t_max = 1.0;
        assert!(matches!(p.validate(), Err(ModelError::BadHorizon(_))));
    }

    #[test]
    fn density_independence_case() {
        // rho = 0: a independent of (t, w); u = 0.
        let params = ModelParams::independent_n(2);
        let x = [0.4, 0.8];
        let e0 = density(&params, &state_at(&params, 0.0, 0.0), &x).unwrap();
        let e1 = density(&params, &state_at(&params, 0.5, 1.7), &x).unwrap();
        assert_abs_diff_eq!(e0.a, e1.a, epsilon = 1e-15);
        assert_eq!(e0.u, 0.0);
        assert_eq!(e1.u, 0.0);
    }

    #[test]
    fn density_initial_condition_is_unconditional_law() {
        // t = 0, w = 0: marginal law of tau_i is lognormal(mu_i, sigma_i^2).
        let params = ModelParams::default_n(2);
        let e = density(&params, &FactorState::origin(2), &[0.5, 0.5]).unwrap();
        let c = params.coords[0];
        let z = (0.5f64.ln() - c.mu) / c.sigma;
        let marginal = norm_pdf(z) / (0.5 * c.sigma);
        assert_abs_diff_eq!(e.a, marginal * marginal, epsilon = 1e-12);
    }

    #[test]
    fn density_errors() {
        let params = ModelParams::default_n(2);
        let state = FactorState::origin(2);
        assert!(matches!(
            density(&params, &state, &[0.0, 1.0]),
            Err(ModelError::NonPositivePoint(_, 0))
        ));
        let late = FactorState {
            t: 0.95,
            w: vec![0.0; 2],
        };
        assert!(matches!(
            density(&params, &late, &[1.0, 1.0]),
            Err(ModelError::TimeOutOfRange(_, _))
        ));
    }

    #[test]
    fn u_matches_central_finite_differences() {
        // u = sum_i da/dw_i / (sqrt(n) * slope), bumping each factor.
        for martingale in [BaseMartingale::Brownian, BaseMartingale::BoundedTanh] {
            let mut params = ModelParams::default_n(2);
            params.coords[1].rho = -0.3;
            params.coords[1].sigma = 0.25;
            params.martingale = martingale;
            let state = FactorState {
                t: 0.4,
                w: vec![0.3, -0.2],
            };
            let x = [0.55, 0.9];
            let eval = density(&params, &state, &x).unwrap();
            let h = 1e-5;
            let mut grad_sum = 0.0;
            for i in 0..2 {
                let mut up = state.clone();
                up.w[i] += h;
                let mut dn = state.clone();
                dn.w[i] -= h;
                let plus = density(&params, &up, &x).unwrap().a;
                let minus = density(&params, &dn, &x).unwrap().a;
                grad_sum += (plus - minus) / (2.0 * h);
            }
            let slope = params.martingale.slope(&state);
            let fd = grad_sum / (2.0f64.sqrt() * slope);
            let rel = ((eval.u - fd) / fd.abs().max(1e-300)).abs();
            assert!(rel < 1e-6, "{martingale:?}: u={} fd={}", eval.u, fd);
        }
    }

    #[test]
    fn coordinate_density_normalizes() {
        // Each marginal is a proper lognormal density: integral 1 to 1e-8.
        let params = ModelParams::default_n(2);
        for (t, w) in [(0.0, 0.0), (0.45, 0.9), (0.9, -1.3)] {
            for i in 0..2 {
                let mut f = |ln_x: f64| params.coord_pdf(i, t, w, ln_x.exp()) * ln_x.exp();
                let m = params.cond_mean(i, w);
                let s = params.cond_var(i, t).sqrt();
                let q = integrate_adaptive(&mut f, m - 10.0 * s, m + 10.0 * s, 1e-12, 1e-10, 50_000);
                assert_abs_diff_eq!(q.value, 1.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn simulation_is_reproducible_and_has_right_marginals() {
        let params = ModelParams::default_n(2);
        let grid = uniform_grid(params.t_max, 10);
        let a = simulate(&params, 1, &grid, 42, 7);
        let b = simulate(&params, 1, &grid, 42, 7);
        assert_eq!(a.taus, b.taus);
        assert_eq!(a.factors, b.factors);
        let c = simulate(&params, 1, &grid, 42, 8);
        assert_ne!(a.taus, c.taus);

        // Empirical mean of ln tau_i within 3 standard errors of mu_i.
        let n_paths = 20_000;
        let mut sum = [0.0f64; 2];
        let mut sum_sq = [0.0f64; 2];
        for path in 0..n_paths {
            let s = simulate(&params, 1, &grid, 99, path);
            for i in 0..2 {
                let l = s.taus[i].ln();
                sum[i] += l;
                sum_sq[i] += l * l;
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n_paths as f64;
            let var = sum_sq[i] / n_paths as f64 - mean * mean;
            let se = (var / n_paths as f64).sqrt();
            assert!(
                (mean - params.coords[i].mu).abs() < 3.0 * se,
                "coordinate {i}: mean {mean} vs mu {}",
                params.coords[i].mu
            );
            // And the variance should match sigma^2.
            assert!((var - 0.16).abs() < 0.01);
        }
    }

    #[test]
    fn independent_model_has_uncorrelated_log_times_and_factors() {
        let params = ModelParams::independent_n(2);
        let grid = uniform_grid(params.t_max, 4);
        let n_paths = 20_000;
        let mut sum_xy = 0.0;
        let mut sum_x = 0.0;
        let mut sum_y = 0.0;
        let mut sum_x2 = 0.0;
        let mut sum_y2 = 0.0;
        for path in 0..n_paths {
            let s = simulate(&params, 1, &grid, 7, path);
            let x = s.taus[0].ln();
            let y = s.terminal_factors[0];
            sum_xy += x * y;
            sum_x += x;
            sum_y += y;
            sum_x2 += x * x;
            sum_y2 += y * y;
        }
        let np = n_paths as f64;
        let cov = sum_xy / np - sum_x / np * (sum_y / np);
        let vx = sum_x2 / np - (sum_x / np).powi(2);
        let vy = sum_y2 / np - (sum_y / np).powi(2);
        let corr = cov / (vx * vy).sqrt();
        // Correlation of ln tau with its factor is 0 under rho = 0; the
        // standard error of a sample correlation is about 1/sqrt(N).
        assert!(corr.abs() < 3.0 / np.sqrt(), "corr {corr}");
    }

    #[test]
    fn symmetrize_cases() {
        // Symmetric g: n! * g(x).
        let g = |x: &[f64]| x.iter().sum::<f64>();
        let x = [1.0, 2.0, 3.0];
        assert_abs_diff_eq!(symmetrize(&g, &x).unwrap(), 36.0, epsilon = 1e-12);
        // n = 2, g = first coordinate: x1 + x2.
        let first = |x: &[f64]| x[0];
        assert_abs_diff_eq!(symmetrize(&first, &[4.0, 9.0]).unwrap(), 13.0, epsilon = 1e-12);
        // n = 3 random g against the explicit 6-term sum.
        let weights = [0.3, -1.2, 2.0];
        let g3 = move |x: &[f64]| x.iter().zip(&weights).map(|(v, w)| v * w).sum::<f64>();
        let x = [0.5, 1.5, 2.5];
        let mut explicit = 0.0;
        for perm in [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ] {
            let p: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
            explicit += g3(&p);
        }
        assert_abs_diff_eq!(symmetrize(&g3, &x).unwrap(), explicit, epsilon = 1e-12);
        // Permutation invariance.
        let y = [2.5, 0.5, 1.5];
        assert_abs_diff_eq!(
            symmetrize(&g3, &x).unwrap(),
            symmetrize(&g3, &y).unwrap(),
            epsilon = 1e-12
        );
        // Guard.
        assert!(symmetrize(&g, &[0.0; 7]).is_err());
    }

    #[test]
    fn a_tilde_variants() {
        let params = ModelParams::default_n(2);
        let state = FactorState {
            t: 0.3,
            w: vec![0.1, -0.4],
        };
        // Unordered point: zero.
        assert_eq!(a_tilde(&params, &state, &[2.0, 1.0]).unwrap(), 0.0);
        // n = 2 explicit two-term expansion.
        let x = [0.4, 0.9];
        let a01 = density(&params, &state, &[0.4, 0.9]).unwrap().a;
        let a10 = density(&params, &state, &[0.9, 0.4]).unwrap().a;
        assert_abs_diff_eq!(a_tilde(&params, &state, &x).unwrap(), a01 + a10, epsilon = 1e-14);
        // n = k: a single fixing permutation.
        let rho = Injection::new(vec![1, 0]);
        let atr = a_tilde_rho(&params, &state, &rho, &x).unwrap();
        // pi must map rho(1)=2 -> 1, rho(2)=1 -> 2, i.e. swap: a(pi(x)) with
        // coordinate i valued x_{pi(i)}.
        assert_abs_diff_eq!(atr, a10, epsilon = 1e-15);
        // Transversal identity: sum over all rho of a_tilde_rho = a_tilde.
        let config = TimeConfig::new(2, 2).unwrap();
        let total: f64 = config
            .injections()
            .iter()
            .map(|r| a_tilde_rho(&params, &state, r, &x).unwrap())
            .sum();
        assert_abs_diff_eq!(total, a_tilde(&params, &state, &x).unwrap(), epsilon = 1e-14);
    }

    #[test]
    fn integrability_report_cases() {
        let grid = uniform_grid(0.9, 40);
        // rho = 0: u = 0, estimate 0.
        let report = check_a_integrability(&ModelParams::independent_n(2), &grid, 200, 5);
        assert_eq!(report.estimate, 0.0);
        // Default params: finite estimate with stderr.
        let report = check_a_integrability(&ModelParams::default_n(2), &grid, 500, 5);
        assert!(report.finite_margin_ok);
        assert!(report.estimate > 0.0);
        assert!(report.unbounded_martingale);
        // Monotone sweep: the estimate grows with the loading.
        let mut estimates = Vec::new();
        for rho in [0.1, 0.5, 0.8] {
            let mut p = ModelParams::default_n(2);
            for c in &mut p.coords {
                c.rho = rho;
            }
            estimates.push(check_a_integrability(&p, &grid, 2_000, 11).estimate);
        }
        assert!(estimates[0] < estimates[1] && estimates[1] < estimates[2]);
    }

    #[test]
    fn tanh_martingale_is_a_martingale_numerically() {
        // E[phi(t', B_{t'}) | B_t = b] = phi(t, b) by simulating increments.
        let (phi_s, _) = tanh_martingale(0.2, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let b_next = 0.3 + (0.5f64 - 0.2).sqrt() * z;
            let (v, _) = tanh_martingale(0.5, b_next);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - phi_s).abs() < 3.5 * se,
            "mean {mean} vs phi {phi_s} (se {se})"
        );
    }
}
