//! Explicit drift formulas for the progressively enlarged filtrations.
//!
//! All formulas are ratios of [`marginalize`](crate::marginal_integrator)
//! calls evaluated along a simulated scenario:
//!
//! * conditional expectations given the initially enlarged filtration
//!   (fixed selected coordinates), the progressively enlarged `F^{τ_ρ}`
//!   (occurred/not-occurred region split) and the sorted-selection
//!   filtration `F^{τ̄_k}` (symmetrized densities over the ordered region);
//! * the predictable projection `N^ρ_{v-}` of the label indicator;
//! * the drift of `L^g M` in `F^{τ_ρ}`;
//! * the drift of `M` in `F^{τ̄_k}`, a weighted average over injections of
//!   the per-injection drift ratios with weights `ã^ρ / ã`;
//! * an independently coded classical single-time drift (`n = k = 1`) in
//!   pure closed form, the reduction oracle for the generic machinery.
//!
//! Discretization is a left-point rule on the scenario grid, with grid
//! intervals split at occurrence times so each piece lies in one regime.

use serde::Serialize;
use thiserror::Error;

use crate::combinatorics::{Injection, TimeConfig};
use crate::density_model::{FactorState, ModelError, ModelParams, SimulatedScenario};
use crate::marginal_integrator::{
    GSpec, IntegrandKind, IntegratorError, MarginalQuery, MarginalResult, QuadratureConfig,
    QueryBuilder,
};
use crate::numutil::{norm_pdf, norm_sf};

/// Denominators below this floor contribute zero (the evanescent-set
/// convention for vanishing densities).
const DENOMINATOR_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("scenario grid index {0} out of range")]
    BadStep(usize),
    #[error("operation requires n = k = 1, got n = {n}, k = {k}")]
    NotSingleTime { n: usize, k: usize },
}

/// Built-in test functions for conditional expectations.
#[derive(Debug, Clone)]
pub enum GFunction {
    One,
    /// Product of per-coordinate interval indicators `(lo, hi]`.
    Box(Vec<(f64, f64)>),
}

impl GFunction {
    fn to_gspec(&self) -> GSpec {
        match self {
            GFunction::One => GSpec::One,
            GFunction::Box(b) => GSpec::Box(b.clone()),
        }
    }

    /// Pointwise evaluation, for simulation-side oracles.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            GFunction::One => 1.0,
            GFunction::Box(b) => x
                .iter()
                .zip(b)
                .map(|(&xi, &(lo, hi))| if xi > lo && xi <= hi { 1.0 } else { 0.0 })
                .product(),
        }
    }
}

fn ratio_or_zero(num: MarginalResult, den: MarginalResult) -> (f64, f64, bool) {
    if den.value.abs() <= DENOMINATOR_FLOOR {
        return (0.0, 0.0, true);
    }
    let value = num.value / den.value;
    let error = (num.error + value.abs() * den.error) / den.value.abs();
    (value, error, false)
}

/// `E[g(τ) | F^{σ(τ_{ρ(T)})}_U]`: condition on the initial enlargement with
/// the selected coordinates in `T` (0-based positions into the selection).
pub fn cond_exp_initial(
    params: &ModelParams,
    scenario: &SimulatedScenario,
    rho: &Injection,
    t_set: &[usize],
    g: &GFunction,
    step: usize,
    cfg: &QuadratureConfig,
) -> Result<f64, DriftError> {
    let state = scenario_state(scenario, step)?;
    let fixed: Vec<(usize, f64)> = t_set
        .iter()
        .map(|&pos| {
            let coord = rho.image(pos);
            (coord, scenario.taus[coord])
        })
        .collect();
    let builder = QueryBuilder::new(params);
    let num = builder.evaluate(
        &MarginalQuery::Plain {
            state: state.clone(),
            fixed: fixed.clone(),
            lower: vec![],
            g: g.to_gspec(),
            integrand: IntegrandKind::Density,
        },
        cfg,
    )?;
    let den = builder.evaluate(
        &MarginalQuery::Plain {
            state,
            fixed,
            lower: vec![],
            g: GSpec::One,
            integrand: IntegrandKind::Density,
        },
        cfg,
    )?;
    Ok(ratio_or_zero(num, den).0)
}

/// The active occurred set for `F^{τ_ρ}` at time `u`: positions whose
/// selected coordinate lies at or before `u` (strictly before for the
/// predictable version).
fn active_t_set(scenario: &SimulatedScenario, rho: &Injection, u: f64, left: bool) -> Vec<usize> {
    (0..rho.len())
        .filter(|&pos| {
            let tau = scenario.taus[rho.image(pos)];
            if left {
                tau < u
            } else {
                tau <= u
            }
        })
        .collect()
}

/// `E[g(τ) | F^{τ_ρ}_U]` (or its left-limit version): exactly one
/// occurred/not-occurred region is active per scenario; the free selected
/// coordinates are bounded below by `U`.
pub fn cond_exp_progressive(
    params: &ModelParams,
    scenario: &SimulatedScenario,
    rho: &Injection,
    g: &GFunction,
    step: usize,
    left_limit: bool,
    cfg: &QuadratureConfig,
) -> Result<f64, DriftError> {
    let state = scenario_state(scenario, step)?;
    let u = state.t;
    let t_set = active_t_set(scenario, rho, u, left_limit);
    // Region sanity: max over occurred < u (or <=) and min over free > u.
    debug_assert!(t_set
        .iter()
        .all(|&pos| scenario.taus[rho.image(pos)] <= u));
    let fixed: Vec<(usize, f64)> = t_set
        .iter()
        .map(|&pos| {
            let coord = rho.image(pos);
            (coord, scenario.taus[coord])
        })
        .collect();
    let lower: Vec<(usize, f64)> = (0..rho.len())
        .filter(|pos| !t_set.contains(pos))
        .map(|pos| (rho.image(pos), u))
        .collect();
    let builder = QueryBuilder::new(params);
    let num = builder.evaluate(
        &MarginalQuery::Plain {
            state: state.clone(),
            fixed: fixed.clone(),
            lower: lower.clone(),
            g: g.to_gspec(),
            integrand: IntegrandKind::Density,
        },
        cfg,
    )?;
    let den = builder.evaluate(
        &MarginalQuery::Plain {
            state,
            fixed,
            lower,
            g: GSpec::One,
            integrand: IntegrandKind::Density,
        },
        cfg,
    )?;
    Ok(ratio_or_zero(num, den).0)
}

/// `E[g(τ) | F^{τ̄_k}_U]` (or left limit): the sorted-selection filtration.
/// The numerator integrand is the symmetrization `Σ_π (g·a)(π(x))` over the
/// ordered region with the first `j` positions pinned to the occurred
/// sorted times.
pub fn cond_exp_sorted(
    params: &ModelParams,
    scenario: &SimulatedScenario,
    g: &GFunction,
    step: usize,
    left_limit: bool,
    cfg: &QuadratureConfig,
) -> Result<f64, DriftError> {
    let state = scenario_state(scenario, step)?;
    let u = state.t;
    let j = sorted_regime(scenario, u, left_limit);
    let prefix: Vec<f64> = scenario.sorted[..j].to_vec();
    let builder = QueryBuilder::new(params);
    let num = builder.evaluate(
        &MarginalQuery::Ordered {
            state: state.clone(),
            prefix: prefix.clone(),
            fixing: None,
            threshold: Some(u),
            g: g.to_gspec(),
            integrand: IntegrandKind::Density,
        },
        cfg,
    )?;
    let den = builder.evaluate(
        &MarginalQuery::Ordered {
            state,
            prefix,
            fixing: None,
            threshold: Some(u),
            g: GSpec::One,
            integrand: IntegrandKind::Density,
        },
        cfg,
    )?;
    Ok(ratio_or_zero(num, den).0)
}

/// Number of occurred sorted-selection times at `u` (the regime index `j`).
fn sorted_regime(scenario: &SimulatedScenario, u: f64, left: bool) -> usize {
    scenario
        .sorted_selection()
        .iter()
        .filter(|&&tau| if left { tau < u } else { tau <= u })
        .count()
}

/// `N^ρ_{v-} = E[ζ_ρ(τ) | F^{τ_ρ}_{v-}]`: the predictable projection of the
/// label indicator, as a ζ-restricted ratio on the active occurred region.
pub fn n_rho_minus(
    params: &ModelParams,
    scenario: &SimulatedScenario,
    rho: &Injection,
    step: usize,
    cfg: &QuadratureConfig,
) -> Result<f64, DriftError> {
    let state = scenario_state(scenario, step)?;
    let v = state.t;
    let t_set = active_t_set(scenario, rho, v, true);
    n_rho_minus_at(params, scenario, rho, &state, v, &t_set, cfg)
}

fn n_rho_minus_at(
    params: &ModelParams,
    scenario: &SimulatedScenario,
    rho: &Injection,
    state: &FactorState,
    v: f64,
    t_set: &[usize],
    cfg: &QuadratureConfig,
) -> Result<f64, DriftError> {
    let occupied: Vec<(usize, f64)> = t_set
        .iter()
        .map(|&pos| (pos, scenario.taus[rho.image(pos)]))
        .collect();
    let fixed: Vec<(usize, f64)> = t_set
        .iter()
        .map(|&pos| {
            let coord = rho.image(pos);
            (coord, scenario.taus[coord])
        })
        .collect();
    let lower: Vec<(usize, f64)> = (0..rho.len())
        .filter(|pos| !t_set.contains(pos))
        .map(|pos| (rho.image(pos), v))
        .collect();
    let builder = QueryBuilder::new(params);
    let num = builder.evaluate(
        &MarginalQuery::Zeta {
            state: state.clone(),
            rho: rho.clone(),
            occupied,
            threshold: Some(v),
            integrand: IntegrandKind::Density,
        },
        cfg,
    )?;
    let den = builder.evaluate(
        &MarginalQuery::Plain {
            state: state.clone(),
            fixed,
            lower,
            g: GSpec::One,
            integrand: IntegrandKind::Density,
        },
        cfg,
    )?;
    Ok(ratio_or_zero(num, den).0.clamp(0.0, 1.0 + 1e-9))
}

/// Drift rate (per unit of `<M,M>`) and its weight for one injection at one
/// evaluation point.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RhoTerm {
    /// The per-injection conditional score ratio (the `u/a`-type factor,
    /// in units of the aggregated score).
    pub ratio: f64,
    /// The `ã^ρ / ã` weight factor (1 for the per-injection drift).
    pub weight: f64,
    /// Quadrature error bound for the product.
    pub error: f64,
    /// Zero-denominator or quadrature-failure flag.
    pub flagged: bool,
}

/// One grid interval of a computed drift path.
#[derive(Debug, Clone, Serialize)]
pub struct DriftStep {
    /// Left endpoint of the interval.
    pub v: f64,
    /// Regime index (occurred sorted-selection times) at the left endpoint.
    pub regime: usize,
    /// Per-injection terms in the fixed lexicographic order.
    pub per_rho: Vec<RhoTerm>,
    pub increment: f64,
    pub cumulative: f64,
    pub error_bound: f64,
    pub flagged: bool,
}

/// The predictable finite-variation part of the enlarged-filtration
/// decomposition, discretized on the scenario grid.
#[derive(Debug, Clone, Serialize)]
pub struct DriftPath {
    pub grid: Vec<f64>,
    /// `steps[l]` covers the interval `(grid[l], grid[l+1]]`.
    pub steps: Vec<DriftStep>,
    pub injection_labels: Vec<String>,
    pub total_error: f64,
    pub any_flagged: bool,
}

impl DriftPath {
    /// Accumulated drift at a grid index (0 at index 0).
    pub fn cumulative_at(&self, grid_index: usize) -> f64 {
        if grid_index == 0 {
            0.0
        } else {
            self.steps[grid_index - 1].cumulative
        }
    }

    pub fn final_cumulative(&self) -> f64 {
        self.steps.last().map(|s| s.cumulative).unwrap_or(0.0)
    }

    pub fn max_abs_increment(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.increment.abs())
            .fold(0.0, f64::max)
    }
}

fn scenario_state(scenario: &SimulatedScenario, step: usize) -> Result<FactorState, DriftError> {
    if step >= scenario.grid.len() {
        return Err(DriftError::BadStep(step));
    }
    Ok(scenario.state(step))
}

/// The martingale coupling at a state: the per-injection score ratios are
/// multiplied by `slope / sqrt(n)` and by `dv` to become drift increments
/// (`u = a Σ score / (sqrt(n) slope)` and `d<M,M> = slope² dv`).
fn coupling(params: &ModelParams, state: &FactorState) -> f64 {
    params.martingale.slope(state) / (params.n() as f64).sqrt()
}

/// Sub-intervals of `(a, b]` split at the given occurrence times.
fn split_at_occurrences(a: f64, b: f64, occurrences: &[f64]) -> Vec<(f64, f64)> {
    let mut cuts: Vec<f64> = occurrences
        .iter()
        .copied()
        .filter(|&tau| tau > a && tau < b)
        .collect();
    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut out = Vec::with_capacity(cuts.len() + 1);
    let mut left = a;
    for c in cuts {
        out.push((left, c));
        left = c;
    }
    out.push((left, b));
    out
}

/// Drift of `L^g M` in `F^{τ_ρ}` along the scenario, with
/// `L^g_t = E[g(τ) | F^{τ_ρ}_t]`. For `g = 1` this is the drift of `M`
/// itself in the progressively enlarged filtration.
pub fn drift_tau_rho(
    params: &ModelParams,
    scenario: &SimulatedScenario,
    rho: &Injection,
    g: &GFunction,
    cfg: &QuadratureConfig,
) -> Result<DriftPath, DriftError> {
    let builder = QueryBuilder::new(params);
    let grid = scenario.grid.as_ref().clone();
    let occurrences: Vec<f64> = rho.images().iter().map(|&i| scenario.taus[i]).collect();
    let mut steps = Vec::with_capacity(grid.len().saturating_sub(1));
    let mut cumulative = 0.0;
    let mut total_error = 0.0;
    let mut any_flagged = false;
    for l in 1..grid.len() {
        let state = scenario.state(l - 1);
        let pieces = split_at_occurrences(grid[l - 1], grid[l], &occurrences);
        let mut increment = 0.0;
        let mut step_error = 0.0;
        let mut flagged = false;
        let mut first_term: Option<RhoTerm> = None;
        for &(a, b) in &pieces {
            let t_set: Vec<usize> = (0..rho.len())
                .filter(|&pos| scenario.taus[rho.image(pos)] <= a)
                .collect();
            let fixed: Vec<(usize, f64)> = t_set
                .iter()
                .map(|&pos| {
                    let coord = rho.image(pos);
                    (coord, scenario.taus[coord])
                })
                .collect();
            let lower: Vec<(usize, f64)> = (0..rho.len())
                .filter(|pos| !t_set.contains(pos))
                .map(|pos| (rho.image(pos), a))
                .collect();
            let num = builder.evaluate(
                &MarginalQuery::Plain {
                    state: state.clone(),
                    fixed: fixed.clone(),
                    lower: lower.clone(),
                    g: g.to_gspec(),
                    integrand: IntegrandKind::Score,
                },
                cfg,
            )?;
            let den = builder.evaluate(
                &MarginalQuery::Plain {
                    state: state.clone(),
                    fixed,
                    lower,
                    g: GSpec::One,
                    integrand: IntegrandKind::Density,
                },
                cfg,
            )?;
            let (ratio, err, zero_den) = ratio_or_zero(num, den);
            let couple = coupling(params, &state);
            increment += ratio * couple * (b - a);
            step_error += err * couple.abs() * (b - a);
            flagged |= zero_den;
            if first_term.is_none() {
                first_term = Some(RhoTerm {
                    ratio,
                    weight: 1.0,
                    error: err,
                    flagged: zero_den,
                });
            }
        }
        cumulative += increment;
        total_error += step_error;
        any_flagged |= flagged;
        steps.push(DriftStep {
            v: grid[l - 1],
            regime: active_t_set(scenario, rho, grid[l - 1], false).len(),
            per_rho: vec![first_term.expect("at least one piece")],
            increment,
            cumulative,
            error_bound: step_error,
            flagged,
        });
    }
    Ok(DriftPath {
        grid,
        steps,
        injection_labels: vec![rho.label()],
        total_error,
        any_flagged,
    })
}

/// Drift of `M` in the sorted-selection filtration `F^{τ̄_k}`: for each
/// interval, a weighted average over all injections of the ζ-restricted
/// score ratio, weighted by the `ã^ρ / ã` mass ratio.
pub fn drift_sorted(
    params: &ModelParams,
    scenario: &SimulatedScenario,
    cfg: &QuadratureConfig,
) -> Result<DriftPath, DriftError> {
    drift_sorted_impl(params, scenario, cfg, false)
}

/// Negative-control variant: the weight factor `ã^ρ / ã` is deliberately
/// replaced by 1. Exists so the statistical harness can prove it detects a
/// corrupted compensator; never correct for k < n.
pub fn drift_sorted_corrupted_weights(
    params: &ModelParams,
    scenario: &SimulatedScenario,
    cfg: &QuadratureConfig,
) -> Result<DriftPath, DriftError> {
    drift_sorted_impl(params, scenario, cfg, true)
}

fn drift_sorted_impl(
    params: &ModelParams,
    scenario: &SimulatedScenario,
    cfg: &QuadratureConfig,
    corrupt_weights: bool,
) -> Result<DriftPath, DriftError> {
    let builder = QueryBuilder::new(params);
    let config = TimeConfig::new(params.n(), scenario.k).expect("scenario k <= n");
    let injections = config.injections();
    let grid = scenario.grid.as_ref().clone();
    let occurrences: Vec<f64> = scenario.sorted_selection().to_vec();
    let mut steps = Vec::with_capacity(grid.len().saturating_sub(1));
    let mut cumulative = 0.0;
    let mut total_error = 0.0;
    let mut any_flagged = false;

    for l in 1..grid.len() {
        let state = scenario.state(l - 1);
        let couple = coupling(params, &state);
        let pieces = split_at_occurrences(grid[l - 1], grid[l], &occurrences);
        let mut increment = 0.0;
        let mut step_error = 0.0;
        let mut flagged = false;
        let mut recorded: Option<Vec<RhoTerm>> = None;
        let mut regime_at_left = 0usize;
        for (piece_idx, &(a, b)) in pieces.iter().enumerate() {
            let j = occurrences.iter().filter(|&&tau| tau <= a).count();
            if piece_idx == 0 {
                regime_at_left = j;
            }
            let prefix: Vec<f64> = occurrences[..j].to_vec();

            // Weight denominator is shared across injections.
            let weight_den = builder.evaluate(
                &MarginalQuery::Ordered {
                    state: state.clone(),
                    prefix: prefix.clone(),
                    fixing: None,
                    threshold: Some(a),
                    g: GSpec::One,
                    integrand: IntegrandKind::Density,
                },
                cfg,
            )?;

            let mut terms = Vec::with_capacity(injections.len());
            let mut piece_rate = 0.0;
            let mut piece_err = 0.0;
            for rho in injections {
                let occupied: Vec<(usize, f64)> =
                    (0..j).map(|pos| (pos, occurrences[pos])).collect();
                let zeta_num = builder.evaluate(
                    &MarginalQuery::Zeta {
                        state: state.clone(),
                        rho: rho.clone(),
                        occupied: occupied.clone(),
                        threshold: Some(a),
                        integrand: IntegrandKind::Score,
                    },
                    cfg,
                )?;
                let zeta_den = builder.evaluate(
                    &MarginalQuery::Zeta {
                        state: state.clone(),
                        rho: rho.clone(),
                        occupied,
                        threshold: Some(a),
                        integrand: IntegrandKind::Density,
                    },
                    cfg,
                )?;
                let (ratio, ratio_err, zero1) = ratio_or_zero(zeta_num, zeta_den);

                let (weight, weight_err, zero2) = if corrupt_weights {
                    (1.0, 0.0, false)
                } else {
                    let weight_num = builder.evaluate(
                        &MarginalQuery::Ordered {
                            state: state.clone(),
                            prefix: prefix.clone(),
                            fixing: Some(rho.clone()),
                            threshold: Some(a),
                            g: GSpec::One,
                            integrand: IntegrandKind::Density,
                        },
                        cfg,
                    )?;
                    ratio_or_zero(weight_num, weight_den)
                };
                debug_assert!(weight >= -1e-9, "weights are nonnegative");
                let term_err = ratio_err * weight.abs() + ratio.abs() * weight_err;
                piece_rate += ratio * weight;
                piece_err += term_err;
                flagged |= zero1 || zero2;
                terms.push(RhoTerm {
                    ratio,
                    weight,
                    error: term_err,
                    flagged: zero1 || zero2,
                });
            }
            increment += piece_rate * couple * (b - a);
            step_error += piece_err * couple.abs() * (b - a);
            if recorded.is_none() {
                recorded = Some(terms);
            }
        }
        cumulative += increment;
        total_error += step_error;
        any_flagged |= flagged;
        steps.push(DriftStep {
            v: grid[l - 1],
            regime: regime_at_left,
            per_rho: recorded.expect("at least one piece"),
            increment,
            cumulative,
            error_bound: step_error,
            flagged,
        });
    }
    Ok(DriftPath {
        grid,
        steps,
        injection_labels: injections.iter().map(Injection::label).collect(),
        total_error,
        any_flagged,
    })
}

/// Independently coded classical single-time progressive-enlargement drift
/// (`n = k = 1`), entirely in closed form: before τ the tail-ratio
/// `∫_v^∞ u / ∫_v^∞ a`, after τ the pointwise ratio `u(τ)/a(τ)`.
///
/// This is the reduction oracle: it shares no code with the quadrature
/// machinery.
pub fn classical_single_time_drift(
    params: &ModelParams,
    scenario: &SimulatedScenario,
) -> Result<DriftPath, DriftError> {
    if params.n() != 1 || scenario.k != 1 {
        return Err(DriftError::NotSingleTime {
            n: params.n(),
            k: scenario.k,
        });
    }
    let tau = scenario.taus[0];
    let c = params.coords[0];
    let grid = scenario.grid.as_ref().clone();
    let mut steps = Vec::with_capacity(grid.len().saturating_sub(1));
    let mut cumulative = 0.0;
    for l in 1..grid.len() {
        let state = scenario.state(l - 1);
        let slope = params.martingale.slope(&state);
        let m = params.cond_mean(0, state.w[0]);
        let s = params.cond_var(0, state.t).sqrt();
        let rate_at = |v: f64| -> f64 {
            if tau <= v {
                // Post-occurrence: score at the realized time.
                c.sigma * c.rho * (tau.ln() - m) / (s * s)
            } else {
                // Survival regime: hazard-like tail ratio
                // (σρ/s) φ(d) / Φ̄(d) with d = (ln v - m)/s; at v = 0 the
                // ratio is 0 (centered score over the full support).
                if v <= 0.0 {
                    return 0.0;
                }
                let d = (v.ln() - m) / s;
                c.sigma * c.rho * norm_pdf(d) / (s * norm_sf(d))
            }
        };
        let mut increment = 0.0;
        for (a, b) in split_at_occurrences(grid[l - 1], grid[l], &[tau]) {
            increment += rate_at(a) * slope * (b - a);
        }
        cumulative += increment;
        steps.push(DriftStep {
            v: grid[l - 1],
            regime: usize::from(tau <= grid[l - 1]),
            per_rho: vec![RhoTerm {
                ratio: increment / (grid[l] - grid[l - 1]).max(1e-300) / slope,
                weight: 1.0,
                error: 0.0,
                flagged: false,
            }],
            increment,
            cumulative,
            error_bound: 0.0,
            flagged: false,
        });
    }
    Ok(DriftPath {
        grid,
        steps,
        injection_labels: vec!["(1)".to_string()],
        total_error: 0.0,
        any_flagged: false,
    })
}
