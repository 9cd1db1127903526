//! Order-constrained marginalization of the product density.
//!
//! Every conditional-expectation and drift formula reduces to ratios of
//! integrals of the form "fix some coordinates, integrate the rest of the
//! density (optionally score-weighted) over an order-constrained region".
//! The product structure of the model makes these decompose coordinate by
//! coordinate:
//!
//! * unconstrained or boxed coordinates contribute closed-form masses,
//! * coordinates above an order chain contribute closed-form survival
//!   factors `S_l(y)` attached at the innermost chain variable,
//! * the chain itself (the free selected coordinates in their required
//!   order) is integrated by nested adaptive 1-d quadrature in log space
//!   when its dimension is at most two, and by stratified Monte Carlo
//!   beyond that.
//!
//! Three region shapes cover all the formulas: [`MarginalQuery::Plain`]
//! (independent lower bounds), [`MarginalQuery::Zeta`] (the
//! selection-ordered region, with any subset of the selected positions
//! pinned), and [`MarginalQuery::Ordered`] (the fully sorted region behind
//! the re-ordered vector's density, with or without a fixing injection).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combinatorics::Injection;
use crate::density_model::{FactorState, ModelError, ModelParams};
use crate::numutil::{biv_norm_cdf, integrate_adaptive_pair, norm_cdf, norm_pdf, norm_ppf, norm_sf};

#[derive(Debug, Error)]
pub enum IntegratorError {
    #[error("quadrature did not converge within the evaluation budget; best estimate {best} (error {error})")]
    NotConverged { best: f64, error: f64 },
    #[error("nonnegative integrand produced negative mass {0}")]
    NegativeMass(f64),
    #[error("invalid quadrature configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Numerical controls for [`marginalize`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadratureConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_evals: usize,
    /// Monte Carlo fallback sample count (chains of dimension three or more).
    pub mc_samples: usize,
    pub mc_strata: usize,
    pub mc_seed: u64,
    /// Evaluate one-dimensional chains with at most one survival factor in
    /// closed form (normal and bivariate-normal tails) instead of adaptive
    /// quadrature. The adaptive path remains the generic backend and the
    /// cross-validation route.
    #[serde(default = "default_true")]
    pub use_closed_forms: bool,
}

fn default_true() -> bool {
    true
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            abs_tol: 1e-12,
            rel_tol: 1e-9,
            max_evals: 200_000,
            mc_samples: 40_000,
            mc_strata: 64,
            mc_seed: 0x5eed,
            use_closed_forms: true,
        }
    }
}

impl QuadratureConfig {
    /// The same configuration with the closed-form fast path disabled;
    /// everything goes through nested adaptive quadrature.
    pub fn adaptive_only(mut self) -> Self {
        self.use_closed_forms = false;
        self
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<(), IntegratorError> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(IntegratorError::BadConfig(
                "tolerances must be positive".into(),
            ));
        }
        if self.mc_strata == 0 || self.mc_samples == 0 {
            return Err(IntegratorError::BadConfig(
                "Monte Carlo sample counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Closed-form lognormal survival `P(τ_l > y | F_t)` of one coordinate.
pub fn survival(params: &ModelParams, l: usize, y: f64, t: f64, w_l: f64) -> f64 {
    if y <= 0.0 {
        return 1.0;
    }
    let m = params.cond_mean(l, w_l);
    let s = params.cond_var(l, t).sqrt();
    norm_sf((y.ln() - m) / s)
}

/// Which function of the density is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrandKind {
    /// The density alone.
    Density,
    /// The density times the total score `Σ_i score_i` (the `u`-side
    /// integrand up to the martingale coupling, which is constant in `x`).
    Score,
}

/// Optional multiplicative test function `g`, one interval per coordinate.
#[derive(Debug, Clone)]
pub enum GSpec {
    One,
    /// Per-coordinate interval `(lo, hi]`; `hi = f64::INFINITY` allowed.
    Box(Vec<(f64, f64)>),
}

impl GSpec {
    fn interval(&self, coord: usize) -> (f64, f64) {
        match self {
            GSpec::One => (0.0, f64::INFINITY),
            GSpec::Box(b) => b[coord],
        }
    }

    fn indicator(&self, coord: usize, z: f64) -> f64 {
        let (lo, hi) = self.interval(coord);
        if z > lo && z <= hi {
            1.0
        } else {
            0.0
        }
    }
}

/// A marginalization request; see the module docs for the region shapes.
#[derive(Debug, Clone)]
pub enum MarginalQuery {
    /// `(g · integrand)_J(z)` with per-coordinate lower bounds on the free
    /// coordinates and no mutual ordering. Fully closed form.
    Plain {
        state: FactorState,
        /// Fixed coordinates `J` with their values.
        fixed: Vec<(usize, f64)>,
        /// Lower bounds for specific free coordinates (others unconstrained).
        lower: Vec<(usize, f64)>,
        g: GSpec,
        integrand: IntegrandKind,
    },
    /// The ζ_ρ-region: selected coordinates ascend in ρ-order and every
    /// unselected coordinate exceeds the largest selected one. Any subset of
    /// the selected positions may be pinned to realized values; every free
    /// selected coordinate is additionally bounded below by `threshold`.
    Zeta {
        state: FactorState,
        rho: Injection,
        /// Pinned selected positions (0-based position in 0..k, value),
        /// ascending in position.
        occupied: Vec<(usize, f64)>,
        threshold: Option<f64>,
        integrand: IntegrandKind,
    },
    /// The fully ordered region `x_1 < … < x_n` with the first `j`
    /// positions pinned to `prefix`. `fixing: None` sums the density over
    /// all permutations (the re-ordered vector's density); `Some(ρ)` keeps
    /// only the permutations fixing ρ. `threshold` bounds position `j+1`.
    Ordered {
        state: FactorState,
        prefix: Vec<f64>,
        fixing: Option<Injection>,
        threshold: Option<f64>,
        g: GSpec,
        integrand: IntegrandKind,
    },
}

/// Value and a bound on the numerical error.
#[derive(Debug, Clone, Copy)]
pub struct MarginalResult {
    pub value: f64,
    pub error: f64,
}

// Per-coordinate closed forms at a fixed state.
struct Coord<'a> {
    params: &'a ModelParams,
    state: &'a FactorState,
}

impl<'a> Coord<'a> {
    fn new(params: &'a ModelParams, state: &'a FactorState) -> Self {
        Coord { params, state }
    }

    fn mean(&self, i: usize) -> f64 {
        self.params.cond_mean(i, self.state.w[i])
    }

    fn sd(&self, i: usize) -> f64 {
        self.params.cond_var(i, self.state.t).sqrt()
    }

    fn pdf(&self, i: usize, y: f64) -> f64 {
        self.params.coord_pdf(i, self.state.t, self.state.w[i], y)
    }

    fn score(&self, i: usize, y: f64) -> f64 {
        self.params.score(i, self.state.t, self.state.w[i], y)
    }

    fn sf(&self, i: usize, y: f64) -> f64 {
        survival(self.params, i, y, self.state.t, self.state.w[i])
    }

    /// `∫_y^∞ f_i(x) score_i(x) dx = (σ_i ρ_i / s_i) φ(d_i(y))`.
    fn score_tail(&self, i: usize, y: f64) -> f64 {
        let c = self.params.coords[i];
        let s = self.sd(i);
        let d = if y <= 0.0 {
            return 0.0;
        } else {
            (y.ln() - self.mean(i)) / s
        };
        c.sigma * c.rho * norm_pdf(d) / s
    }

    fn mass(&self, i: usize, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let upper = if hi.is_finite() { self.sf(i, hi) } else { 0.0 };
        self.sf(i, lo) - upper
    }

    fn score_mass(&self, i: usize, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let upper = if hi.is_finite() {
            self.score_tail(i, hi)
        } else {
            0.0
        };
        self.score_tail(i, lo) - upper
    }

    /// Survival product of a tail set at level `y`, and its score-weighted
    /// companion `Σ_i T_i(y) Π_{j≠i} S_j(y)`.
    fn tail_pair(&self, tail: &[usize], y: f64) -> (f64, f64) {
        let mut plain = 1.0;
        for &i in tail {
            plain *= self.sf(i, y);
        }
        let mut scored = 0.0;
        for &i in tail {
            let s_i = self.sf(i, y);
            let others = if s_i > 0.0 {
                plain / s_i
            } else {
                tail.iter()
                    .filter(|&&j| j != i)
                    .map(|&j| self.sf(j, y))
                    .product()
            };
            scored += self.score_tail(i, y) * others;
        }
        (plain, scored)
    }
}

// A (plain, scored) pair with error bounds; the building block every region
// combiner multiplies together.
#[derive(Debug, Clone, Copy)]
struct Pair {
    plain: f64,
    scored: f64,
    err_plain: f64,
    err_scored: f64,
}

impl Pair {
    fn exact(plain: f64, scored: f64) -> Pair {
        Pair {
            plain,
            scored,
            err_plain: 0.0,
            err_scored: 0.0,
        }
    }
}

/// Combine independent factors: plain values multiply; scored parts add
/// with the other factors' plain values as weights.
fn combine(parts: &[Pair]) -> Pair {
    let mut plain = 1.0;
    for p in parts {
        plain *= p.plain;
    }
    let mut scored = 0.0;
    let mut err_plain = 0.0;
    let mut err_scored = 0.0;
    for (idx, p) in parts.iter().enumerate() {
        let others: f64 = parts
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != idx)
            .map(|(_, q)| q.plain)
            .product();
        scored += p.scored * others;
        err_plain += p.err_plain * others.abs();
        err_scored += p.err_scored * others.abs() + p.scored.abs() * err_plain_of_others(parts, idx);
    }
    Pair {
        plain,
        scored,
        err_plain,
        err_scored,
    }
}

fn err_plain_of_others(parts: &[Pair], skip: usize) -> f64 {
    parts
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != skip)
        .map(|(_, q)| q.err_plain)
        .sum()
}

// Nested adaptive chain integration in log space.
struct ChainIntegrator<'a> {
    coord: &'a Coord<'a>,
    cfg: &'a QuadratureConfig,
}

impl<'a> ChainIntegrator<'a> {
    /// `∫_{lo < y_1 < … < y_m < hi} Π_l f_{chain[l]}(y_l) Π_{i∈tail} S_i(y_m) dy`
    /// together with the score-weighted version (scores of chain and tail
    /// coordinates). `tail` attaches at the innermost (largest) variable.
    fn integrate(
        &self,
        chain: &[usize],
        lo: f64,
        hi: f64,
        tail: &[usize],
    ) -> Result<Pair, IntegratorError> {
        assert!(!chain.is_empty());
        // The innermost chain coordinate with no tail above it integrates
        // to its own survival factor; fold it so the chain is as short as
        // possible before dispatching.
        if tail.is_empty() && chain.len() >= 2 && hi.is_infinite() {
            let folded_tail = [chain[chain.len() - 1]];
            return self.integrate(&chain[..chain.len() - 1], lo, hi, &folded_tail);
        }
        if self.cfg.use_closed_forms && chain.len() == 1 {
            if tail.is_empty() {
                let c = chain[0];
                return Ok(Pair {
                    plain: self.coord.mass(c, lo, hi),
                    scored: self.coord.score_mass(c, lo, hi),
                    err_plain: 1e-14,
                    err_scored: 1e-14,
                });
            }
            if tail.len() == 1 && hi.is_infinite() {
                if let Some(pair) = self.closed_single_with_tail(chain[0], tail[0], lo) {
                    return Ok(pair);
                }
            }
        }
        let head = chain[0];
        let rest = &chain[1..];
        let m = self.coord.mean(head);
        let s = self.coord.sd(head);
        let lx_lo = if lo > 0.0 {
            lo.ln().max(m - 8.5 * s)
        } else {
            m - 8.5 * s
        };
        let mut lx_hi = if hi.is_finite() {
            hi.ln().min(m + 8.5 * s)
        } else {
            m + 8.5 * s
        };
        // Keep a live window when the lower bound sits beyond the bulk.
        if lx_lo >= lx_hi {
            if hi.is_finite() && hi.ln() <= lx_lo {
                return Ok(Pair::exact(0.0, 0.0));
            }
            lx_hi = lx_lo + 12.0 * s;
        }

        let mut inner_err: f64 = 0.0;
        let mut inner_bad = false;
        let mut f = |x: f64| -> (f64, f64) {
            let y = x.exp();
            // Lognormal density in log space: Gaussian.
            let lp = norm_pdf((x - m) / s) / s;
            let (inner_plain, inner_scored) = if rest.is_empty() {
                self.coord.tail_pair(tail, y)
            } else {
                match self.integrate(rest, y, hi, tail) {
                    Ok(pair) => {
                        inner_err = inner_err.max(pair.err_plain.max(pair.err_scored));
                        (pair.plain, pair.scored)
                    }
                    Err(IntegratorError::NotConverged { best, error }) => {
                        inner_bad = true;
                        inner_err = inner_err.max(error);
                        (best, best)
                    }
                    Err(_) => {
                        inner_bad = true;
                        (0.0, 0.0)
                    }
                }
            };
            let plain = lp * inner_plain;
            let scored = lp * (self.coord.score(head, y) * inner_plain + inner_scored);
            (plain, scored)
        };
        let (p, q) = integrate_adaptive_pair(
            &mut f,
            lx_lo,
            lx_hi,
            self.cfg.abs_tol,
            self.cfg.rel_tol,
            self.cfg.max_evals,
        );
        let pair = Pair {
            plain: p.value,
            scored: q.value,
            err_plain: p.error_estimate + inner_err,
            err_scored: q.error_estimate + inner_err,
        };
        if !p.converged || !q.converged || inner_bad {
            return Err(IntegratorError::NotConverged {
                best: pair.plain,
                error: pair.err_plain,
            });
        }
        Ok(pair)
    }

    /// Closed form for `∫_lo^∞ f_c(y) S_o(y) dy` and its score companion:
    /// in the Gaussian substitution `z = (ln y - m_c)/s_c` the integrand is
    /// `φ(z) Φ̄(α + βz)`, a bivariate-normal orthant slice. Returns `None`
    /// when the slope β puts the implied correlation outside the reliable
    /// range of the single-integral bivariate CDF.
    fn closed_single_with_tail(&self, c: usize, o: usize, lo: f64) -> Option<Pair> {
        let m_c = self.coord.mean(c);
        let s_c = self.coord.sd(c);
        let m_o = self.coord.mean(o);
        let s_o = self.coord.sd(o);
        let alpha = (m_c - m_o) / s_o;
        let beta = s_c / s_o;
        let root = (1.0 + beta * beta).sqrt();
        let r = -beta / root;
        if r.abs() > 0.92 {
            return None;
        }
        let d = if lo > 0.0 {
            ((lo.ln() - m_c) / s_c).max(-38.0)
        } else {
            -38.0
        };
        // P(Z > d, W > α + βZ) with independent standard normals Z, W.
        let plain = biv_norm_cdf(-d, -alpha / root, r);
        // G = ∫_d^∞ φ(z) φ(α + βz) dz, shared by both score terms.
        let g_val = norm_pdf(alpha / root) * norm_sf(root * (d + alpha * beta / (root * root)))
            / root;
        let cc = self.coord.params.coords[c];
        let co = self.coord.params.coords[o];
        let chain_score = cc.sigma * cc.rho / s_c
            * (norm_pdf(d) * norm_cdf(-alpha - beta * d) - beta * g_val);
        let tail_score = co.sigma * co.rho / s_o * g_val;
        Some(Pair {
            plain,
            scored: chain_score + tail_score,
            err_plain: 1e-13 * (plain.abs() + 1e-30),
            err_scored: 1e-13 * ((chain_score + tail_score).abs() + 1e-30),
        })
    }
}

/// Evaluate a marginalization request against the model.
pub fn marginalize(
    params: &ModelParams,
    query: &MarginalQuery,
    cfg: &QuadratureConfig,
) -> Result<MarginalResult, IntegratorError> {
    QueryBuilder::new(params).evaluate(query, cfg)
}

/// Monte Carlo evaluation of the chain-bearing queries; the independent
/// cross-check of the quadrature path and the fallback for chains of
/// dimension three and beyond.
pub fn marginalize_mc(
    params: &ModelParams,
    query: &MarginalQuery,
    cfg: &QuadratureConfig,
) -> Result<MarginalResult, IntegratorError> {
    QueryBuilder::new(params).evaluate_mc(query, cfg)
}

fn finish(query: &MarginalQuery, pair: Pair) -> Result<MarginalResult, IntegratorError> {
    let integrand = match query {
        MarginalQuery::Plain { integrand, .. }
        | MarginalQuery::Zeta { integrand, .. }
        | MarginalQuery::Ordered { integrand, .. } => *integrand,
    };
    let (value, error) = match integrand {
        IntegrandKind::Density => (pair.plain, pair.err_plain),
        IntegrandKind::Score => (pair.scored, pair.err_scored),
    };
    if integrand == IntegrandKind::Density && value < -(error + 1e-12) {
        return Err(IntegratorError::NegativeMass(value));
    }
    Ok(MarginalResult {
        value: value.max(if integrand == IntegrandKind::Density {
            0.0
        } else {
            value
        }),
        error,
    })
}

fn plain_pair(
    params: &ModelParams,
    state: &FactorState,
    fixed: &[(usize, f64)],
    lower: &[(usize, f64)],
    g: &GSpec,
) -> Result<Pair, IntegratorError> {
    let coord = Coord::new(params, state);
    let n = params.n();
    let mut parts: Vec<Pair> = Vec::with_capacity(n);
    let fixed_set: Vec<usize> = fixed.iter().map(|&(i, _)| i).collect();
    for &(i, z) in fixed {
        let f = coord.pdf(i, z) * g.indicator(i, z);
        parts.push(Pair::exact(f, f * coord.score(i, z)));
    }
    for i in 0..n {
        if fixed_set.contains(&i) {
            continue;
        }
        let bound = lower
            .iter()
            .find(|&&(j, _)| j == i)
            .map(|&(_, b)| b)
            .unwrap_or(0.0);
        let (g_lo, g_hi) = g.interval(i);
        let lo = bound.max(g_lo);
        parts.push(Pair::exact(
            coord.mass(i, lo, g_hi),
            coord.score_mass(i, lo, g_hi),
        ));
    }
    Ok(combine(&parts))
}

#[allow(clippy::too_many_arguments)]
fn zeta_pair(
    params: &ModelParams,
    state: &FactorState,
    rho: &Injection,
    occupied: &[(usize, f64)],
    threshold: Option<f64>,
    cfg: &QuadratureConfig,
    use_mc: bool,
) -> Result<Pair, IntegratorError> {
    let coord = Coord::new(params, state);
    let k = rho.len();
    let n = params.n();
    let thr = threshold.unwrap_or(0.0);

    // Pinned values must ascend along the selection order, else the region
    // is empty.
    let mut prev = 0.0;
    for &(pos, z) in occupied {
        debug_assert!(pos < k);
        if z <= prev && prev > 0.0 {
            return Ok(Pair::exact(0.0, 0.0));
        }
        prev = z;
    }
    let unselected = rho.complement(n);

    let mut parts: Vec<Pair> = Vec::new();
    // Fixed selected coordinates.
    for &(pos, z) in occupied {
        let i = rho.image(pos);
        let f = coord.pdf(i, z);
        parts.push(Pair::exact(f, f * coord.score(i, z)));
    }

    // Segments of free selected positions between pinned ones.
    let occupied_pos: Vec<usize> = occupied.iter().map(|&(p, _)| p).collect();
    let mut segments: Vec<(Vec<usize>, f64, f64)> = Vec::new(); // (density ids, lo, hi)
    let mut pos = 0usize;
    while pos < k {
        if occupied_pos.contains(&pos) {
            pos += 1;
            continue;
        }
        let start = pos;
        while pos < k && !occupied_pos.contains(&pos) {
            pos += 1;
        }
        let chain: Vec<usize> = (start..pos).map(|p| rho.image(p)).collect();
        let lo_bound = if start == 0 {
            0.0
        } else {
            occupied
                .iter()
                .find(|&&(p, _)| p == start - 1)
                .map(|&(_, z)| z)
                .unwrap_or(0.0)
        };
        let hi_bound = occupied
            .iter()
            .find(|&&(p, _)| p == pos)
            .map(|&(_, z)| z)
            .unwrap_or(f64::INFINITY);
        segments.push((chain, lo_bound.max(thr), hi_bound));
    }

    // The unselected tail attaches to the largest selected coordinate: the
    // final segment if it is free, else the last pinned value.
    let last_is_free = !occupied_pos.contains(&(k - 1)) && k > 0;
    let integrator = ChainIntegrator {
        coord: &coord,
        cfg,
    };
    for (idx, (chain, lo, hi)) in segments.iter().enumerate() {
        let is_final = idx == segments.len() - 1 && last_is_free;
        let tail: &[usize] = if is_final { &unselected } else { &[] };
        let pair = if use_mc || chain.len() > 2 {
            chain_mc(&coord, cfg, chain, *lo, *hi, tail)?
        } else {
            integrator.integrate(chain, *lo, *hi, tail)?
        };
        parts.push(pair);
    }
    if !last_is_free {
        let z_last = occupied
            .iter()
            .rev()
            .find(|&&(p, _)| p == k - 1)
            .map(|&(_, z)| z)
            .expect("last position pinned");
        let (plain, scored) = coord.tail_pair(&unselected, z_last);
        parts.push(Pair::exact(plain, scored));
    }
    Ok(combine(&parts))
}

fn ordered_pair(
    params: &ModelParams,
    state: &FactorState,
    prefix: &[f64],
    fixing: Option<&Injection>,
    threshold: Option<f64>,
    g: &GSpec,
    cfg: &QuadratureConfig,
) -> Result<Pair, IntegratorError> {
    let coord = Coord::new(params, state);
    let n = params.n();
    let j = prefix.len();
    if prefix.windows(2).any(|w| w[0] >= w[1]) {
        return Ok(Pair::exact(0.0, 0.0));
    }
    let z_last = prefix.last().copied().unwrap_or(0.0);
    let lower = z_last.max(threshold.unwrap_or(0.0));

    match fixing {
        None => {
            // Sum over injections σ assigning densities to the pinned
            // positions; the remaining coordinates integrate as a box above
            // `lower` (orderings of a common-bound chain sum to the box).
            let sigmas = injections_into(j, n);
            let mut total = Pair::exact(0.0, 0.0);
            for sigma in &sigmas {
                let mut parts: Vec<Pair> = Vec::with_capacity(n);
                for (pos, &i) in sigma.iter().enumerate() {
                    let z = prefix[pos];
                    let f = coord.pdf(i, z) * g.indicator(i, z);
                    parts.push(Pair::exact(f, f * coord.score(i, z)));
                }
                for i in 0..n {
                    if sigma.contains(&i) {
                        continue;
                    }
                    let (g_lo, g_hi) = g.interval(i);
                    let lo = lower.max(g_lo);
                    parts.push(Pair::exact(
                        coord.mass(i, lo, g_hi),
                        coord.score_mass(i, lo, g_hi),
                    ));
                }
                let term = combine(&parts);
                total.plain += term.plain;
                total.scored += term.scored;
            }
            Ok(total)
        }
        Some(rho) => {
            // Positions 1..j are pinned with densities ρ(1..j); the chain
            // continues through ρ(j+1..k); the unselected coordinates sum
            // over their orderings into survival factors.
            assert!(
                matches!(g, GSpec::One),
                "fixing-injection ordered queries take g = 1"
            );
            let k = rho.len();
            assert!(j <= k, "prefix cannot exceed the selection size");
            let unselected = rho.complement(n);
            let mut parts: Vec<Pair> = Vec::new();
            for (pos, &z) in prefix.iter().enumerate() {
                let i = rho.image(pos);
                let f = coord.pdf(i, z);
                parts.push(Pair::exact(f, f * coord.score(i, z)));
            }
            if j < k {
                let chain: Vec<usize> = (j..k).map(|p| rho.image(p)).collect();
                let integrator = ChainIntegrator {
                    coord: &coord,
                    cfg,
                };
                let pair = if chain.len() > 2 {
                    chain_mc(&coord, cfg, &chain, lower, f64::INFINITY, &unselected)?
                } else {
                    integrator.integrate(&chain, lower, f64::INFINITY, &unselected)?
                };
                parts.push(pair);
            } else {
                // Every selected position pinned: the threshold now bounds
                // the first unselected position.
                let (plain, scored) = coord.tail_pair(&unselected, lower);
                parts.push(Pair::exact(plain, scored));
            }
            Ok(combine(&parts))
        }
    }
}

/// All injections `{1..j} → {1..n}` as 0-based image vectors (lex order).
fn injections_into(j: usize, n: usize) -> Vec<Vec<usize>> {
    if j == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(j);
    let mut used = vec![false; n];
    fn rec(j: usize, n: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == j {
            out.push(cur.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(j, n, cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    rec(j, n, &mut current, &mut used, &mut out);
    out
}

/// Stratified Monte Carlo for an ordered chain with survival tail: sample
/// each chain coordinate from its own lognormal, keep the ordering
/// indicator, and attach the closed-form tail at the innermost draw.
fn chain_mc(
    coord: &Coord,
    cfg: &QuadratureConfig,
    chain: &[usize],
    lo: f64,
    hi: f64,
    tail: &[usize],
) -> Result<Pair, IntegratorError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.mc_seed);
    let strata = cfg.mc_strata;
    let samples = cfg.mc_samples.div_ceil(strata) * strata;
    let per = samples / strata;
    let mut sum = Pair::exact(0.0, 0.0);
    let mut sum_sq = (0.0f64, 0.0f64);
    for stratum in 0..strata {
        for _ in 0..per {
            // First chain coordinate stratified through its quantiles.
            let u: f64 = (stratum as f64 + rng.gen::<f64>()) / strata as f64;
            let i0 = chain[0];
            let y0 = (coord.mean(i0) + coord.sd(i0) * norm_ppf(u.clamp(1e-12, 1.0 - 1e-12))).exp();
            let mut ys = vec![y0];
            for &i in &chain[1..] {
                let z: f64 = rng.sample(StandardNormal);
                ys.push((coord.mean(i) + coord.sd(i) * z).exp());
            }
            let ordered = ys.windows(2).all(|w| w[0] < w[1])
                && ys[0] > lo
                && *ys.last().unwrap() < hi;
            if !ordered {
                continue;
            }
            let y_last = *ys.last().unwrap();
            let (tail_plain, tail_scored) = coord.tail_pair(tail, y_last);
            let chain_score: f64 = chain
                .iter()
                .zip(&ys)
                .map(|(&i, &y)| coord.score(i, y))
                .sum();
            sum.plain += tail_plain;
            sum.scored += chain_score * tail_plain + tail_scored;
            sum_sq.0 += tail_plain * tail_plain;
            sum_sq.1 += (chain_score * tail_plain + tail_scored).powi(2);
        }
    }
    let npf = samples as f64;
    let mean_plain = sum.plain / npf;
    let mean_scored = sum.scored / npf;
    let se_plain = ((sum_sq.0 / npf - mean_plain * mean_plain).max(0.0) / npf).sqrt();
    let se_scored = ((sum_sq.1 / npf - mean_scored * mean_scored).max(0.0) / npf).sqrt();
    Ok(Pair {
        plain: mean_plain,
        scored: mean_scored,
        err_plain: 3.0 * se_plain,
        err_scored: 3.0 * se_scored,
    })
}

fn ordered_fixing_mc(
    params: &ModelParams,
    state: &FactorState,
    prefix: &[f64],
    rho: &Injection,
    threshold: Option<f64>,
    cfg: &QuadratureConfig,
) -> Result<Pair, IntegratorError> {
    let coord = Coord::new(params, state);
    let n = params.n();
    let j = prefix.len();
    let k = rho.len();
    if prefix.windows(2).any(|w| w[0] >= w[1]) {
        return Ok(Pair::exact(0.0, 0.0));
    }
    let z_last = prefix.last().copied().unwrap_or(0.0);
    let lower = z_last.max(threshold.unwrap_or(0.0));
    let unselected = rho.complement(n);
    let mut parts: Vec<Pair> = Vec::new();
    for (pos, &z) in prefix.iter().enumerate() {
        let i = rho.image(pos);
        let f = coord.pdf(i, z);
        parts.push(Pair::exact(f, f * coord.score(i, z)));
    }
    if j < k {
        let chain: Vec<usize> = (j..k).map(|p| rho.image(p)).collect();
        parts.push(chain_mc(
            &coord,
            cfg,
            &chain,
            lower,
            f64::INFINITY,
            &unselected,
        )?);
    } else {
        let (plain, scored) = coord.tail_pair(&unselected, lower);
        parts.push(Pair::exact(plain, scored));
    }
    Ok(combine(&parts))
}

/// Builder carrying the model so query construction sites stay terse and
/// params/state coherence is enforced in one place.
pub struct QueryBuilder<'a> {
    pub params: &'a ModelParams,
}

impl<'a> QueryBuilder<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        QueryBuilder { params }
    }

    pub fn evaluate(
        &self,
        query: &MarginalQuery,
        cfg: &QuadratureConfig,
    ) -> Result<MarginalResult, IntegratorError> {
        self.eval_inner(query, cfg, false)
    }

    pub fn evaluate_mc(
        &self,
        query: &MarginalQuery,
        cfg: &QuadratureConfig,
    ) -> Result<MarginalResult, IntegratorError> {
        self.eval_inner(query, cfg, true)
    }

    /// Evaluate both integrand kinds of a query in one quadrature pass:
    /// `(density integral, score-weighted integral)`. The query's own
    /// integrand field is ignored.
    pub fn evaluate_both(
        &self,
        query: &MarginalQuery,
        cfg: &QuadratureConfig,
    ) -> Result<(MarginalResult, MarginalResult), IntegratorError> {
        cfg.validate()?;
        let pair = self.raw_pair(query, cfg, false)?;
        let density = MarginalResult {
            value: pair.plain.max(0.0),
            error: pair.err_plain,
        };
        if pair.plain < -(pair.err_plain + 1e-12) {
            return Err(IntegratorError::NegativeMass(pair.plain));
        }
        let score = MarginalResult {
            value: pair.scored,
            error: pair.err_scored,
        };
        Ok((density, score))
    }

    fn eval_inner(
        &self,
        query: &MarginalQuery,
        cfg: &QuadratureConfig,
        mc: bool,
    ) -> Result<MarginalResult, IntegratorError> {
        cfg.validate()?;
        let pair = self.raw_pair(query, cfg, mc)?;
        finish(query, pair)
    }

    fn raw_pair(
        &self,
        query: &MarginalQuery,
        cfg: &QuadratureConfig,
        mc: bool,
    ) -> Result<Pair, IntegratorError> {
        let pair = match query {
            MarginalQuery::Plain {
                state,
                fixed,
                lower,
                g,
                ..
            } => plain_pair(self.params, state, fixed, lower, g)?,
            MarginalQuery::Zeta {
                state,
                rho,
                occupied,
                threshold,
                ..
            } => zeta_pair(self.params, state, rho, occupied, *threshold, cfg, mc)?,
            MarginalQuery::Ordered {
                state,
                prefix,
                fixing,
                threshold,
                g,
                ..
            } => {
                if mc && fixing.is_some() {
                    ordered_fixing_mc(
                        self.params,
                        state,
                        prefix,
                        fixing.as_ref().unwrap(),
                        *threshold,
                        cfg,
                    )?
                } else {
                    ordered_pair(self.params, state, prefix, fixing.as_ref(), *threshold, g, cfg)?
                }
            }
        };
        Ok(pair)
    }
}
