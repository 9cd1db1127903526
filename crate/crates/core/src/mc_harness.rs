//! Statistical verification that a computed drift compensates the base
//! martingale.
//!
//! Scenarios are simulated in per-path RNG streams, each path's drift is
//! accumulated on the grid, and the compensated process `X = M - drift` is
//! tested for the martingale property: within every bin built from
//! enlarged-filtration information at the earlier checkpoint (martingale
//! value quantiles × occurrence regime × occurred-time quantiles), the mean
//! of `X_t - X_s` must be statistically zero. Multiplicity across bins and
//! checkpoints is handled by a Šidák correction, so the report's pass/fail
//! is a family-wise statement.
//!
//! A drift producer of `Zero` turns the same machinery into the negative
//! control: with correlated times the uncompensated martingale must fail.

use rayon::prelude::*;
use serde::Serialize;

use crate::combinatorics::Injection;
use crate::density_model::{
    density, simulate, uniform_grid, FactorState, ModelParams, SimulatedScenario,
};
use crate::drift_engine::{
    drift_sorted, drift_sorted_corrupted_weights, drift_tau_rho, DriftError, GFunction,
};
use crate::marginal_integrator::QuadratureConfig;
use crate::numutil::norm_ppf;

/// Which compensator the harness subtracts from the base martingale.
#[derive(Debug, Clone)]
pub enum DriftProducer {
    /// No compensation: the negative control.
    Zero,
    /// The sorted-selection drift.
    Sorted,
    /// The sorted-selection drift with the weight factor forced to 1; a
    /// deliberately corrupted compensator for detectability checks.
    SortedCorruptedWeights,
    /// The per-injection drift in `F^{τ_ρ}`.
    TauRho(Injection),
}

/// Configuration of the binned martingale test.
#[derive(Debug, Clone, Serialize)]
pub struct MartingaleTestConfig {
    pub n_paths: usize,
    pub grid_steps: usize,
    /// Checkpoint pairs as fractions of the horizon, `s < t`.
    pub checkpoints: Vec<(f64, f64)>,
    /// Quantile bins of the martingale value at `s`.
    pub martingale_bins: usize,
    /// Quantile bins of the first occurred time within each regime.
    pub occurred_time_bins: usize,
    /// Family-wise significance level (Šidák-corrected across bins).
    pub significance: f64,
    /// Bins below this count are merged into their neighbours.
    pub min_bin_count: usize,
    pub master_seed: u64,
}

impl Default for MartingaleTestConfig {
    fn default() -> Self {
        MartingaleTestConfig {
            n_paths: 20_000,
            grid_steps: 200,
            checkpoints: vec![(0.25, 0.75)],
            martingale_bins: 5,
            occurred_time_bins: 3,
            significance: 0.01,
            min_bin_count: 200,
            master_seed: 1,
        }
    }
}

/// One tested bin.
#[derive(Debug, Clone, Serialize)]
pub struct BinStat {
    pub checkpoint: usize,
    pub regime: usize,
    /// Martingale-value bin index; `usize::MAX` marks a merged bucket.
    pub m_bin: usize,
    /// Occurred-time bin index within the regime.
    pub tau_bin: usize,
    pub count: usize,
    pub mean_increment: f64,
    pub std_error: f64,
    pub z: f64,
}

/// Outcome of a martingale test; reproducible from the recorded metadata.
#[derive(Debug, Clone, Serialize)]
pub struct TestReport {
    pub bins: Vec<BinStat>,
    pub max_abs_z: f64,
    pub z_threshold: f64,
    pub n_tests: usize,
    pub pass: bool,
    pub n_paths: usize,
    pub grid_steps: usize,
    pub master_seed: u64,
    pub flagged_paths: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error("bin merging collapsed all data below the minimum bin count")]
    NoUsableBins,
}

// Per-path observations at one checkpoint pair.
struct PathObs {
    x_increment: f64,
    m_at_s: f64,
    regime: usize,
    first_occurred: Option<f64>,
    flagged: bool,
}

fn occurrence_times(scenario: &SimulatedScenario, producer: &DriftProducer) -> Vec<f64> {
    match producer {
        DriftProducer::TauRho(rho) => {
            let mut ts: Vec<f64> = rho.images().iter().map(|&i| scenario.taus[i]).collect();
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ts
        }
        _ => scenario.sorted_selection().to_vec(),
    }
}

/// Run the binned martingale test of `M - drift` for the chosen producer.
pub fn martingale_test(
    params: &ModelParams,
    k: usize,
    producer: &DriftProducer,
    quad: &QuadratureConfig,
    cfg: &MartingaleTestConfig,
) -> Result<TestReport, HarnessError> {
    let grid = uniform_grid(params.t_max, cfg.grid_steps);
    let checkpoints: Vec<(usize, usize)> = cfg
        .checkpoints
        .iter()
        .map(|&(fs, ft)| {
            let s = ((fs * cfg.grid_steps as f64).round() as usize).min(cfg.grid_steps - 1);
            let t = ((ft * cfg.grid_steps as f64).round() as usize).min(cfg.grid_steps);
            (s, t.max(s + 1))
        })
        .collect();

    let per_path: Vec<Result<Vec<PathObs>, DriftError>> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|path_index| {
            let scenario = simulate(params, k, &grid, cfg.master_seed, path_index);
            let (cumulative, flagged): (Vec<f64>, bool) = match producer {
                DriftProducer::Zero => (vec![0.0; grid.len()], false),
                DriftProducer::Sorted => {
                    let d = drift_sorted(params, &scenario, quad)?;
                    ((0..grid.len()).map(|i| d.cumulative_at(i)).collect(), d.any_flagged)
                }
                DriftProducer::SortedCorruptedWeights => {
                    let d = drift_sorted_corrupted_weights(params, &scenario, quad)?;
                    ((0..grid.len()).map(|i| d.cumulative_at(i)).collect(), d.any_flagged)
                }
                DriftProducer::TauRho(rho) => {
                    let d = drift_tau_rho(params, &scenario, rho, &GFunction::One, quad)?;
                    ((0..grid.len()).map(|i| d.cumulative_at(i)).collect(), d.any_flagged)
                }
            };
            let occurred = occurrence_times(&scenario, producer);
            let obs = checkpoints
                .iter()
                .map(|&(s, t)| {
                    let state_s = scenario.state(s);
                    let state_t = scenario.state(t);
                    let m_s = params.martingale.value(&state_s);
                    let m_t = params.martingale.value(&state_t);
                    let x_inc = (m_t - cumulative[t]) - (m_s - cumulative[s]);
                    let v_s = grid[s];
                    let regime = occurred.iter().filter(|&&tau| tau <= v_s).count();
                    let first_occurred = if regime > 0 { Some(occurred[0]) } else { None };
                    PathObs {
                        x_increment: x_inc,
                        m_at_s: m_s,
                        regime,
                        first_occurred,
                        flagged,
                    }
                })
                .collect();
            Ok(obs)
        })
        .collect();

    let mut observations: Vec<Vec<PathObs>> = Vec::with_capacity(cfg.n_paths);
    let mut flagged_paths = 0usize;
    for r in per_path {
        let obs = r?;
        if obs.iter().any(|o| o.flagged) {
            flagged_paths += 1;
        }
        observations.push(obs);
    }

    // Aggregate sequentially, checkpoint by checkpoint.
    let mut bins: Vec<BinStat> = Vec::new();
    for (ck_idx, _) in checkpoints.iter().enumerate() {
        let rows: Vec<&PathObs> = observations.iter().map(|per| &per[ck_idx]).collect();
        bin_checkpoint(ck_idx, &rows, cfg, &mut bins);
    }
    if bins.is_empty() {
        return Err(HarnessError::NoUsableBins);
    }

    let n_tests = bins.len();
    let per_test_alpha = 1.0 - (1.0 - cfg.significance).powf(1.0 / n_tests as f64);
    let z_threshold = -norm_ppf(per_test_alpha / 2.0);
    let max_abs_z = bins.iter().map(|b| b.z.abs()).fold(0.0, f64::max);
    Ok(TestReport {
        pass: max_abs_z <= z_threshold,
        bins,
        max_abs_z,
        z_threshold,
        n_tests,
        n_paths: cfg.n_paths,
        grid_steps: cfg.grid_steps,
        master_seed: cfg.master_seed,
        flagged_paths,
    })
}

fn quantile_edges(values: &mut [f64], bins: usize) -> Vec<f64> {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (1..bins)
        .map(|q| values[(q * values.len() / bins).min(values.len() - 1)])
        .collect()
}

fn bin_of(edges: &[f64], value: f64) -> usize {
    edges.iter().filter(|&&e| value > e).count()
}

fn bin_checkpoint(ck_idx: usize, rows: &[&PathObs], cfg: &MartingaleTestConfig, out: &mut Vec<BinStat>) {
    // Regime strata first; within each, quantile bins of M_s and of the
    // first occurred time (single bucket when nothing occurred).
    let regimes: Vec<usize> = {
        let mut r: Vec<usize> = rows.iter().map(|o| o.regime).collect();
        r.sort_unstable();
        r.dedup();
        r
    };
    for regime in regimes {
        let stratum: Vec<&&PathObs> = rows.iter().filter(|o| o.regime == regime).collect();
        if stratum.is_empty() {
            continue;
        }
        let mut m_values: Vec<f64> = stratum.iter().map(|o| o.m_at_s).collect();
        let m_edges = quantile_edges(&mut m_values, cfg.martingale_bins.max(1));
        let tau_edges = if regime > 0 && cfg.occurred_time_bins > 1 {
            let mut taus: Vec<f64> = stratum
                .iter()
                .filter_map(|o| o.first_occurred)
                .collect();
            if taus.is_empty() {
                Vec::new()
            } else {
                quantile_edges(&mut taus, cfg.occurred_time_bins)
            }
        } else {
            Vec::new()
        };

        // Group: (m_bin, tau_bin) -> welford accumulators.
        let n_m = cfg.martingale_bins.max(1);
        let n_tau = tau_edges.len() + 1;
        let mut acc = vec![(0usize, 0.0f64, 0.0f64); n_m * n_tau];
        for obs in &stratum {
            let mb = bin_of(&m_edges, obs.m_at_s);
            let tb = obs
                .first_occurred
                .map(|tau| bin_of(&tau_edges, tau))
                .unwrap_or(0);
            let slot = &mut acc[mb * n_tau + tb];
            slot.0 += 1;
            slot.1 += obs.x_increment;
            slot.2 += obs.x_increment * obs.x_increment;
        }

        // Merge undersized bins into a regime-level bucket.
        let mut merged = (0usize, 0.0f64, 0.0f64);
        for mb in 0..n_m {
            for tb in 0..n_tau {
                let (count, sum, sum_sq) = acc[mb * n_tau + tb];
                if count == 0 {
                    continue;
                }
                if count < cfg.min_bin_count {
                    merged.0 += count;
                    merged.1 += sum;
                    merged.2 += sum_sq;
                } else {
                    push_bin(out, ck_idx, regime, mb, tb, count, sum, sum_sq);
                }
            }
        }
        if merged.0 >= cfg.min_bin_count.min(50) && merged.0 > 1 {
            push_bin(
                out,
                ck_idx,
                regime,
                usize::MAX,
                usize::MAX,
                merged.0,
                merged.1,
                merged.2,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn push_bin(
    out: &mut Vec<BinStat>,
    checkpoint: usize,
    regime: usize,
    m_bin: usize,
    tau_bin: usize,
    count: usize,
    sum: f64,
    sum_sq: f64,
) {
    let n = count as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    let std_error = (var / n).sqrt();
    let z = if std_error > 0.0 { mean / std_error } else { 0.0 };
    out.push(BinStat {
        checkpoint,
        regime,
        m_bin,
        tau_bin,
        count,
        mean_increment: mean,
        std_error,
        z,
    });
}

/// Report of the density-martingale check `E[a_t(x) | F_s] = a_s(x)`.
#[derive(Debug, Clone, Serialize)]
pub struct DensityMartingaleReport {
    pub points: Vec<DensityMartingalePoint>,
    pub max_abs_z: f64,
    pub z_threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityMartingalePoint {
    pub x: Vec<f64>,
    pub a_s: f64,
    pub mc_mean: f64,
    pub mc_std_error: f64,
    pub z: f64,
}

/// Test the martingale property of `t ↦ a_t(x)` at randomized points by
/// simulating factor increments from `s` to `t`. With `corrupt_variance`
/// the conditional variance is deliberately mis-specified (`σ²(1-t)`
/// instead of `σ²(1-ρ²t)`), the negative control that must fail.
pub fn density_martingale_test(
    params: &ModelParams,
    n_points: usize,
    n_paths: usize,
    s_frac: f64,
    t_frac: f64,
    corrupt_variance: bool,
    master_seed: u64,
) -> DensityMartingaleReport {
    use rand::Rng;
    use rand_distr::StandardNormal;

    let n = params.n();
    let s_time = s_frac * params.t_max;
    let t_time = t_frac * params.t_max;
    let eval = |state: &FactorState, x: &[f64]| -> f64 {
        if corrupt_variance {
            let mut a = 1.0;
            for i in 0..n {
                let c = params.coords[i];
                let m = params.cond_mean(i, state.w[i]);
                let s2 = c.sigma * c.sigma * (1.0 - state.t);
                let z = (x[i].ln() - m) / s2.sqrt();
                a *= crate::numutil::norm_pdf(z) / (x[i] * s2.sqrt());
            }
            a
        } else {
            density(params, state, x).map(|e| e.a).unwrap_or(0.0)
        }
    };

    let mut points = Vec::with_capacity(n_points);
    let mut max_abs_z: f64 = 0.0;
    for point_idx in 0..n_points {
        let mut rng = crate::density_model::path_rng(master_seed, 1_000_000 + point_idx as u64);
        // Random evaluation point and a random factor state at s.
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let c = params.coords[i];
                (c.mu + c.sigma * rng.gen_range(-1.5..1.5)).exp()
            })
            .collect();
        let w_s: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                s_time.sqrt() * z
            })
            .collect();
        let state_s = FactorState {
            t: s_time,
            w: w_s.clone(),
        };
        let a_s = eval(&state_s, &x);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n_paths {
            let w_t: Vec<f64> = (0..n)
                .map(|i| {
                    let z: f64 = rng.sample(StandardNormal);
                    w_s[i] + (t_time - s_time).sqrt() * z
                })
                .collect();
            let a_t = eval(
                &FactorState {
                    t: t_time,
                    w: w_t,
                },
                &x,
            );
            sum += a_t;
            sum_sq += a_t * a_t;
        }
        let mean = sum / n_paths as f64;
        let var = (sum_sq / n_paths as f64 - mean * mean).max(0.0);
        let se = (var / n_paths as f64).sqrt();
        let z = if se > 0.0 { (mean - a_s) / se } else { 0.0 };
        max_abs_z = max_abs_z.max(z.abs());
        points.push(DensityMartingalePoint {
            x,
            a_s,
            mc_mean: mean,
            mc_std_error: se,
            z,
        });
    }
    // Three standard errors per point, Šidák across points.
    let per = 1.0 - 0.99f64.powf(1.0 / n_points.max(1) as f64);
    let z_threshold = (-norm_ppf(per / 2.0)).max(3.0);
    DensityMartingaleReport {
        pass: max_abs_z <= z_threshold,
        points,
        max_abs_z,
        z_threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density_model::BaseMartingale;

    fn small_cfg(n_paths: usize, seed: u64) -> MartingaleTestConfig {
        MartingaleTestConfig {
            n_paths,
            grid_steps: 60,
            checkpoints: vec![(0.25, 0.75)],
            martingale_bins: 4,
            occurred_time_bins: 2,
            significance: 0.01,
            min_bin_count: 150,
            master_seed: seed,
        }
    }

    #[test]
    fn zero_drift_passes_under_independence() {
        // rho = 0: the martingale needs no compensation.
        let params = ModelParams::independent_n(2);
        let report = martingale_test(
            &params,
            1,
            &DriftProducer::Zero,
            &QuadratureConfig::default(),
            &small_cfg(4_000, 3),
        )
        .unwrap();
        assert!(report.pass, "max |z| = {}", report.max_abs_z);
    }

    #[test]
    fn zero_drift_fails_under_correlation() {
        // Negative control: omitting the compensator must be detected.
        let params = ModelParams::default_n(2);
        let report = martingale_test(
            &params,
            1,
            &DriftProducer::Zero,
            &QuadratureConfig::default(),
            &small_cfg(20_000, 4),
        )
        .unwrap();
        assert!(!report.pass);
        assert!(report.max_abs_z > 5.0, "max |z| = {}", report.max_abs_z);
    }

    #[test]
    fn sorted_drift_compensates_small_run() {
        let params = ModelParams::default_n(2);
        let report = martingale_test(
            &params,
            1,
            &DriftProducer::Sorted,
            &QuadratureConfig::default(),
            &small_cfg(4_000, 5),
        )
        .unwrap();
        assert!(
            report.pass,
            "max |z| = {} threshold {}",
            report.max_abs_z, report.z_threshold
        );
        assert_eq!(report.flagged_paths, 0);
    }

    #[test]
    fn tau_rho_drift_compensates_small_run() {
        let params = ModelParams::default_n(2);
        let report = martingale_test(
            &params,
            1,
            &DriftProducer::TauRho(Injection::new(vec![0])),
            &QuadratureConfig::default(),
            &small_cfg(4_000, 6),
        )
        .unwrap();
        assert!(report.pass, "max |z| = {}", report.max_abs_z);
    }

    #[test]
    fn bounded_martingale_variant_compensates() {
        let mut params = ModelParams::default_n(2);
        params.martingale = BaseMartingale::BoundedTanh;
        let report = martingale_test(
            &params,
            1,
            &DriftProducer::Sorted,
            &QuadratureConfig::default(),
            &small_cfg(3_000, 7),
        )
        .unwrap();
        assert!(report.pass, "max |z| = {}", report.max_abs_z);
    }

    #[test]
    fn density_martingale_cases() {
        // Independence: the density is deterministic, exact equality.
        let params = ModelParams::independent_n(2);
        let report = density_martingale_test(&params, 4, 2_000, 0.3, 0.8, false, 11);
        assert!(report.pass);
        for p in &report.points {
            assert!((p.mc_mean - p.a_s).abs() < 1e-12);
        }
        // Default parameters: passes within the corrected band.
        let params = ModelParams::default_n(2);
        let report = density_martingale_test(&params, 6, 30_000, 0.3, 0.8, false, 13);
        assert!(report.pass, "max |z| = {}", report.max_abs_z);
        // Mis-specified variance: fails.
        let report = density_martingale_test(&params, 6, 30_000, 0.3, 0.8, true, 13);
        assert!(!report.pass, "max |z| = {}", report.max_abs_z);
    }
}
