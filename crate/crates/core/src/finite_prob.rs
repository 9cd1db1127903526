//! Exact probability calculus on finite spaces.
//!
//! A sigma-algebra is a [`Partition`] of the atom set, a filtration is a
//! refining sequence of partitions over a discrete time grid, and every
//! projection reduces to probability-weighted block averages. "Predictable at
//! `t_j`" means measurable with respect to the partition at `t_{j-1}` (at
//! `t_0`, the initial partition). All operations are pure; identities hold to
//! roundoff, asserted at `1e-12`.

use std::sync::Arc;

use thiserror::Error;

/// Tolerance standing in for exact equality in double precision.
pub const EXACT_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FiniteProbError {
    #[error("atom weights must be strictly positive, got {0} at atom {1}")]
    NonPositiveWeight(f64, usize),
    #[error("atom weights must sum to 1 within 1e-12, got {0}")]
    WeightsDoNotSumToOne(f64),
    #[error("partition blocks must disjointly cover all {expected} atoms")]
    NotAPartition { expected: usize },
    #[error("partition at step {0} does not refine the partition at step {1}")]
    NotRefining(usize, usize),
    #[error("time grid must be strictly increasing")]
    GridNotIncreasing,
    #[error("grid length {values} does not match filtration length {grid}")]
    GridMismatch { values: usize, grid: usize },
    #[error("incompatible time grids between path and filtration")]
    IncompatibleGrids,
    #[error("path is not adapted at step {step}, atom {atom}")]
    NotAdapted { step: usize, atom: usize },
    #[error("input is not a martingale: conditional increment {0} at step {1}")]
    NotAMartingale(f64, usize),
    #[error("finite-variation path must start at 0, got {0}")]
    NonzeroStart(f64),
}

/// Finite probability space: atoms `0..len` with strictly positive weights.
#[derive(Debug, Clone)]
pub struct FiniteProbSpace {
    probs: Vec<f64>,
}

impl FiniteProbSpace {
    pub fn new(probs: Vec<f64>) -> Result<Self, FiniteProbError> {
        for (i, &p) in probs.iter().enumerate() {
            if !(p > 0.0) {
                return Err(FiniteProbError::NonPositiveWeight(p, i));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > EXACT_TOL {
            return Err(FiniteProbError::WeightsDoNotSumToOne(total));
        }
        Ok(FiniteProbSpace { probs })
    }

    pub fn uniform(n_atoms: usize) -> Self {
        FiniteProbSpace {
            probs: vec![1.0 / n_atoms as f64; n_atoms],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, atom: usize) -> f64 {
        self.probs[atom]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Expectation of an atom-indexed variable.
    pub fn expect(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }

    /// Probability mass of a set of atoms given as an indicator.
    pub fn mass(&self, indicator: &[bool]) -> f64 {
        indicator
            .iter()
            .zip(&self.probs)
            .filter(|(ind, _)| **ind)
            .map(|(_, p)| p)
            .sum()
    }
}

/// A finite sigma-algebra: disjoint non-empty blocks covering the atom set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
    block_of: Vec<usize>,
}

impl Partition {
    pub fn new(blocks: Vec<Vec<usize>>, n_atoms: usize) -> Result<Self, FiniteProbError> {
        let mut block_of = vec![usize::MAX; n_atoms];
        let mut seen = 0usize;
        for (b, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(FiniteProbError::NotAPartition { expected: n_atoms });
            }
            for &a in block {
                if a >= n_atoms || block_of[a] != usize::MAX {
                    return Err(FiniteProbError::NotAPartition { expected: n_atoms });
                }
                block_of[a] = b;
                seen += 1;
            }
        }
        if seen != n_atoms {
            return Err(FiniteProbError::NotAPartition { expected: n_atoms });
        }
        Ok(Partition { blocks, block_of })
    }

    /// The trivial sigma-algebra `{Ω}`.
    pub fn trivial(n_atoms: usize) -> Self {
        Partition::new(vec![(0..n_atoms).collect()], n_atoms).unwrap()
    }

    /// The discrete sigma-algebra (all singletons).
    pub fn discrete(n_atoms: usize) -> Self {
        Partition::new((0..n_atoms).map(|a| vec![a]).collect(), n_atoms).unwrap()
    }

    /// Group atoms by a key function; blocks ordered by first occurrence.
    pub fn group_by<K: PartialEq>(n_atoms: usize, key: impl Fn(usize) -> K) -> Self {
        let mut keys: Vec<K> = Vec::new();
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        for a in 0..n_atoms {
            let k = key(a);
            match keys.iter().position(|existing| *existing == k) {
                Some(i) => blocks[i].push(a),
                None => {
                    keys.push(k);
                    blocks.push(vec![a]);
                }
            }
        }
        Partition::new(blocks, n_atoms).unwrap()
    }

    pub fn n_atoms(&self) -> usize {
        self.block_of.len()
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block_index(&self, atom: usize) -> usize {
        self.block_of[atom]
    }

    pub fn block_of_atom(&self, atom: usize) -> &[usize] {
        &self.blocks[self.block_of[atom]]
    }

    /// True if every block of `self` is contained in a block of `coarser`.
    pub fn refines(&self, coarser: &Partition) -> bool {
        self.blocks.iter().all(|block| {
            let target = coarser.block_of[block[0]];
            block.iter().all(|&a| coarser.block_of[a] == target)
        })
    }

    /// The common refinement of two partitions.
    pub fn join(&self, other: &Partition) -> Partition {
        Partition::group_by(self.n_atoms(), |a| (self.block_of[a], other.block_of[a]))
    }

    /// Blocks restricted to a set `D` (non-empty intersections), as sorted
    /// atom lists; used to test sigma-algebra coincidence on `D`.
    pub fn restrict(&self, indicator: &[bool]) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self
            .blocks
            .iter()
            .map(|block| {
                block
                    .iter()
                    .copied()
                    .filter(|&a| indicator[a])
                    .collect::<Vec<usize>>()
            })
            .filter(|b| !b.is_empty())
            .collect();
        out.sort();
        out
    }

    /// True if the set (given as indicator) is a union of blocks.
    pub fn measures_set(&self, indicator: &[bool]) -> bool {
        self.blocks.iter().all(|block| {
            let first = indicator[block[0]];
            block.iter().all(|&a| indicator[a] == first)
        })
    }
}

/// Conditional expectation of an atom-indexed variable given a partition:
/// constant per block, equal to the probability-weighted block average.
pub fn conditional_expectation(space: &FiniteProbSpace, x: &[f64], partition: &Partition) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for block in partition.blocks() {
        let mass: f64 = block.iter().map(|&a| space.prob(a)).sum();
        let avg: f64 = block.iter().map(|&a| space.prob(a) * x[a]).sum::<f64>() / mass;
        for &a in block {
            out[a] = avg;
        }
    }
    out
}

/// A filtration: one partition per grid time, refining monotonically.
#[derive(Debug, Clone)]
pub struct PartitionFiltration {
    space: Arc<FiniteProbSpace>,
    grid: Vec<f64>,
    partitions: Vec<Partition>,
}

impl PartitionFiltration {
    pub fn new(
        space: Arc<FiniteProbSpace>,
        grid: Vec<f64>,
        partitions: Vec<Partition>,
    ) -> Result<Self, FiniteProbError> {
        if grid.len() != partitions.len() {
            return Err(FiniteProbError::GridMismatch {
                values: partitions.len(),
                grid: grid.len(),
            });
        }
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FiniteProbError::GridNotIncreasing);
        }
        for j in 1..partitions.len() {
            if !partitions[j].refines(&partitions[j - 1]) {
                return Err(FiniteProbError::NotRefining(j, j - 1));
            }
        }
        Ok(PartitionFiltration {
            space,
            grid,
            partitions,
        })
    }

    pub fn space(&self) -> &Arc<FiniteProbSpace> {
        &self.space
    }

    pub fn n_atoms(&self) -> usize {
        self.space.len()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn partition(&self, j: usize) -> &Partition {
        &self.partitions[j]
    }

    /// Partition used for "predictable at step j": the one at `j-1`, with the
    /// initial partition at `j = 0`.
    pub fn predictable_partition(&self, j: usize) -> &Partition {
        &self.partitions[j.saturating_sub(1)]
    }

    /// Blockwise refinement: `self` is finer than `other` at every time.
    pub fn refines(&self, other: &PartitionFiltration) -> bool {
        self.grid == other.grid
            && self
                .partitions
                .iter()
                .zip(&other.partitions)
                .all(|(fine, coarse)| fine.refines(coarse))
    }

    fn same_grid(&self, other: &PartitionFiltration) -> bool {
        self.grid == other.grid
    }
}

/// A process on the grid: one value per (time, atom), adapted by invariant.
#[derive(Debug, Clone)]
pub struct AdaptedPath {
    filtration: Arc<PartitionFiltration>,
    values: Vec<Vec<f64>>,
}

impl AdaptedPath {
    pub fn new(
        filtration: Arc<PartitionFiltration>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self, FiniteProbError> {
        if values.len() != filtration.len() {
            return Err(FiniteProbError::GridMismatch {
                values: values.len(),
                grid: filtration.len(),
            });
        }
        for (j, row) in values.iter().enumerate() {
            let partition = filtration.partition(j);
            for block in partition.blocks() {
                let rep = row[block[0]];
                for &a in block {
                    if (row[a] - rep).abs() > EXACT_TOL * rep.abs().max(1.0) {
                        return Err(FiniteProbError::NotAdapted { step: j, atom: a });
                    }
                }
            }
        }
        Ok(AdaptedPath { filtration, values })
    }

    /// Constant-in-time path from a terminal variable's projections:
    /// `M_j = E[X | F_j]`, an exact martingale by the tower property.
    pub fn martingale_from_terminal(filtration: Arc<PartitionFiltration>, x: &[f64]) -> AdaptedPath {
        let space = filtration.space().clone();
        let values = (0..filtration.len())
            .map(|j| conditional_expectation(&space, x, filtration.partition(j)))
            .collect();
        AdaptedPath { filtration, values }
    }

    pub fn zero(filtration: Arc<PartitionFiltration>) -> AdaptedPath {
        let n = filtration.n_atoms();
        let len = filtration.len();
        AdaptedPath {
            filtration,
            values: vec![vec![0.0; n]; len],
        }
    }

    pub fn filtration(&self) -> &Arc<PartitionFiltration> {
        &self.filtration
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn value(&self, step: usize, atom: usize) -> f64 {
        self.values[step][atom]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Increment at step `j`: `X_{t_j} - X_{t_{j-1}}` (zero at `j = 0`).
    pub fn increment(&self, step: usize, atom: usize) -> f64 {
        if step == 0 {
            0.0
        } else {
            self.values[step][atom] - self.values[step - 1][atom]
        }
    }

    pub fn sub(&self, other: &AdaptedPath) -> AdaptedPath {
        assert!(self.filtration.same_grid(&other.filtration));
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        AdaptedPath {
            filtration: self.filtration.clone(),
            values,
        }
    }

    /// Max over (time, atom) of |self - other|.
    pub fn max_abs_diff(&self, other: &AdaptedPath) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// True if conditional increments vanish exactly: `E[ΔX_j | F_{j-1}] = 0`.
    pub fn is_martingale(&self) -> bool {
        self.max_conditional_increment() <= EXACT_TOL
    }

    /// Max over steps and blocks of |E[ΔX_j | F_{j-1}]|.
    pub fn max_conditional_increment(&self) -> f64 {
        let space = self.filtration.space();
        let mut worst: f64 = 0.0;
        for j in 1..self.len() {
            let prev = self.filtration.partition(j - 1);
            for block in prev.blocks() {
                let mass: f64 = block.iter().map(|&a| space.prob(a)).sum();
                let mean: f64 = block
                    .iter()
                    .map(|&a| space.prob(a) * self.increment(j, a))
                    .sum::<f64>()
                    / mass;
                worst = worst.max(mean.abs());
            }
        }
        worst
    }
}

/// Optional projection of raw (time, atom) values onto a filtration:
/// at each grid time, the conditional expectation given that time's partition.
pub fn optional_projection(
    values: &[Vec<f64>],
    filtration: &Arc<PartitionFiltration>,
) -> Result<AdaptedPath, FiniteProbError> {
    if values.len() != filtration.len() {
        return Err(FiniteProbError::IncompatibleGrids);
    }
    let space = filtration.space();
    let projected = values
        .iter()
        .enumerate()
        .map(|(j, row)| conditional_expectation(space, row, filtration.partition(j)))
        .collect();
    AdaptedPath::new(filtration.clone(), projected)
}

/// Optional projection of a single random variable, held constant in time.
pub fn optional_projection_of_variable(
    x: &[f64],
    filtration: &Arc<PartitionFiltration>,
) -> AdaptedPath {
    let rows = vec![x.to_vec(); filtration.len()];
    optional_projection(&rows, filtration).expect("grid matches by construction")
}

/// Predictable projection: at step `j >= 1` condition on the partition at
/// `j-1`; at step 0 on the initial partition.
pub fn predictable_projection(
    values: &[Vec<f64>],
    filtration: &Arc<PartitionFiltration>,
) -> Result<AdaptedPath, FiniteProbError> {
    if values.len() != filtration.len() {
        return Err(FiniteProbError::IncompatibleGrids);
    }
    let space = filtration.space();
    let projected = values
        .iter()
        .enumerate()
        .map(|(j, row)| conditional_expectation(space, row, filtration.predictable_partition(j)))
        .collect();
    AdaptedPath::new(filtration.clone(), projected)
}

/// Dual predictable projection of a finite-variation path with `V_0 = 0`:
/// the path `A` with `ΔA_j = E[ΔV_j | F_{j-1}]`, so that
/// `E[Σ H_j ΔV_j] = E[Σ H_j ΔA_j]` for every predictable `H`.
pub fn dual_predictable_projection(
    v: &[Vec<f64>],
    filtration: &Arc<PartitionFiltration>,
) -> Result<AdaptedPath, FiniteProbError> {
    if v.len() != filtration.len() {
        return Err(FiniteProbError::IncompatibleGrids);
    }
    let n = filtration.n_atoms();
    for atom in 0..n {
        if v[0][atom].abs() > EXACT_TOL {
            return Err(FiniteProbError::NonzeroStart(v[0][atom]));
        }
    }
    let space = filtration.space();
    let mut values = vec![vec![0.0; n]; filtration.len()];
    for j in 1..filtration.len() {
        let dv: Vec<f64> = (0..n).map(|a| v[j][a] - v[j - 1][a]).collect();
        let da = conditional_expectation(space, &dv, filtration.partition(j - 1));
        for a in 0..n {
            values[j][a] = values[j - 1][a] + da[a];
        }
    }
    AdaptedPath::new(filtration.clone(), values)
}

/// Doob decomposition of an adapted path: `X = M + A` with `A` predictable,
/// `A_0 = 0`, `ΔA_j = E[ΔX_j | F_{j-1}]`, and `M` an exact martingale.
pub fn doob_decomposition(
    x: &AdaptedPath,
    filtration: &Arc<PartitionFiltration>,
) -> Result<(AdaptedPath, AdaptedPath), FiniteProbError> {
    if !x.filtration.same_grid(filtration) {
        return Err(FiniteProbError::IncompatibleGrids);
    }
    // Re-validate adaptedness against the target filtration (the path may
    // come from a finer one).
    let adapted = AdaptedPath::new(filtration.clone(), x.values.clone())?;
    let space = filtration.space();
    let n = filtration.n_atoms();
    let mut drift = vec![vec![0.0; n]; filtration.len()];
    for j in 1..filtration.len() {
        let dx: Vec<f64> = (0..n).map(|a| adapted.increment(j, a)).collect();
        let da = conditional_expectation(space, &dx, filtration.partition(j - 1));
        for a in 0..n {
            drift[j][a] = drift[j - 1][a] + da[a];
        }
    }
    let drift = AdaptedPath::new(filtration.clone(), drift)?;
    let martingale = adapted.sub(&drift);
    Ok((martingale, drift))
}

/// Predictable bracket of two exact martingales: the dual predictable
/// projection of the path with increments `ΔM_j ΔN_j`.
pub fn predictable_bracket(
    m: &AdaptedPath,
    n_: &AdaptedPath,
    filtration: &Arc<PartitionFiltration>,
) -> Result<AdaptedPath, FiniteProbError> {
    for path in [m, n_] {
        if !path.filtration.same_grid(filtration) {
            return Err(FiniteProbError::IncompatibleGrids);
        }
        let dev = path.max_conditional_increment();
        if dev > EXACT_TOL {
            return Err(FiniteProbError::NotAMartingale(dev, 0));
        }
    }
    let n = filtration.n_atoms();
    let mut quad = vec![vec![0.0; n]; filtration.len()];
    for j in 1..filtration.len() {
        for a in 0..n {
            quad[j][a] = quad[j - 1][a] + m.increment(j, a) * n_.increment(j, a);
        }
    }
    dual_predictable_projection(&quad, filtration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_step_tree() -> Arc<PartitionFiltration> {
        // 4 atoms, uniform; t0 trivial, t1 pairs, t2 singletons.
        let space = Arc::new(FiniteProbSpace::uniform(4));
        let partitions = vec![
            Partition::trivial(4),
            Partition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap(),
            Partition::discrete(4),
        ];
        Arc::new(PartitionFiltration::new(space, vec![0.0, 1.0, 2.0], partitions).unwrap())
    }

    #[test]
    fn conditional_expectation_block_averages() {
        let space = FiniteProbSpace::uniform(4);
        let p = Partition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let x = [1.0, 3.0, 2.0, 6.0];
        assert_eq!(conditional_expectation(&space, &x, &p), vec![2.0, 2.0, 4.0, 4.0]);
        // Discrete partition: identity.
        assert_eq!(
            conditional_expectation(&space, &x, &Partition::discrete(4)),
            x.to_vec()
        );
        // Trivial partition: global mean.
        assert_eq!(
            conditional_expectation(&space, &x, &Partition::trivial(4)),
            vec![3.0, 3.0, 3.0, 3.0]
        );
    }

    #[test]
    fn conditional_expectation_tower_property() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = 8;
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let space = FiniteProbSpace::new(raw.iter().map(|w| w / total).collect()).unwrap();
            let fine = Partition::group_by(n, |a| a / 2);
            let coarse = Partition::group_by(n, |a| a / 4);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let inner = conditional_expectation(&space, &x, &fine);
            let lhs = conditional_expectation(&space, &inner, &coarse);
            let rhs = conditional_expectation(&space, &x, &coarse);
            for a in 0..n {
                assert_abs_diff_eq!(lhs[a], rhs[a], epsilon = EXACT_TOL);
            }
        }
    }

    #[test]
    fn space_validation() {
        assert!(FiniteProbSpace::new(vec![0.5, 0.5]).is_ok());
        assert!(matches!(
            FiniteProbSpace::new(vec![0.5, 0.0, 0.5]),
            Err(FiniteProbError::NonPositiveWeight(_, 1))
        ));
        assert!(matches!(
            FiniteProbSpace::new(vec![0.5, 0.6]),
            Err(FiniteProbError::WeightsDoNotSumToOne(_))
        ));
    }

    #[test]
    fn partition_validation() {
        assert!(Partition::new(vec![vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(Partition::new(vec![vec![0], vec![2]], 3).is_err());
        assert!(Partition::new(vec![vec![0, 2], vec![1]], 3).is_ok());
    }

    #[test]
    fn optional_projection_trivial_cases() {
        let f = two_step_tree();
        // Constant variable stays constant.
        let c = optional_projection_of_variable(&[2.5; 4], &f);
        for j in 0..3 {
            for a in 0..4 {
                assert_eq!(c.value(j, a), 2.5);
            }
        }
        // Indicator of a block measurable at every time projects to itself
        // from t1 onward; at t0 it averages.
        let ind = [1.0, 1.0, 0.0, 0.0];
        let p = optional_projection_of_variable(&ind, &f);
        assert_eq!(p.values()[1], vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(p.values()[2], vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(p.values()[0], vec![0.5; 4]);
    }

    #[test]
    fn predictable_projection_examples() {
        let f = two_step_tree();
        // Deterministic path: unchanged.
        let det = vec![vec![1.0; 4], vec![2.0; 4], vec![5.0; 4]];
        let p = predictable_projection(&det, &f).unwrap();
        assert_eq!(p.values(), &det[..]);

        // Martingale: predictable projection shifts one step.
        let m = AdaptedPath::martingale_from_terminal(f.clone(), &[1.0, 3.0, 2.0, 6.0]);
        let pm = predictable_projection(m.values(), &f).unwrap();
        for j in 1..3 {
            for a in 0..4 {
                assert_abs_diff_eq!(pm.value(j, a), m.value(j - 1, a), epsilon = EXACT_TOL);
            }
        }

        // Indicator of D = {atom 0} held constant in time: hand enumeration.
        let d = [1.0, 0.0, 0.0, 0.0];
        let rows = vec![d.to_vec(); 3];
        let pd = predictable_projection(&rows, &f).unwrap();
        assert_eq!(pd.values()[0], vec![0.25; 4]);
        assert_eq!(pd.values()[1], vec![0.25; 4]);
        assert_eq!(pd.values()[2], vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn dual_projection_trivial_cases() {
        let f = two_step_tree();
        // Predictable V: fixed increments known one step ahead.
        let v = vec![vec![0.0; 4], vec![1.0; 4], vec![1.0, 1.0, 3.0, 3.0]];
        let a = dual_predictable_projection(&v, &f).unwrap();
        // First increment is deterministic, second is known at t1.
        assert_eq!(a.values()[1], vec![1.0; 4]);
        assert_eq!(a.values()[2], vec![1.0, 1.0, 3.0, 3.0]);

        // Last-step increment independent of F_{T-1}: compensator is its mean.
        let v = vec![vec![0.0; 4], vec![0.0; 4], vec![2.0, -2.0, 2.0, -2.0]];
        let a = dual_predictable_projection(&v, &f).unwrap();
        assert_eq!(a.values()[2], vec![0.0; 4]);

        // V_0 != 0 rejected.
        let bad = vec![vec![1.0; 4], vec![1.0; 4], vec![1.0; 4]];
        assert!(dual_predictable_projection(&bad, &f).is_err());
    }

    #[test]
    fn dual_projection_duality_against_predictable_indicators() {
        use rand::{Rng, SeedableRng};
        let f = two_step_tree();
        let space = f.space().clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut v = vec![vec![0.0; 4]];
        for j in 1..3 {
            let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let prev = &v[j - 1];
            v.push(prev.iter().zip(&row).map(|(p, r)| p + r).collect());
        }
        let a = dual_predictable_projection(&v, &f).unwrap();
        // H_j = indicator of each block of the partition at j-1.
        for j in 1..3 {
            for block in f.partition(j - 1).blocks() {
                let h: Vec<f64> = (0..4)
                    .map(|at| if block.contains(&at) { 1.0 } else { 0.0 })
                    .collect();
                let lhs: f64 = (0..4)
                    .map(|at| space.prob(at) * h[at] * (v[j][at] - v[j - 1][at]))
                    .sum();
                let rhs: f64 = (0..4)
                    .map(|at| space.prob(at) * h[at] * (a.value(j, at) - a.value(j - 1, at)))
                    .sum();
                assert_abs_diff_eq!(lhs, rhs, epsilon = EXACT_TOL);
            }
        }
    }

    fn random_walk_tree(depth: usize) -> (Arc<PartitionFiltration>, Vec<Vec<f64>>) {
        // Atoms = sign paths; S_j = partial sums of +-1; filtration by prefix.
        let n = 1usize << depth;
        let space = Arc::new(FiniteProbSpace::uniform(n));
        let grid: Vec<f64> = (0..=depth).map(|j| j as f64).collect();
        let partitions: Vec<Partition> = (0..=depth)
            .map(|j| Partition::group_by(n, |atom| atom >> (depth - j)))
            .collect();
        let f = Arc::new(PartitionFiltration::new(space, grid, partitions).unwrap());
        let mut s = vec![vec![0.0; n]];
        for j in 1..=depth {
            let row: Vec<f64> = (0..n)
                .map(|atom| {
                    let bit = (atom >> (depth - j)) & 1;
                    s[j - 1][atom] + if bit == 0 { 1.0 } else { -1.0 }
                })
                .collect();
            s.push(row);
        }
        (f, s)
    }

    #[test]
    fn doob_decomposition_examples() {
        let (f, s) = random_walk_tree(4);
        let walk = AdaptedPath::new(f.clone(), s.clone()).unwrap();
        // Martingale input: zero drift.
        let (m, a) = doob_decomposition(&walk, &f).unwrap();
        assert!(m.is_martingale());
        for j in 0..f.len() {
            for atom in 0..f.n_atoms() {
                assert_abs_diff_eq!(a.value(j, atom), 0.0, epsilon = EXACT_TOL);
            }
        }

        // Squared walk: drift_j = j, by E[ΔS^2 | F] = 1.
        let squared: Vec<Vec<f64>> = s
            .iter()
            .map(|row| row.iter().map(|v| v * v).collect())
            .collect();
        let x = AdaptedPath::new(f.clone(), squared).unwrap();
        let (m, a) = doob_decomposition(&x, &f).unwrap();
        assert!(m.is_martingale());
        for j in 0..f.len() {
            for atom in 0..f.n_atoms() {
                assert_abs_diff_eq!(a.value(j, atom), j as f64, epsilon = EXACT_TOL);
            }
        }

        // Predictable increasing input: martingale stays at X_0.
        let incr: Vec<Vec<f64>> = (0..f.len()).map(|j| vec![(j * j) as f64; 16]).collect();
        let x = AdaptedPath::new(f.clone(), incr).unwrap();
        let (m, _a) = doob_decomposition(&x, &f).unwrap();
        for j in 0..f.len() {
            for atom in 0..16 {
                assert_abs_diff_eq!(m.value(j, atom), 0.0, epsilon = EXACT_TOL);
            }
        }

        // Doob uniqueness: X reconstructs exactly.
        let (m, a) = doob_decomposition(&walk, &f).unwrap();
        for j in 0..f.len() {
            for atom in 0..16 {
                assert_abs_diff_eq!(
                    m.value(j, atom) + a.value(j, atom),
                    walk.value(j, atom),
                    epsilon = EXACT_TOL
                );
            }
        }
    }

    #[test]
    fn doob_rejects_non_adapted() {
        let f = two_step_tree();
        // Value differing inside a t1 block is not adapted.
        let values = vec![vec![0.0; 4], vec![1.0, 2.0, 0.0, 0.0], vec![0.0; 4]];
        assert!(AdaptedPath::new(f.clone(), values).is_err());
    }

    #[test]
    fn bracket_examples() {
        let (f, s) = random_walk_tree(4);
        let walk = AdaptedPath::new(f.clone(), s).unwrap();
        // <M,M>_j = j for the +-1 walk.
        let bracket = predictable_bracket(&walk, &walk, &f).unwrap();
        for j in 0..f.len() {
            for atom in 0..16 {
                assert_abs_diff_eq!(bracket.value(j, atom), j as f64, epsilon = EXACT_TOL);
            }
        }
        // Bracket positivity: <M,M> nondecreasing pathwise.
        for j in 1..f.len() {
            for atom in 0..16 {
                assert!(bracket.increment(j, atom) >= -EXACT_TOL);
            }
        }
        // Non-martingale input rejected.
        let drifting: Vec<Vec<f64>> = (0..f.len()).map(|j| vec![j as f64; 16]).collect();
        let x = AdaptedPath::new(f.clone(), drifting).unwrap();
        assert!(predictable_bracket(&x, &walk, &f).is_err());
    }

    #[test]
    fn bracket_of_independent_walks_vanishes() {
        // Two independent +-1 coordinates on a 2-step product space.
        let n = 4; // atoms = (e1, e2) in {+,-}^2, revealed one per step
        let space = Arc::new(FiniteProbSpace::uniform(n));
        let partitions = vec![
            Partition::trivial(n),
            Partition::group_by(n, |a| a >> 1),
            Partition::discrete(n),
        ];
        let f =
            Arc::new(PartitionFiltration::new(space, vec![0.0, 1.0, 2.0], partitions).unwrap());
        let e1 = |a: usize| if a >> 1 == 0 { 1.0 } else { -1.0 };
        let e2 = |a: usize| if a & 1 == 0 { 1.0 } else { -1.0 };
        let m = AdaptedPath::new(
            f.clone(),
            vec![
                vec![0.0; 4],
                (0..4).map(e1).collect(),
                (0..4).map(e1).collect(),
            ],
        )
        .unwrap();
        let w = AdaptedPath::new(
            f.clone(),
            vec![
                vec![0.0; 4],
                vec![0.0; 4],
                (0..4).map(e2).collect(),
            ],
        )
        .unwrap();
        let bracket = predictable_bracket(&m, &w, &f).unwrap();
        for j in 0..3 {
            for atom in 0..4 {
                assert_abs_diff_eq!(bracket.value(j, atom), 0.0, epsilon = EXACT_TOL);
            }
        }
    }
}
