//! Ordering and selection machinery for families of random times.
//!
//! Provides the capped comparison `a ∤ b`, the stable rank map and increasing
//! re-ordering of a time vector, enumeration of injections from `{1..k}` into
//! `{1..n}`, the first-match partition labelling of a sample by an injection,
//! and the permutations of `{1..n}` that fix a given injection pointwise.
//!
//! Indices are 1-based in the mathematical notation; this module stores them
//! 0-based and documents each conversion.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CombinatoricsError {
    #[error("selection size k={k} exceeds population size n={n}")]
    SelectionTooLarge { k: usize, n: usize },
    #[error("selection size k must be at least 1")]
    EmptySelection,
    #[error("extended time must be non-negative and not NaN, got {0}")]
    InvalidTime(f64),
}

/// A point of `[0, ∞]`: a non-negative real or the distinguished `∞`.
///
/// `∞` compares strictly greater than every finite value, and equal to
/// itself, which is exactly the order the rank map needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtendedTime {
    Finite(f64),
    Infinity,
}

impl ExtendedTime {
    pub fn finite(value: f64) -> Result<Self, CombinatoricsError> {
        if value.is_nan() || value < 0.0 || value.is_infinite() {
            return Err(CombinatoricsError::InvalidTime(value));
        }
        Ok(ExtendedTime::Finite(value))
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, ExtendedTime::Infinity)
    }

    pub fn as_f64(self) -> f64 {
        match self {
            ExtendedTime::Finite(v) => v,
            ExtendedTime::Infinity => f64::INFINITY,
        }
    }

    /// The capped comparison `a ∤ b`: `a` if `a ≤ b`, otherwise `∞`.
    pub fn cap(self, bound: ExtendedTime) -> ExtendedTime {
        if self <= bound {
            self
        } else {
            ExtendedTime::Infinity
        }
    }
}

impl PartialOrd for ExtendedTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp_total(other))
    }
}

impl ExtendedTime {
    fn cmp_total(&self, other: &Self) -> Ordering {
        match (self, other) {
            (ExtendedTime::Infinity, ExtendedTime::Infinity) => Ordering::Equal,
            (ExtendedTime::Infinity, ExtendedTime::Finite(_)) => Ordering::Greater,
            (ExtendedTime::Finite(_), ExtendedTime::Infinity) => Ordering::Less,
            // Constructor rejects NaN, so the order is total.
            (ExtendedTime::Finite(a), ExtendedTime::Finite(b)) => a.partial_cmp(b).unwrap(),
        }
    }
}

impl fmt::Display for ExtendedTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtendedTime::Finite(v) => write!(f, "{v}"),
            ExtendedTime::Infinity => write!(f, "inf"),
        }
    }
}

/// Shorthand for the capped comparison on two extended times.
pub fn cap(a: ExtendedTime, b: ExtendedTime) -> ExtendedTime {
    a.cap(b)
}

/// An injective map `ρ: {1..k} → {1..n}`, stored as 0-based images.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Injection {
    images: Vec<usize>,
}

impl Injection {
    pub fn new(images: Vec<usize>) -> Self {
        let mut seen = images.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), images.len(), "injection images must be distinct");
        Injection { images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `ρ(i)` for 0-based `i`, returning a 0-based image.
    pub fn image(&self, i: usize) -> usize {
        self.images[i]
    }

    pub fn images(&self) -> &[usize] {
        &self.images
    }

    /// Indices of `{0..n-1}` not hit by the injection, ascending.
    pub fn complement(&self, n: usize) -> Vec<usize> {
        (0..n).filter(|j| !self.images.contains(j)).collect()
    }

    /// 1-based rendering, e.g. `(2,3)`, for reports and CSV headers.
    pub fn label(&self) -> String {
        let parts: Vec<String> = self.images.iter().map(|i| (i + 1).to_string()).collect();
        format!("({})", parts.join(","))
    }
}

/// Result of ranking a time vector: the rank map, its inverse and the
/// increasing re-ordering.
#[derive(Debug, Clone)]
pub struct RankResult {
    /// `ranks[i]` is the 0-based rank of entry `i` (ties broken by index).
    pub ranks: Vec<usize>,
    /// `inverse[r]` is the index holding rank `r`; `sorted[r] = a[inverse[r]]`.
    pub inverse: Vec<usize>,
    /// The values in increasing order with index tie-breaking.
    pub sorted: Vec<ExtendedTime>,
}

/// Rank a vector of extended times by the stable rule
/// `R(i) = #{j: a_j < a_i} + #{j < i: a_j = a_i}` (0-based).
pub fn rank_and_sort(times: &[ExtendedTime]) -> RankResult {
    let k = times.len();
    let mut ranks = vec![0usize; k];
    for i in 0..k {
        let mut r = 0usize;
        for j in 0..k {
            if times[j] < times[i] || (j < i && times[j] == times[i]) {
                r += 1;
            }
        }
        ranks[i] = r;
    }
    let mut inverse = vec![0usize; k];
    for (i, &r) in ranks.iter().enumerate() {
        inverse[r] = i;
    }
    let sorted = inverse.iter().map(|&i| times[i]).collect();
    RankResult {
        ranks,
        inverse,
        sorted,
    }
}

/// All injections `{1..k} → {1..n}` in lexicographic order of their image
/// sequences. This order is the fixed tie-breaking order for partition labels.
pub fn enumerate_injections(k: usize, n: usize) -> Result<Vec<Injection>, CombinatoricsError> {
    if k == 0 {
        return Err(CombinatoricsError::EmptySelection);
    }
    if k > n {
        return Err(CombinatoricsError::SelectionTooLarge { k, n });
    }
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    let mut used = vec![false; n];
    fn recurse(
        k: usize,
        n: usize,
        current: &mut Vec<usize>,
        used: &mut Vec<bool>,
        out: &mut Vec<Injection>,
    ) {
        if current.len() == k {
            out.push(Injection::new(current.clone()));
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                current.push(j);
                recurse(k, n, current, used, out);
                current.pop();
                used[j] = false;
            }
        }
    }
    recurse(k, n, &mut current, &mut used, &mut out);
    Ok(out)
}

/// The label of a sample: the first injection `ρ` (in lexicographic order)
/// whose selected values `(τ_{ρ(1)},…,τ_{ρ(k)})` equal the k smallest values
/// in increasing order. Total even in the presence of ties.
pub fn partition_label(times: &[ExtendedTime], k: usize) -> Result<Injection, CombinatoricsError> {
    let n = times.len();
    if k == 0 {
        return Err(CombinatoricsError::EmptySelection);
    }
    if k > n {
        return Err(CombinatoricsError::SelectionTooLarge { k, n });
    }
    let sorted_k: Vec<ExtendedTime> = rank_and_sort(times).sorted[..k].to_vec();
    for rho in enumerate_injections(k, n)? {
        let matches = (0..k).all(|i| times[rho.image(i)] == sorted_k[i]);
        if matches {
            return Ok(rho);
        }
    }
    unreachable!("the increasing re-ordering always realizes some injection");
}

/// All permutations `π` of `{1..n}` with `π(ρ(i)) = i` for every `i ≤ k`,
/// in lexicographic order of the assignment of the remaining indices.
///
/// Returned as 0-based image vectors: `perm[j]` is `π(j+1) - 1`.
pub fn fixing_permutations(rho: &Injection, n: usize) -> Vec<Vec<usize>> {
    let k = rho.len();
    assert!(k <= n, "injection does not fit in {{1..{n}}}");
    let domain_rest = rho.complement(n);
    let range_rest: Vec<usize> = (k..n).collect();
    let mut out = Vec::new();
    let mut assignment = Vec::with_capacity(domain_rest.len());
    let mut used = vec![false; range_rest.len()];
    fn recurse(
        domain_rest: &[usize],
        range_rest: &[usize],
        rho: &Injection,
        n: usize,
        assignment: &mut Vec<usize>,
        used: &mut Vec<bool>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if assignment.len() == domain_rest.len() {
            let mut perm = vec![usize::MAX; n];
            for (i, &img) in rho.images().iter().enumerate() {
                perm[img] = i;
            }
            for (slot, &value_idx) in assignment.iter().enumerate() {
                perm[domain_rest[slot]] = range_rest[value_idx];
            }
            out.push(perm);
            return;
        }
        for v in 0..range_rest.len() {
            if !used[v] {
                used[v] = true;
                assignment.push(v);
                recurse(domain_rest, range_rest, rho, n, assignment, used, out);
                assignment.pop();
                used[v] = false;
            }
        }
    }
    recurse(
        &domain_rest,
        &range_rest,
        rho,
        n,
        &mut assignment,
        &mut used,
        &mut out,
    );
    out
}

/// The random-time structure shared by the oracle and the drift engine:
/// `n` times, a selection size `k`, and the full injection set in the fixed
/// lexicographic order.
#[derive(Debug, Clone)]
pub struct TimeConfig {
    pub n: usize,
    pub k: usize,
    injections: Vec<Injection>,
}

impl TimeConfig {
    pub fn new(n: usize, k: usize) -> Result<Self, CombinatoricsError> {
        let injections = enumerate_injections(k, n)?;
        Ok(TimeConfig { n, k, injections })
    }

    pub fn injections(&self) -> &[Injection] {
        &self.injections
    }

    /// Position of `rho` in the lexicographic enumeration.
    pub fn injection_index(&self, rho: &Injection) -> usize {
        self.injections
            .iter()
            .position(|r| r == rho)
            .expect("injection belongs to I(k,n)")
    }

    /// Label of a sample of `n` times: see [`partition_label`].
    pub fn label(&self, times: &[ExtendedTime]) -> Injection {
        assert_eq!(times.len(), self.n);
        partition_label(times, self.k).expect("k <= n by construction")
    }

    /// The k smallest values of `times` in increasing order.
    pub fn sorted_selection(&self, times: &[ExtendedTime]) -> Vec<ExtendedTime> {
        rank_and_sort(times).sorted[..self.k].to_vec()
    }
}
