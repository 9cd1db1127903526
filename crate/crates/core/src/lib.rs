//! Semimartingale decompositions in enlarged filtrations.
//!
//! Two halves, one contract:
//!
//! * An **exact oracle** on finite probability spaces ([`finite_prob`],
//!   [`enlargement_oracle`]): sigma-algebras are partitions, every projection
//!   is a weighted block average, and the decomposition identities for the
//!   direct-sum filtration hold to floating-point roundoff.
//! * A **numerical engine** for the k smallest of n non-ordered random times
//!   under a conditional-density model ([`density_model`],
//!   [`marginal_integrator`], [`drift_engine`]): closed-form densities, order
//!   constrained marginalizations, and the explicit drift of a base-filtration
//!   martingale in the progressively enlarged filtration.
//!
//! [`mc_harness`] closes the loop statistically: it simulates scenarios and
//! tests that the computed drift actually compensates the martingale.

pub mod combinatorics;
pub mod density_model;
pub mod drift_engine;
pub mod enlargement_oracle;
pub mod finite_prob;
pub mod marginal_integrator;
pub mod mc_harness;
mod numutil;

pub use combinatorics::{ExtendedTime, Injection, RankResult, TimeConfig};
pub use finite_prob::{AdaptedPath, FiniteProbSpace, Partition, PartitionFiltration};
