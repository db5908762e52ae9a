//! Convergence bounds, empirical constant estimates and scheme comparison.

pub mod bounds;
pub mod compare;
pub mod estimate;

pub use bounds::{bound_baseline, bound_emsfl, crossover_zeta_sq, step_sizes, BoundParams};
pub use compare::{compare_schemes, ComparisonReport, SchemeSummary};
pub use estimate::{estimate_bound_constants, estimate_grad_variance};
