//! Frozen-time operator calculus: resolvents, analytic semigroups by contour
//! quadrature, square roots, and estimate suites.

pub mod contour;
pub mod frozen;
pub mod suites;

pub use contour::{ContourSemigroup, ContourSpec};
pub use frozen::{
    inv_sqrt_apply, resolvent_apply, semigroup_apply, sqrt_apply, FracMethod, FrozenOperator,
    SemigroupBackend,
};
pub use suites::{
    resolvent_estimate_suite, sqrt_holder_suite, square_root_property_check,
    EstimateSuiteReport, SqrtHolderReport, SuitePlan,
};
