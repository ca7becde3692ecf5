//! Numerical laboratory for non-autonomous parabolic evolution equations
//! driven by time-dependent sesquilinear forms on a discrete Gelfand triple.

pub mod calculus;
pub mod error;
pub mod evolution;
pub mod form;
pub mod linalg;
pub mod problem;
pub mod regularity;
pub mod report;
pub mod robin;
pub mod spaces;

pub use error::{Error, Result};
pub use form::{DiniModulus, FormBounds, NonAutonomousForm};
pub use spaces::{CoordinateKind, GelfandTriple, InterpolationScale, Space};
