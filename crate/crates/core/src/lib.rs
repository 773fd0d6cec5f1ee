//! Probabilistic shadows of polytopes with Gaussian-distributed faces.
//!
//! The crate builds ε-shadows around uncertain obstacles, searches for the
//! per-obstacle risk allocation that certifies a swept volume, keeps an
//! online risk ledger across replans, plans with a risk-bounded RRT, and
//! checks every bound against Monte-Carlo estimates.

pub mod certify;
pub mod geom;
pub mod pgdf;
pub mod online;
pub mod oracle;
pub mod planner;
pub mod prob;
pub mod shadow;
