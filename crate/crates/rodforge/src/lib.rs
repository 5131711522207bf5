//! Workbench for constructing toric gravitational instantons numerically.
//!
//! The pipeline: describe a rod structure combinatorially (`rods`), solve the
//! axisymmetric harmonic-map equation into the hyperbolic plane on a truncated
//! half-plane (`solver`), integrate the augmentation and read off cone angles
//! (`augment`), adjust rod lengths until every cone angle equals 2π (`tuner`),
//! and verify the assembled 4-metric (`metrics`). Closed-form solutions used
//! as oracles and boundary data live in `models`; the exact hyperbolic-plane
//! geometry everything is built on lives in `hyp`.

pub mod augment;
pub mod hyp;
pub mod models;
pub mod rods;
pub mod solver;
