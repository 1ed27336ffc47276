//! Nonsmooth dynamic programming at desk scale.
//!
//! The crate has three layers:
//!
//! * **Nonsmooth calculus** ([`expr`], [`geometry`], [`simplex`]): piecewise-
//!   smooth expressions with exact Clarke generalized gradients, polytope /
//!   polyhedral-cone carriers for gradient sets and normal cones, and a
//!   certified `0 ∈ A + B + C` membership test via LP feasibility.
//! * **Dynamic programming** ([`feasibility`], [`grid`], [`dp`]): parametrized
//!   polyhedral feasibility sets with their normal and tangent cones, grid
//!   value tables solved by backward induction under a summable-cost
//!   truncation, and the value-subdifferential / Euler-inclusion optimality
//!   conditions as executable checks.
//! * **Stochastic layer** ([`stochastic`]): finite scenario trees as nested
//!   partitions, adapted processes, the reduction of the stochastic model to a
//!   deterministic one on cell-block coordinates, and the pointwise stochastic
//!   Euler-inclusion checker that never integrates.
//!
//! [`model`] and [`report`] carry the JSON file formats and audit reports used
//! by the `nsdp` command-line front end.

pub mod dp;
pub mod expr;
pub mod feasibility;
pub mod geometry;
pub mod grid;
pub mod model;
pub mod report;
pub mod sampling;
pub mod simplex;
pub mod stochastic;

pub use expr::{Expr, RegularityCertificate, SmoothAtom};
pub use geometry::{GradientPolytope, MembershipCertificate, PolyhedralCone, Polytope};
