//! Numerical laboratory for canonical Kähler metrics on toric Fano curves and
//! surfaces.
//!
//! The crate works in the toric model: a reflexive moment polytope P stands
//! for the manifold, convex potentials on ℝⁿ for torus-invariant metrics in
//! the anticanonical class, and piecewise-linear convex functions on P for
//! equivariant degenerations. On top of that it provides
//!
//! - the inverse Monge-Ampère flow and the normalized Kähler-Ricci flow with
//!   monotonicity monitors ([`flows`]),
//! - the metric-space side: distances d_p, geodesic segments and rays,
//!   Duistermaat-Heckman measures ([`geodesic`]),
//! - non-Archimedean invariants E^NA, L^NA, D^NA, norms and the H-invariant
//!   with a lattice-weight oracle ([`na`]),
//! - destabilizer searches and the desk-scale verification that the flow
//!   limits match the optimal normalized invariants ([`optimize`]).

pub mod cli;
pub mod error;
pub mod flows;
pub mod geodesic;
pub mod metric;
pub mod na;
pub mod optimize;
pub mod polytope;

pub use error::{Error, Result};
