//! Delay differential equations with jumps on a manifold with a connection.
//!
//! The continuous part of a trajectory is driven by vector fields evaluated a
//! fixed delay in the past and parallel transported to the present along the
//! trajectory. Jumps come from a separate, undelayed source: at each jump the
//! state follows the unit-time flow of the fields scaled by the jump mark, and
//! that flow curve fills the gap so transport can cross it.
//!
//! Modules, bottom up:
//!
//! * [`manifold`]: single-chart manifolds, Christoffel symbols, vector fields
//!   and a small catalog of test manifolds.
//! * [`transport`]: parallel transport along sampled curves, and along
//!   càdlàg paths whose jumps are bridged by fill curves.
//! * [`drivers`]: the integrators `S_t` and `L_t` (time plus Brownian motion
//!   plus finitely many jumps) and their sampling.
//! * [`solver`]: the deterministic and Stratonovich solvers built by induction
//!   on the jumps.
//! * [`frame_bundle`]: frames, horizontal and vertical vectors, horizontal
//!   lifts of paths and the lifted solver on the frame bundle.

pub mod drivers;
pub mod error;
pub mod frame_bundle;
pub mod manifold;
pub mod solver;
pub mod transport;

pub use error::{Error, Result};
