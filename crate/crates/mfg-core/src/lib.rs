//! Velocity control of a continuum of cars on a ring road, as a coupled
//! forward-backward system, plus an N-car layer that measures how good the
//! continuum controls are for finitely many cars.
//!
//! The pieces, bottom to top:
//!
//! * [`grid`]: periodic space-time grid and scalar fields.
//! * [`cost`]: driving cost models and their constrained Legendre transforms.
//! * [`system`]: Lax-Friedrichs + upwind value discretization, residual and
//!   Jacobian of the coupled system.
//! * [`solver`]: damped Newton over restarted GMRES with a forward-backward
//!   block preconditioner, warm-started level by level from a coarse grid.
//! * [`lwr`]: plain macroscopic reference solver on the same stencil, and the
//!   exactness check tying it to the game with zero terminal cost.
//! * [`micro`]: finitely many cars driving the continuum policy; kernel
//!   density estimates, per-car costs, best responses and equilibrium gaps.

pub mod cost;
pub mod grid;
pub mod lwr;
pub mod micro;
pub mod quad;
pub mod solver;
pub mod sparse;
pub mod system;

pub use cost::CostModel;
pub use grid::{l1_norm, ScalarField, SolutionTriple, SpaceTimeGrid};
pub use system::{ProblemSpec, UnknownVector};
