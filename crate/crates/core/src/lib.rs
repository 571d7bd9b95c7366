//! Leader-follower (Stackelberg) null control of one-dimensional nonlocal
//! parabolic equations
//!
//! ```text
//! y_t - y_xx + int_0^L K(t, x, s) y(t, s) ds = f 1_omega + v 1_O   in (0,T) x (0,L)
//! ```
//!
//! The follower `v` minimizes a tracking cost for every leader `f`; the leader
//! then drives the resulting optimality system to rest at time `T` through a
//! penalized Hilbert uniqueness method. A boundary variant lets the follower act
//! through Dirichlet data at one endpoint, and a semilinear variant adds a
//! globally Lipschitz reaction handled by Picard iteration over linearizations.
//!
//! All solvers are implicit Euler in time with centered differences in space.
//! Backward solves are the exact discrete adjoints of forward solves, so
//! gradients, duality identities and dense oracles agree to round-off.

pub mod boundary;
pub mod cg;
pub mod coupled;
pub mod error;
pub mod follower;
pub mod grid;
pub mod kernel;
pub mod leader;
pub mod parabolic;
pub mod runner;
pub mod semilinear;
pub mod verification;
pub mod weights;

pub use error::{Error, Result};
pub use grid::{Grid, RegionMask, RegionName, Side, SpaceTimeField, TimeGrid};
pub use kernel::{KernelOperator, KernelSpec, Profile};
pub use weights::CarlemanWeights;
