//! Explicit operator-splitting solvers for the cardiac monodomain equation.
//!
//! Three Strang-split time integrators share one driver:
//!
//! * **OST**: fixed reaction and diffusion steps;
//! * **OSTAR**: per-node adaptive reaction sub-stepping;
//! * **DAETI**: adaptive reaction sub-stepping plus adaptive sub-stepping of
//!   the explicit diffusion step against the Gershgorin bound.
//!
//! All sub-integrators are forward Euler, so every step is matrix-free apart
//! from one sparse matrix-vector product per diffusion sub-step.

pub mod config;
pub mod error;
pub mod experiment;
pub mod fem;
pub mod ionic;
pub mod mesh;
pub mod oracles;
pub mod output;
pub mod postprocess;
pub mod splitting;
pub mod stimulus;

pub use error::{Error, Result};
