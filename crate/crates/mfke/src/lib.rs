//! Particle-based numerical laboratory for nonlinear and non-conservative
//! Fokker-Planck equations in one space dimension.
//!
//! The equations treated here have the generic form
//!
//! ```text
//!     d/dt u = 1/2 dxx(sigma^2(t,x,u) u) - dx(b(t,x,u) u) + Lambda(t,x,u,du) u
//! ```
//!
//! and are solved through their probabilistic representation: a diffusion
//! whose coefficients depend on the current density estimate, carrying a
//! multiplicative Feynman-Kac weight `exp(int Lambda)`. The density itself is
//! recovered from the weighted cloud by kernel smoothing, which closes the
//! fixed point. When `Lambda = 0` the weights stay at one and the scheme
//! reduces to a classical interacting particle system; when `Lambda != 0`
//! total mass is no longer conserved and the weights carry the creation or
//! destruction of mass.
//!
//! Module map:
//!
//! * [`measures`]  - weighted particle clouds, kernel density estimation,
//!   grid densities, 1-d Wasserstein distance.
//! * [`problems`]  - coefficient bundles (`sigma`, `b`, `Lambda`), initial
//!   and terminal laws, the built-in problem library.
//! * [`engine`]    - Euler scheme for the weighted system, deterministic
//!   counter-based noise, snapshots and diagnostics.
//! * [`jumps`]     - pure-jump representation of mass destruction
//!   (killing rate `-Lambda`), and the rescaling back to the
//!   non-conservative solution.
//! * [`reversal`]  - time reversal of a terminal-value problem via the
//!   estimated score, with a forward reference solver.
//! * [`randomenv`] - quenched simulation in a Gaussian random environment
//!   driven by a finite mode expansion.
//! * [`oracle`]    - independent finite-difference and closed-form solvers
//!   used to validate the particle runs.
//! * [`config`], [`report`], [`cli`] - run configuration, comparison
//!   metrics, and the command-line pipelines.

pub mod cli;
pub mod config;
pub mod engine;
pub mod jumps;
pub mod measures;
pub mod oracle;
pub mod problems;
pub mod quad;
pub mod randomenv;
pub mod report;
pub mod reversal;
pub mod rng;
pub mod stats;
