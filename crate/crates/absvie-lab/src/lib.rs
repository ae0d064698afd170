//! Monte Carlo workbench for anticipated backward stochastic Volterra
//! integral equations (ABSVIEs), the stochastic delay Volterra systems they
//! dualize with, and the linear-quadratic Volterra games built on top.
//!
//! The crate solves the backward equation
//!
//! ```text
//! Y(t) = phi(t) + ∫_t^T g(t, s, Y, Z, advanced and averaged arguments) ds
//!               - ∫_t^T Z(t, s) dW(s)
//! ```
//!
//! as an adapted M-solution — Z is defined on the whole square by the
//! martingale representation of Y — via least-squares Monte Carlo and Picard
//! iteration, simulates the forward delay systems, and numerically certifies
//! the structural facts that connect them (comparison ordering, the
//! variational-derivative representation of Z in the linear case, forward /
//! backward duality, and the Nash point of the LQ game).
//!
//! Entry points by module:
//!
//! * [`grid`] / [`paths`] — delay-aligned grids, reproducible counter-based
//!   Brownian ensembles.
//! * [`regress`] — adapted least-squares projections and martingale
//!   coefficients.
//! * [`absvie`] — the backward Picard solver and its diagnostics.
//! * [`sdvie`] — forward Euler simulation of delay Volterra systems and
//!   performance functionals.
//! * [`comparison`], [`duality`], [`regularity`], [`game`] — the structural
//!   checks built on the solvers.
//! * [`runner`] — config-driven experiments behind the `absvie-lab` CLI.
//!
//! Each major capability has a runnable example under `examples/`.

pub mod absvie;
pub mod comparison;
pub mod duality;
pub mod field;
pub mod game;
pub mod grid;
pub mod paths;
pub mod regress;
pub mod regularity;
pub mod runner;
pub mod sdvie;

pub use absvie::{
    anticipated_args, msolution_residual, picard_step, solve_absvie, stability_probe, ArgUsage,
    FreeTerm, GenArgs, GeneratorSpec, MSolution, SolveDiagnostics, SolveError,
};
pub use grid::{make_grid, DelaySpec, GridError, Offset, TimeGrid};
pub use paths::{sample_paths, PathEnsemble};
pub use regress::{martingale_coeff, project, Basis, NodeDesign, Projection};
