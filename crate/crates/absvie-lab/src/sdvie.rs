//! Forward Euler simulation of stochastic delay Volterra systems and the
//! performance functionals evaluated along their paths.
//!
//! The scheme is left-point explicit Euler with full kernel re-evaluation:
//!
//! ```text
//! X(t_i) = phi(t_i) + h * sum_{j<i} b(t_i, t_j, X_j, X_{j-d}, u1_j, u1_{j-d1}, u2_j, u2_{j-d2})
//!                   +     sum_{j<i} sigma(t_i, t_j, X_j, u1_j, u2_j) dW_j
//! ```
//!
//! so adaptedness of the integrands is automatic and the O(N^2) cost per path
//! is exact with respect to the scheme. History rows (t <= 0) reproduce the
//! prescribed data bit-exactly.

use crate::field::{mean_and_stderr, PathField, ShiftedField};
use crate::grid::TimeGrid;
use crate::paths::PathEnsemble;
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("coefficient returned a non-finite value at row {row}, cell {cell}")]
    NonFiniteCoefficient { row: usize, cell: usize },
    #[error("cost returned a non-finite value at node {0}")]
    NonFiniteCost(usize),
}

/// Deterministic two-time kernel on the causal domain (t >= s).
#[derive(Clone)]
pub struct Kernel(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>);

impl Kernel {
    pub fn new(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_, _| c)
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    #[inline]
    pub fn eval(&self, t: f64, s: f64) -> f64 {
        (self.0)(t, s)
    }

    /// Sup of |kernel| over the causal grid pairs.
    pub fn sup_on(&self, grid: &TimeGrid) -> f64 {
        let mut sup = 0.0f64;
        for i in 0..=grid.steps_t() {
            for j in 0..=i {
                sup = sup.max(self.eval(grid.time(i), grid.time(j)).abs());
            }
        }
        sup
    }
}

/// Deterministic function of time.
#[derive(Clone)]
pub struct TimeFn(Arc<dyn Fn(f64) -> f64 + Send + Sync>);

impl TimeFn {
    pub fn new(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_| c)
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        (self.0)(t)
    }
}

/// Kernels of the linear system: drift `state * X(s) + delayed * X(s-delta)`,
/// diffusion `diffusion * X(s)`.
#[derive(Clone)]
pub struct LinearKernels {
    pub state: Kernel,
    pub delayed: Kernel,
    pub diffusion: Kernel,
}

impl LinearKernels {
    pub fn new(state: Kernel, delayed: Kernel, diffusion: Kernel) -> Self {
        Self {
            state,
            delayed,
            diffusion,
        }
    }
}

/// Drift arguments at one (row, cell, path) site.
#[derive(Clone, Copy, Debug)]
pub struct DriftArgs {
    pub t: f64,
    pub s: f64,
    pub x: f64,
    pub x_delayed: f64,
    pub u1: f64,
    pub u1_delayed: f64,
    pub u2: f64,
    pub u2_delayed: f64,
}

/// Diffusion arguments at one (row, cell, path) site.
#[derive(Clone, Copy, Debug)]
pub struct DiffusionArgs {
    pub t: f64,
    pub s: f64,
    pub x: f64,
    pub u1: f64,
    pub u2: f64,
}

type DriftFn = Arc<dyn Fn(&DriftArgs) -> f64 + Send + Sync>;
type DiffusionFn = Arc<dyn Fn(&DiffusionArgs, usize) -> f64 + Send + Sync>;

/// Coefficient evaluators of the forward system; the diffusion takes the
/// Brownian dim as its second argument.
#[derive(Clone)]
pub struct SdvieCoeffs {
    drift: DriftFn,
    diffusion: DiffusionFn,
}

impl SdvieCoeffs {
    pub fn new(
        drift: impl Fn(&DriftArgs) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(&DiffusionArgs, usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
        }
    }

    /// The linear system from its kernel triple.
    pub fn linear(kernels: &LinearKernels) -> Self {
        let state = kernels.state.clone();
        let delayed = kernels.delayed.clone();
        let diffusion = kernels.diffusion.clone();
        Self::new(
            move |a| state.eval(a.t, a.s) * a.x + delayed.eval(a.t, a.s) * a.x_delayed,
            move |a, _| diffusion.eval(a.t, a.s) * a.x,
        )
    }

    #[inline]
    pub fn drift(&self, args: &DriftArgs) -> f64 {
        (self.drift)(args)
    }

    #[inline]
    pub fn diffusion(&self, args: &DiffusionArgs, dim: usize) -> f64 {
        (self.diffusion)(args, dim)
    }
}

/// Grid-aligned delays of the forward system, in cells.
#[derive(Clone, Copy, Debug, Default)]
pub struct SdvieDelays {
    pub state: usize,
    pub control: [usize; 2],
}

/// Zero control table with the lead required by a delay.
pub fn zero_control(delay: usize, grid: &TimeGrid, paths: usize) -> ShiftedField {
    ShiftedField::zeros(delay, grid.steps_t(), paths)
}

/// Simulates the forward system; `phi` supplies both the free term on
/// [0, T] and the history on [-delta, 0].
pub fn simulate_sdvie(
    coeffs: &SdvieCoeffs,
    phi: &ShiftedField,
    controls: [&ShiftedField; 2],
    delays: SdvieDelays,
    ens: &PathEnsemble,
    grid: &TimeGrid,
) -> Result<ShiftedField, SimError> {
    let n = grid.steps_t();
    let h = grid.step();
    let paths = ens.paths();
    let dims = ens.dims();
    let lead = delays.state;
    assert!(phi.lead() >= lead, "history shorter than the state delay");
    assert!(phi.main_nodes() >= n, "free term does not reach the horizon");
    for (c, d) in controls.iter().zip(delays.control) {
        assert!(c.lead() >= d, "control history shorter than its delay");
        assert!(c.main_nodes() >= n.saturating_sub(1), "control table too short");
    }

    let rows = lead + n + 1;
    // Path-major staging so each path integrates over a contiguous slice.
    let mut staged = vec![0.0; paths * rows];
    let bad = staged
        .par_chunks_mut(rows)
        .enumerate()
        .map(|(p, x)| {
            for (row, slot) in x.iter_mut().enumerate() {
                let i = row as isize - lead as isize;
                if i <= 0 {
                    *slot = phi.get(p, i);
                }
            }
            for i in 1..=n {
                let t = grid.time(i);
                let mut acc = phi.get(p, i as isize);
                for j in 0..i {
                    let s = grid.time(j);
                    let xj = x[lead + j];
                    let x_delayed = x[lead + j - delays.state];
                    let u1 = controls[0].get(p, j as isize);
                    let u1_delayed = controls[0].get(p, j as isize - delays.control[0] as isize);
                    let u2 = controls[1].get(p, j as isize);
                    let u2_delayed = controls[1].get(p, j as isize - delays.control[1] as isize);
                    let drift = coeffs.drift(&DriftArgs {
                        t,
                        s,
                        x: xj,
                        x_delayed,
                        u1,
                        u1_delayed,
                        u2,
                        u2_delayed,
                    });
                    if !drift.is_finite() {
                        return Some((i, j));
                    }
                    acc += h * drift;
                    let dargs = DiffusionArgs {
                        t,
                        s,
                        x: xj,
                        u1,
                        u2,
                    };
                    for k in 0..dims {
                        let dif = coeffs.diffusion(&dargs, k);
                        if !dif.is_finite() {
                            return Some((i, j));
                        }
                        acc += dif * ens.increment(p, j, k);
                    }
                }
                x[lead + i] = acc;
            }
            None
        })
        .reduce(|| None, |a, b| a.or(b));
    if let Some((row, cell)) = bad {
        return Err(SimError::NonFiniteCoefficient { row, cell });
    }

    let mut out = ShiftedField::zeros(lead, n, paths);
    for row in 0..rows {
        let i = row as isize - lead as isize;
        let dst = out.node_mut(i);
        for (p, slot) in dst.iter_mut().enumerate() {
            *slot = staged[p * rows + row];
        }
    }
    Ok(out)
}

/// Convenience wrapper for the linear system with zero history and no
/// controls; `free` is the adapted free term on [0, T].
pub fn simulate_linear(
    kernels: &LinearKernels,
    free: &PathField,
    state_delay: usize,
    ens: &PathEnsemble,
    grid: &TimeGrid,
) -> Result<ShiftedField, SimError> {
    let n = grid.steps_t();
    let paths = ens.paths();
    assert!(free.nodes() > n);
    let phi = ShiftedField::from_fn(state_delay, n, paths, |p, i| {
        if i < 0 {
            0.0
        } else {
            free.get(p, i as usize)
        }
    });
    let coeffs = SdvieCoeffs::linear(kernels);
    let delays = SdvieDelays {
        state: state_delay,
        control: [0, 0],
    };
    let u1 = zero_control(0, grid, paths);
    let u2 = zero_control(0, grid, paths);
    simulate_sdvie(&coeffs, &phi, [&u1, &u2], delays, ens, grid)
}

/// Running-cost arguments at one node.
#[derive(Clone, Copy, Debug)]
pub struct CostArgs {
    pub t: f64,
    pub x: f64,
    pub x_delayed: f64,
    pub u1: f64,
    pub u1_delayed: f64,
    pub u2: f64,
    pub u2_delayed: f64,
}

type CostFn = Arc<dyn Fn(&CostArgs) -> f64 + Send + Sync>;

/// Running cost integrated by the left Riemann sum over [0, T].
#[derive(Clone)]
pub struct CostSpec(CostFn);

impl CostSpec {
    pub fn new(f: impl Fn(&CostArgs) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    /// Quadratic running cost of one player (the 1/2 factor included):
    /// `(q x^2 + q_delayed x_delayed^2 + r u^2 + r_delayed u_delayed^2) / 2`.
    pub fn quadratic(
        player: usize,
        q: TimeFn,
        q_delayed: TimeFn,
        r: TimeFn,
        r_delayed: TimeFn,
    ) -> Self {
        assert!(player < 2);
        Self::new(move |a| {
            let (u, u_delayed) = if player == 0 {
                (a.u1, a.u1_delayed)
            } else {
                (a.u2, a.u2_delayed)
            };
            0.5 * (q.eval(a.t) * a.x * a.x
                + q_delayed.eval(a.t) * a.x_delayed * a.x_delayed
                + r.eval(a.t) * u * u
                + r_delayed.eval(a.t) * u_delayed * u_delayed)
        })
    }

    #[inline]
    pub fn eval(&self, args: &CostArgs) -> f64 {
        (self.0)(args)
    }
}

/// Monte Carlo estimate and standard error of the performance functional.
pub fn performance(
    cost: &CostSpec,
    state: &ShiftedField,
    controls: [&ShiftedField; 2],
    delays: SdvieDelays,
    grid: &TimeGrid,
    ens: &PathEnsemble,
) -> Result<(f64, f64), SimError> {
    let n = grid.steps_t();
    let h = grid.step();
    let paths = ens.paths();
    let mut per_path = vec![0.0; paths];
    let bad = per_path
        .par_iter_mut()
        .enumerate()
        .map(|(p, acc)| {
            for i in 0..n {
                let v = cost.eval(&CostArgs {
                    t: grid.time(i),
                    x: state.get(p, i as isize),
                    x_delayed: state.get(p, i as isize - delays.state as isize),
                    u1: controls[0].get(p, i as isize),
                    u1_delayed: controls[0].get(p, i as isize - delays.control[0] as isize),
                    u2: controls[1].get(p, i as isize),
                    u2_delayed: controls[1].get(p, i as isize - delays.control[1] as isize),
                });
                if !v.is_finite() {
                    return Some(i);
                }
                *acc += h * v;
            }
            None
        })
        .reduce(|| None, |a, b| a.or(b));
    if let Some(i) = bad {
        return Err(SimError::NonFiniteCost(i));
    }
    Ok(mean_and_stderr(&per_path))
}
