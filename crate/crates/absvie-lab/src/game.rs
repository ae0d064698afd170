//! Two-player linear-quadratic game on a delay Volterra state, solved as a
//! damped best-response fixed point of the open-loop characterization:
//!
//! 1. simulate the state under the current control pair,
//! 2. solve each player's adjoint backward equation (the dual linear
//!    generator with the state-cost free term), and project the
//!    control-gradient integral to get the adapted process `Y0_i`,
//! 3. candidate controls `u_i = -Y0_i / (r_i(t) + r_shift_i(t + d_i))`,
//!    the shifted control weight extended by zero past the horizon,
//! 4. damp: `u <- (1 - rho) u + rho candidate` until the L2 control update
//!    is below tolerance.
//!
//! The equilibrium is certified by the stationarity residual
//! `Y0_i + (r_i + r_shift_i) u_i` (zero at an exact fixed point) and by
//! paired cost-perturbation experiments: unilateral deviations can only
//! increase a player's own cost, up to Monte Carlo noise.

use crate::absvie::{solve_absvie, FreeTerm, MSolution, SolveDiagnostics, SolveError};
use crate::duality::dual_generator;
use crate::field::{mean_sq, mean_sq_diff, PairField, PathField, ShiftedField};
use crate::grid::TimeGrid;
use crate::paths::PathEnsemble;
use crate::regress::{Basis, NodeDesign};
use crate::sdvie::{
    performance, simulate_sdvie, CostSpec, Kernel, LinearKernels, SdvieCoeffs, SdvieDelays,
    SimError, TimeFn,
};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("effective control weight not positive for player {player} at node {node}")]
    BadControlWeight { player: usize, node: usize },
    #[error("state cost weight negative at node {node}")]
    NegativeStateWeight { node: usize },
    #[error("delay of {delay} cells exceeds the grid anticipation span of {span} cells")]
    DelayBeyondSpan { delay: usize, span: usize },
    #[error(
        "Nash iteration did not converge in {iterations} rounds (last update {last_distance:e}); \
         reduce the damping factor or the coupling kernels"
    )]
    NoConvergence {
        iterations: usize,
        last_distance: f64,
    },
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Kernels, costs, delays and histories of the two-player game.
#[derive(Clone)]
pub struct LqGameSpec {
    pub state_kernel: Kernel,
    pub delayed_state_kernel: Kernel,
    pub control_kernel: [Kernel; 2],
    pub delayed_control_kernel: [Kernel; 2],
    pub diffusion_state_kernel: Kernel,
    pub diffusion_control_kernel: [Kernel; 2],
    /// Nonnegative weights on X(t)^2.
    pub state_weight: [TimeFn; 2],
    /// Nonnegative weights on X(t - delta)^2.
    pub delayed_state_weight: [TimeFn; 2],
    /// Positive weights on u_i(t)^2.
    pub control_weight: [TimeFn; 2],
    /// Positive weights on u_i(t - delta_i)^2 (zero past the horizon).
    pub delayed_control_weight: [TimeFn; 2],
    /// State delay, in cells.
    pub state_delay: usize,
    /// Control delays, in cells.
    pub control_delay: [usize; 2],
    /// State free term / history on [-delta, T].
    pub initial: TimeFn,
    /// Control histories on [-delta_i, 0).
    pub control_history: [TimeFn; 2],
}

impl LqGameSpec {
    /// Divisor of the equilibrium formula: the control weight plus the
    /// delayed weight shifted forward, zero once the shift leaves [0, T].
    pub fn effective_control_weight(&self, player: usize, t: f64, grid: &TimeGrid) -> f64 {
        let shift = self.control_delay[player] as f64 * grid.step();
        let mut w = self.control_weight[player].eval(t);
        if t + shift <= grid.horizon() + 1e-12 {
            w += self.delayed_control_weight[player].eval(t + shift);
        }
        w
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<(), GameError> {
        let span = grid.cells() - grid.steps_t();
        for d in [
            self.state_delay,
            self.control_delay[0],
            self.control_delay[1],
        ] {
            if d > span {
                return Err(GameError::DelayBeyondSpan { delay: d, span });
            }
        }
        for node in 0..grid.steps_t() {
            let t = grid.time(node);
            for player in 0..2 {
                if self.effective_control_weight(player, t, grid) <= 0.0 {
                    return Err(GameError::BadControlWeight { player, node });
                }
                if self.state_weight[player].eval(t) < 0.0
                    || self.delayed_state_weight[player].eval(t) < 0.0
                {
                    return Err(GameError::NegativeStateWeight { node });
                }
            }
        }
        Ok(())
    }

    fn forward_delays(&self) -> SdvieDelays {
        SdvieDelays {
            state: self.state_delay,
            control: self.control_delay,
        }
    }

    /// State coefficients. Player terms are grouped symmetrically so that
    /// swapping the players' data swaps the outputs bitwise.
    fn forward_coeffs(&self) -> SdvieCoeffs {
        let a1 = self.state_kernel.clone();
        let a2 = self.delayed_state_kernel.clone();
        let b = self.control_kernel.clone();
        let c = self.delayed_control_kernel.clone();
        let a1d = self.diffusion_state_kernel.clone();
        let bd = self.diffusion_control_kernel.clone();
        SdvieCoeffs::new(
            move |a| {
                let state = a1.eval(a.t, a.s) * a.x + a2.eval(a.t, a.s) * a.x_delayed;
                let p1 = b[0].eval(a.t, a.s) * a.u1 + c[0].eval(a.t, a.s) * a.u1_delayed;
                let p2 = b[1].eval(a.t, a.s) * a.u2 + c[1].eval(a.t, a.s) * a.u2_delayed;
                state + (p1 + p2)
            },
            move |a, _| {
                a1d.eval(a.t, a.s) * a.x + (bd[0].eval(a.t, a.s) * a.u1 + bd[1].eval(a.t, a.s) * a.u2)
            },
        )
    }

    /// State free term / history table.
    pub fn initial_field(&self, grid: &TimeGrid, paths: usize) -> ShiftedField {
        let values: Vec<f64> = (0..=self.state_delay + grid.steps_t())
            .map(|row| {
                let i = row as isize - self.state_delay as isize;
                self.initial.eval(i as f64 * grid.step())
            })
            .collect();
        ShiftedField::from_fn(self.state_delay, grid.steps_t(), paths, |_, i| {
            values[(i + self.state_delay as isize) as usize]
        })
    }

    /// Zero control with its history prefix.
    pub fn history_control(&self, player: usize, grid: &TimeGrid, paths: usize) -> ShiftedField {
        let d = self.control_delay[player];
        let hist = self.control_history[player].clone();
        let h = grid.step();
        ShiftedField::from_fn(d, grid.steps_t(), paths, move |_, i| {
            if i < 0 {
                hist.eval(i as f64 * h)
            } else {
                0.0
            }
        })
    }

    /// Running cost of one player.
    pub fn cost_spec(&self, player: usize) -> CostSpec {
        CostSpec::quadratic(
            player,
            self.state_weight[player].clone(),
            self.delayed_state_weight[player].clone(),
            self.control_weight[player].clone(),
            self.delayed_control_weight[player].clone(),
        )
    }
}

/// Simulates the state under a control pair.
pub fn simulate_state(
    spec: &LqGameSpec,
    controls: [&ShiftedField; 2],
    ens: &PathEnsemble,
    grid: &TimeGrid,
) -> Result<ShiftedField, GameError> {
    let phi = spec.initial_field(grid, ens.paths());
    Ok(simulate_sdvie(
        &spec.forward_coeffs(),
        &phi,
        controls,
        spec.forward_delays(),
        ens,
        grid,
    )?)
}

/// Player cost under given state and controls.
pub fn cost(
    spec: &LqGameSpec,
    state: &ShiftedField,
    controls: [&ShiftedField; 2],
    player: usize,
    ens: &PathEnsemble,
    grid: &TimeGrid,
) -> Result<(f64, f64), GameError> {
    Ok(performance(
        &spec.cost_spec(player),
        state,
        controls,
        spec.forward_delays(),
        grid,
        ens,
    )?)
}

/// Regression basis for the adjoint solves: Brownian polynomials plus the
/// current and delayed state as adapted features.
pub fn adjoint_basis(
    spec: &LqGameSpec,
    state: &ShiftedField,
    ens: &PathEnsemble,
    grid: &TimeGrid,
    degree: u32,
) -> Basis {
    let mut basis = Basis::brownian(ens.dims(), degree);
    let n = grid.steps_t();
    let current = PathField::from_fn(grid.node_count(), ens.paths(), |p, i| {
        state.get(p, i.min(n) as isize)
    });
    basis.register_state(Arc::new(current), 1);
    if spec.state_delay > 0 {
        let d = spec.state_delay as isize;
        let delayed = PathField::from_fn(grid.node_count(), ens.paths(), |p, i| {
            state.get(p, i.min(n) as isize - d)
        });
        basis.register_state(Arc::new(delayed), 1);
    }
    basis
}

/// One player's adjoint data: the backward M-solution, the projected
/// control-gradient process, and its representation field (diagnostic).
pub struct AdjointSolution {
    pub solution: MSolution,
    pub y0: PathField,
    /// Fit standard error of y0 per node.
    pub y0_stderr: Vec<f64>,
    /// Representation coefficients of the control-gradient integral.
    pub z0: PairField,
    pub diagnostics: SolveDiagnostics,
}

/// Solves the adjoint pair (backward equation plus projected gradient) for
/// one player along a simulated state.
#[allow(clippy::too_many_arguments)]
pub fn solve_adjoint(
    spec: &LqGameSpec,
    state: &ShiftedField,
    player: usize,
    ens: &PathEnsemble,
    grid: &TimeGrid,
    basis: &Basis,
    tol: f64,
    max_iter: usize,
) -> Result<AdjointSolution, GameError> {
    assert_eq!(ens.dims(), 1, "the game is a scalar-noise construction");
    let n = grid.steps_t();
    let h = grid.step();
    let paths = ens.paths();
    let horizon = grid.horizon();
    let shift = spec.state_delay as f64 * h;

    // Free term (q_i(t) + q_shift_i(t + delta)) X(t), zero boundary rows.
    let q = spec.state_weight[player].clone();
    let q_shift = spec.delayed_state_weight[player].clone();
    let phi = PathField::from_fn(grid.node_count(), paths, |p, i| {
        if i >= n {
            return 0.0;
        }
        let t = grid.time(i);
        let mut w = q.eval(t);
        if t + shift <= horizon + 1e-12 {
            w += q_shift.eval(t + shift);
        }
        w * state.get(p, i as isize)
    });
    let free = FreeTerm::new(phi);
    let kernels = LinearKernels::new(
        spec.state_kernel.clone(),
        spec.delayed_state_kernel.clone(),
        spec.diffusion_state_kernel.clone(),
    );
    let gen = dual_generator(&kernels, grid, spec.state_delay);
    let (solution, diagnostics) = solve_absvie(&gen, &free, ens, grid, basis, tol, max_iter)?;

    // Control-gradient integral, projected node by node.
    let b = spec.control_kernel[player].clone();
    let c = spec.delayed_control_kernel[player].clone();
    let b_diff = spec.diffusion_control_kernel[player].clone();
    let d_u = spec.control_delay[player];
    let shift_u = d_u as f64 * h;

    let mut y0 = PathField::zeros(grid.node_count(), paths);
    let mut y0_stderr = vec![0.0; grid.node_count()];
    let mut z0 = PairField::zeros(grid.node_count(), grid.cells().max(1), paths);
    let mut integral = vec![0.0; paths];
    let mut fitted = vec![0.0; paths];
    let mut settled = vec![0.0; paths];
    let mut target = vec![0.0; paths];
    let designs: Vec<NodeDesign> = (0..n).map(|j| NodeDesign::build(basis, ens, j)).collect();

    for i in 0..n {
        let t = grid.time(i);
        integral.fill(0.0);
        for j in i..n {
            let s = grid.time(j);
            let w_b = b.eval(s, t);
            let w_c = if s + shift_u <= horizon + 1e-12 {
                c.eval(s + shift_u, t + shift_u)
            } else {
                0.0
            };
            let w_bd = b_diff.eval(s, t);
            let y_j = solution.y().node(j);
            let y_adv = solution.y().node(j + d_u);
            let z_col = solution.z(0).entry(j, i);
            for p in 0..paths {
                integral[p] += h * (w_b * y_j[p] + w_c * y_adv[p] + w_bd * z_col[p]);
            }
        }
        let stats = designs[i].project_into(&integral, &mut fitted);
        y0.node_mut(i).copy_from_slice(&fitted);
        y0_stderr[i] = stats.stderr;

        // Representation coefficients of the integral (diagnostic only).
        for j in i..n {
            designs[j].project_into(&integral, &mut settled);
            let dw = ens.increments_at(j, 0);
            for p in 0..paths {
                target[p] = (integral[p] - settled[p]) * dw[p];
            }
            designs[j].project_into(&target, &mut fitted);
            let out = z0.entry_mut(i, j);
            for (o, &f) in out.iter_mut().zip(&fitted) {
                *o = f / h;
            }
        }
    }

    Ok(AdjointSolution {
        solution,
        y0,
        y0_stderr,
        z0,
        diagnostics,
    })
}

/// Candidate equilibrium controls from the adjoint pair.
pub fn nash_update(
    spec: &LqGameSpec,
    adjoints: [&AdjointSolution; 2],
    grid: &TimeGrid,
    paths: usize,
) -> [ShiftedField; 2] {
    let n = grid.steps_t();
    let update = |player: usize| {
        let mut u = spec.history_control(player, grid, paths);
        for i in 0..n {
            let w = spec.effective_control_weight(player, grid.time(i), grid);
            let y0 = adjoints[player].y0.node(i);
            let slot = u.node_mut(i as isize);
            for (s, &v) in slot.iter_mut().zip(y0) {
                *s = -v / w;
            }
        }
        u
    };
    [update(0), update(1)]
}

/// Converged control pair plus bookkeeping.
pub struct NashIterate {
    pub controls: [ShiftedField; 2],
    pub iteration: usize,
    /// L2 size of the last control update.
    pub distance: f64,
}

#[derive(Clone, Debug, Default)]
pub struct NashDiagnostics {
    pub distances: Vec<f64>,
    /// (J_1, J_2) per iteration.
    pub costs: Vec<[f64; 2]>,
    pub converged: bool,
}

/// Solver knobs for the fixed-point iteration.
#[derive(Clone, Copy, Debug)]
pub struct NashOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub basis_degree: u32,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
}

impl Default for NashOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-4,
            max_iter: 60,
            basis_degree: 2,
            solver_tol: 1e-6,
            solver_max_iter: 60,
        }
    }
}

/// Result of the fixed-point iteration: the control pair, the state under
/// the previous controls, and the adjoints that produced the last update.
pub struct NashOutcome {
    pub iterate: NashIterate,
    pub state: ShiftedField,
    pub adjoints: [AdjointSolution; 2],
    pub diagnostics: NashDiagnostics,
}

/// Damped best-response iteration from zero controls.
pub fn solve_nash(
    spec: &LqGameSpec,
    ens: &PathEnsemble,
    grid: &TimeGrid,
    options: &NashOptions,
) -> Result<NashOutcome, GameError> {
    assert!(options.damping > 0.0 && options.damping <= 1.0);
    spec.validate(grid)?;
    let n = grid.steps_t();
    let h = grid.step();
    let paths = ens.paths();
    let rho = options.damping;

    let mut controls = [
        spec.history_control(0, grid, paths),
        spec.history_control(1, grid, paths),
    ];
    let mut diagnostics = NashDiagnostics::default();

    for iteration in 1..=options.max_iter {
        let state = simulate_state(spec, [&controls[0], &controls[1]], ens, grid)?;
        let basis = adjoint_basis(spec, &state, ens, grid, options.basis_degree);
        let adj0 = solve_adjoint(
            spec,
            &state,
            0,
            ens,
            grid,
            &basis,
            options.solver_tol,
            options.solver_max_iter,
        )?;
        let adj1 = solve_adjoint(
            spec,
            &state,
            1,
            ens,
            grid,
            &basis,
            options.solver_tol,
            options.solver_max_iter,
        )?;
        let candidate = nash_update(spec, [&adj0, &adj1], grid, paths);

        let mut dist2 = 0.0;
        for player in 0..2 {
            for i in 0..n {
                let old = controls[player].node(i as isize);
                let cand = candidate[player].node(i as isize);
                dist2 += h * rho * rho * mean_sq_diff(cand, old);
            }
        }
        let distance = dist2.sqrt();
        diagnostics.distances.push(distance);

        for player in 0..2 {
            for i in 0..n {
                let cand = candidate[player].node(i as isize).to_vec();
                let slot = controls[player].node_mut(i as isize);
                for (s, c) in slot.iter_mut().zip(cand) {
                    *s = (1.0 - rho) * *s + rho * c;
                }
            }
        }

        let j0 = cost(spec, &state, [&controls[0], &controls[1]], 0, ens, grid)?;
        let j1 = cost(spec, &state, [&controls[0], &controls[1]], 1, ens, grid)?;
        diagnostics.costs.push([j0.0, j1.0]);

        if distance <= options.tol {
            diagnostics.converged = true;
            return Ok(NashOutcome {
                iterate: NashIterate {
                    controls,
                    iteration,
                    distance,
                },
                state,
                adjoints: [adj0, adj1],
                diagnostics,
            });
        }
    }
    Err(GameError::NoConvergence {
        iterations: options.max_iter,
        last_distance: diagnostics.distances.last().copied().unwrap_or(f64::NAN),
    })
}

/// Per-node stationarity residuals of the bracket `Y0_i + w_i u_i`,
/// normalized by the overall scale of its two parts.
#[derive(Clone, Debug)]
pub struct StationarityReport {
    /// Normalized residual per node, per player.
    pub residuals: [Vec<f64>; 2],
    /// Normalizing scale per player.
    pub scale: [f64; 2],
    /// 3x fit standard error of Y0 per node, normalized by the same scale.
    pub noise_floor: [Vec<f64>; 2],
}

impl StationarityReport {
    /// Worst residual over nodes and players.
    pub fn worst(&self) -> f64 {
        self.residuals
            .iter()
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    }

    /// True when every residual is below `max(tol, noise floor)`.
    pub fn within(&self, tol: f64) -> bool {
        for player in 0..2 {
            for (r, floor) in self.residuals[player].iter().zip(&self.noise_floor[player]) {
                if *r > tol.max(*floor) {
                    return false;
                }
            }
        }
        true
    }
}

/// Evaluates the stationarity residual of an iterate against its adjoints.
pub fn stationarity_residual(
    spec: &LqGameSpec,
    iterate: &NashIterate,
    adjoints: [&AdjointSolution; 2],
    grid: &TimeGrid,
) -> StationarityReport {
    let n = grid.steps_t();
    let h = grid.step();
    let mut residuals = [vec![0.0; n], vec![0.0; n]];
    let mut noise_floor = [vec![0.0; n], vec![0.0; n]];
    let mut scale = [0.0f64; 2];
    for player in 0..2 {
        let mut y0_norm2 = 0.0;
        let mut wu_norm2 = 0.0;
        for i in 0..n {
            let w = spec.effective_control_weight(player, grid.time(i), grid);
            let y0 = adjoints[player].y0.node(i);
            let u = iterate.controls[player].node(i as isize);
            let resid: Vec<f64> = y0.iter().zip(u).map(|(a, b)| a + w * b).collect();
            residuals[player][i] = mean_sq(&resid).sqrt();
            y0_norm2 += h * mean_sq(y0);
            wu_norm2 += h * mean_sq(&u.iter().map(|v| w * v).collect::<Vec<_>>());
            noise_floor[player][i] = 3.0 * adjoints[player].y0_stderr[i];
        }
        scale[player] = (y0_norm2.sqrt() + wu_norm2.sqrt()).max(1e-300);
        for i in 0..n {
            residuals[player][i] /= scale[player];
            noise_floor[player][i] /= scale[player];
        }
    }
    StationarityReport {
        residuals,
        scale,
        noise_floor,
    }
}

/// One row of the perturbation table.
#[derive(Clone, Debug)]
pub struct PerturbationRow {
    pub player: usize,
    pub direction: usize,
    pub epsilon: f64,
    /// J_i(perturbed) - J_i(star), paired on the shared ensemble.
    pub delta_cost: f64,
    pub stderr: f64,
}

/// Cost response to unilateral deviations `u_i + eps * v` for each player,
/// direction and epsilon, paired path by path against the equilibrium cost.
pub fn perturbation_check(
    spec: &LqGameSpec,
    iterate: &NashIterate,
    directions: &[TimeFn],
    epsilons: &[f64],
    ens: &PathEnsemble,
    grid: &TimeGrid,
) -> Result<Vec<PerturbationRow>, GameError> {
    let n = grid.steps_t();
    let paths = ens.paths();
    let delays = spec.forward_delays();
    let base_state = simulate_state(spec, [&iterate.controls[0], &iterate.controls[1]], ens, grid)?;

    let per_path_cost = |state: &ShiftedField,
                         controls: [&ShiftedField; 2],
                         player: usize|
     -> Result<Vec<f64>, GameError> {
        let costs = spec.cost_spec(player);
        let mut out = vec![0.0; paths];
        let h = grid.step();
        for p in 0..paths {
            let mut acc = 0.0;
            for i in 0..n {
                let t = grid.time(i);
                acc += h * costs.eval(&crate::sdvie::CostArgs {
                    t,
                    x: state.get(p, i as isize),
                    x_delayed: state.get(p, i as isize - delays.state as isize),
                    u1: controls[0].get(p, i as isize),
                    u1_delayed: controls[0].get(p, i as isize - delays.control[0] as isize),
                    u2: controls[1].get(p, i as isize),
                    u2_delayed: controls[1].get(p, i as isize - delays.control[1] as isize),
                });
            }
            out[p] = acc;
        }
        Ok(out)
    };

    let mut rows = Vec::new();
    for player in 0..2 {
        let base_cost = per_path_cost(
            &base_state,
            [&iterate.controls[0], &iterate.controls[1]],
            player,
        )?;
        for (direction, v) in directions.iter().enumerate() {
            for &epsilon in epsilons {
                let mut bumped = iterate.controls[player].clone();
                for i in 0..n {
                    let dv = epsilon * v.eval(grid.time(i));
                    for s in bumped.node_mut(i as isize) {
                        *s += dv;
                    }
                }
                let pair: [&ShiftedField; 2] = if player == 0 {
                    [&bumped, &iterate.controls[1]]
                } else {
                    [&iterate.controls[0], &bumped]
                };
                let state = simulate_state(spec, pair, ens, grid)?;
                let cost_perturbed = per_path_cost(&state, pair, player)?;
                let diff: Vec<f64> = cost_perturbed
                    .iter()
                    .zip(&base_cost)
                    .map(|(a, b)| a - b)
                    .collect();
                let (delta_cost, stderr) = crate::field::mean_and_stderr(&diff);
                rows.push(PerturbationRow {
                    player,
                    direction,
                    epsilon,
                    delta_cost,
                    stderr,
                });
            }
        }
    }
    Ok(rows)
}

/// Per-path value of the game Hamiltonian of `player` at `node`, as a linear
/// function of a scalar control argument.
pub fn hamiltonian(
    spec: &LqGameSpec,
    iterate: &NashIterate,
    adjoints: [&AdjointSolution; 2],
    player: usize,
    node: usize,
    control: f64,
    grid: &TimeGrid,
) -> Vec<f64> {
    let t = grid.time(node);
    let w = spec.effective_control_weight(player, t, grid);
    let y0 = adjoints[player].y0.node(node);
    let u = iterate.controls[player].node(node as isize);
    y0.iter()
        .zip(u)
        .map(|(a, b)| -(a + w * b) * control)
        .collect()
}
