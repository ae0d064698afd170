//! Two-player game on a delay Volterra state: iterate the damped
//! best-response fixed point, then certify the equilibrium by stationarity
//! and paired cost perturbations.
//!
//! ```bash
//! cargo run --release -p absvie-lab --example lq_game
//! ```

use absvie_lab::game::{
    perturbation_check, solve_nash, stationarity_residual, LqGameSpec, NashOptions,
};
use absvie_lab::field::mean;
use absvie_lab::grid::make_grid;
use absvie_lab::paths::sample_paths;
use absvie_lab::sdvie::{Kernel, TimeFn};

fn main() {
    let grid = make_grid(1.0, 0.25, 32).expect("aligned grid");
    let ens = sample_paths(&grid, 10_000, 1, 29);
    let d = 8; // all delays 0.25

    let spec = LqGameSpec {
        state_kernel: Kernel::new(|t, s| 0.3 * (t - s)),
        delayed_state_kernel: Kernel::new(|t, s| 0.2 * (t - s)),
        control_kernel: [
            Kernel::new(|t, s| 0.5 * (t - s)),
            Kernel::new(|t, s| 0.4 * (t - s)),
        ],
        delayed_control_kernel: [
            Kernel::new(|t, s| 0.2 * (t - s)),
            Kernel::new(|t, s| 0.1 * (t - s)),
        ],
        diffusion_state_kernel: Kernel::new(|t, s| 0.4 * (t - s)),
        diffusion_control_kernel: [
            Kernel::new(|t, s| 0.1 * (t - s)),
            Kernel::new(|t, s| 0.15 * (t - s)),
        ],
        state_weight: [TimeFn::constant(1.0), TimeFn::constant(0.5)],
        delayed_state_weight: [TimeFn::constant(0.5), TimeFn::constant(0.2)],
        control_weight: [TimeFn::constant(1.0), TimeFn::constant(1.0)],
        delayed_control_weight: [TimeFn::constant(0.5), TimeFn::constant(0.5)],
        state_delay: d,
        control_delay: [d, d],
        initial: TimeFn::constant(1.0),
        control_history: [TimeFn::zero(), TimeFn::zero()],
    };

    let options = NashOptions {
        damping: 0.5,
        tol: 1e-4,
        max_iter: 60,
        basis_degree: 2,
        solver_tol: 1e-6,
        solver_max_iter: 60,
    };
    let outcome = solve_nash(&spec, &ens, &grid, &options).unwrap();
    println!(
        "converged in {} iterations (last update {:.2e})",
        outcome.iterate.iteration, outcome.iterate.distance
    );
    if let Some(j) = outcome.diagnostics.costs.last() {
        println!("costs: J1 = {:.5}, J2 = {:.5}", j[0], j[1]);
    }

    println!("  t      mean u1     mean u2");
    for i in (0..grid.steps_t()).step_by(8) {
        println!(
            "  {:<6} {:<11.6} {:<11.6}",
            grid.time(i),
            mean(outcome.iterate.controls[0].node(i as isize)),
            mean(outcome.iterate.controls[1].node(i as isize)),
        );
    }

    let report = stationarity_residual(
        &spec,
        &outcome.iterate,
        [&outcome.adjoints[0], &outcome.adjoints[1]],
        &grid,
    );
    println!("worst stationarity residual: {:.2e}", report.worst());

    let rows = perturbation_check(
        &spec,
        &outcome.iterate,
        &[TimeFn::constant(1.0), TimeFn::new(|t| 1.0 - t)],
        &[0.1, 0.2],
        &ens,
        &grid,
    )
    .unwrap();
    println!("unilateral deviations (all should cost, up to noise):");
    for row in rows {
        println!(
            "  player {} dir {} eps {:<4}: dJ = {:+.5} +- {:.5}",
            row.player + 1,
            row.direction,
            row.epsilon,
            row.delta_cost,
            row.stderr
        );
    }
}
