//! Derivative-representation check: the field column of a linear backward
//! solution at a cell equals the projected derivative solution with respect
//! to that cell's increment.
//!
//! ```bash
//! cargo run --release -p absvie-lab --example regularity
//! ```

use absvie_lab::grid::make_grid;
use absvie_lab::paths::sample_paths;
use absvie_lab::regularity::{
    check_representation, derivative_oracle, solve_base, solve_derivative, LinearRegularityCase,
};
use absvie_lab::sdvie::{Kernel, LinearKernels, TimeFn};

fn main() {
    let grid = make_grid(1.0, 0.0, 32).expect("aligned grid");
    let ens = sample_paths(&grid, 50_000, 1, 23);

    let case = LinearRegularityCase {
        kernels: LinearKernels::new(Kernel::constant(0.5), Kernel::zero(), Kernel::zero()),
        delay: 0,
        noise_weight: TimeFn::constant(1.0),
        base_value: 1.0,
    };
    let basis = case.basis(&ens, &grid, 2);
    let (base, diag) = solve_base(&case, &ens, &grid, &basis, 1e-6, 30).unwrap();
    println!("base solve: {} sweeps", diag.iterations);

    // Derivative problems are deterministic; a small ensemble suffices.
    let small = sample_paths(&grid, 256, 1, 23);
    let small_basis = case.basis(&small, &grid, 2);
    println!("  r      derivative at r+1  oracle       representation max err");
    for r in [4, 12, 20, 28] {
        let der = solve_derivative(&case, r, &small, &grid, &small_basis, 1e-10, 60).unwrap();
        let oracle = derivative_oracle(&case, r, &grid);
        let report =
            check_representation(&base, &case, r, &ens, &grid, &basis, 1e-10, 60).unwrap();
        println!(
            "  {:<6} {:<18.8} {:<12.8} {:.3}",
            grid.time(r),
            der.mean_y()[r + 1],
            oracle[r + 1],
            report.max_rel_err
        );
    }
}
