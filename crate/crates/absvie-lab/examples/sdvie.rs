//! Forward simulation of a linear delay Volterra system and the quadratic
//! performance functional along its paths.
//!
//! ```bash
//! cargo run --release -p absvie-lab --example sdvie
//! ```

use absvie_lab::field::{mean_and_stderr, PathField};
use absvie_lab::grid::make_grid;
use absvie_lab::paths::sample_paths;
use absvie_lab::sdvie::{
    performance, simulate_linear, zero_control, CostSpec, Kernel, LinearKernels, SdvieDelays,
    TimeFn,
};

fn main() {
    let grid = make_grid(1.0, 0.25, 32).expect("aligned grid");
    let ens = sample_paths(&grid, 50_000, 1, 31);
    let delay = 8; // 0.25 time units

    let kernels = LinearKernels::new(
        Kernel::constant(0.5),
        Kernel::constant(0.3),
        Kernel::constant(0.4),
    );
    let free = PathField::from_fn(grid.node_count(), ens.paths(), |_, _| 1.0);
    let x = simulate_linear(&kernels, &free, delay, &ens, &grid).unwrap();

    println!("  t      E[X]       stderr");
    for i in (0..=grid.steps_t()).step_by(4) {
        let (m, se) = mean_and_stderr(x.node(i as isize));
        println!("  {:<6} {:<10.6} {:.1e}", grid.time(i), m, se);
    }

    let cost = CostSpec::quadratic(
        0,
        TimeFn::constant(1.0),
        TimeFn::constant(0.5),
        TimeFn::zero(),
        TimeFn::zero(),
    );
    let u = zero_control(0, &grid, ens.paths());
    let delays = SdvieDelays {
        state: delay,
        control: [0, 0],
    };
    let (j, se) = performance(&cost, &x, [&u, &u], delays, &grid, &ens).unwrap();
    println!("\nquadratic state cost: {j:.6} +- {se:.6}");
}
