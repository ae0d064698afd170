//! Ordering check for a pair of anticipated generators: the spot check of
//! the declared monotonicity hypotheses, then the pathwise ordering of the
//! two solutions on a shared ensemble.
//!
//! ```bash
//! cargo run --release -p absvie-lab --example comparison
//! ```

use absvie_lab::comparison::{run_comparison, spot_check_monotonicity, ComparisonCase, MonotoneFlags};
use absvie_lab::absvie::{FreeTerm, GeneratorSpec};
use absvie_lab::grid::{make_grid, DelaySpec};
use absvie_lab::paths::sample_paths;
use absvie_lab::regress::Basis;

fn main() {
    let grid = make_grid(1.0, 0.25, 32).expect("aligned grid");
    let ens = sample_paths(&grid, 10_000, 1, 11);
    let delays = DelaySpec::constant(8, 0); // advance 0.25

    // Spot check on a globally valid envelope: middle(y) = y between y - 1
    // and y + 1, monotone in every declared argument.
    use absvie_lab::absvie::{ArgUsage, GenArgs};
    let identity = |shift: f64| {
        GeneratorSpec::new(
            ArgUsage::none().with_y(),
            0.0,
            DelaySpec::none(),
            move |a: &GenArgs<'_>| a.y + shift,
        )
    };
    let envelope = ComparisonCase {
        lower: identity(-1.0),
        upper: identity(1.0),
        middle: identity(0.0),
        phi_lower: FreeTerm::deterministic(&grid, ens.paths(), |_| 0.0),
        phi_upper: FreeTerm::deterministic(&grid, ens.paths(), |_| 0.0),
        declared: MonotoneFlags::default(),
    };
    let spot = spot_check_monotonicity(&envelope, &grid, 10_000, 3);
    println!(
        "hypothesis spot check: {} samples, {} violations",
        spot.samples,
        spot.violations.len()
    );

    // Ordering of an anticipated pair with coupling 0.2 < 0.4.
    let phi = FreeTerm::deterministic(&grid, ens.paths(), |_| 1.0);
    let case = ComparisonCase {
        lower: GeneratorSpec::advanced_value(0.2, delays.clone()),
        upper: GeneratorSpec::advanced_value(0.4, delays.clone()),
        middle: GeneratorSpec::advanced_value(0.3, delays),
        phi_lower: phi.clone(),
        phi_upper: phi,
        declared: MonotoneFlags::default(),
    };
    let report = run_comparison(&case, &ens, &grid, &Basis::constant(), 1e-12, 100).unwrap();
    println!("ordering report ({}):", if report.pass { "pass" } else { "fail" });
    println!("  t      margin     worst excess  violations");
    for node in report.per_node.iter().step_by(8) {
        println!(
            "  {:<6} {:<10.6} {:<13.2e} {:.4}",
            node.time, node.mean_margin, node.worst_excess, node.violation_fraction
        );
    }
}
