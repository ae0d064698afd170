//! Drive the experiment runner the way the `absvie-lab` binary does: parse a
//! TOML config, run it, and inspect the verdict and result rows in memory.
//!
//! ```bash
//! cargo run --release -p absvie-lab --example experiment_cli
//! ```

use absvie_lab::runner::{self, ExperimentConfig};

const CONFIG: &str = r#"
experiment = "check-duality"

[grid]
t = 1.0
k = 0.25
steps = 32

[mc]
paths = 20000
seed = 99

[basis]
degree = 2

[problem]
name = "linear-deterministic"

[solver]
tol = 1e-10
max_iter = 100
"#;

fn main() {
    println!("builtin catalog:\n{}", runner::catalog_text());

    let config = ExperimentConfig::parse(CONFIG).expect("valid config");
    let outcome = runner::run(&config).expect("runs");
    println!(
        "verdict: {}",
        if outcome.verdict.passed() { "pass" } else { "fail" }
    );
    println!("{}", outcome.table.to_csv());
}
