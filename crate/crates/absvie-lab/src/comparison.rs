//! Harness for the ordering theorem: solve a pair of scalar backward
//! equations whose generators read only (y, z_row, y_adv, y_avg) — no
//! transposed-field arguments — and test the pathwise ordering of the
//! solutions, with a spot check of the declared monotonicity hypotheses.
//!
//! Almost-sure ordering is tested as a per-node violation fraction below
//! 1e-3 after an allowance of three pooled regression standard errors; for
//! deterministic data the shared-ensemble pipeline is exactly linear, so the
//! ordering holds with zero tolerance.

use crate::absvie::{solve_absvie, FreeTerm, GenArgs, GeneratorSpec, SolveError};
use crate::grid::TimeGrid;
use crate::paths::{counter_uniform, inverse_normal_cdf, PathEnsemble};
use crate::regress::Basis;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ComparisonError {
    #[error("generator reads a transposed or row-advanced field argument, outside the comparison class")]
    UnsupportedArguments,
    #[error("free terms are not ordered at node {node}, path {path}")]
    UnorderedFreeTerms { node: usize, path: usize },
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Which monotonicity hypotheses the middle generator is declared to satisfy.
#[derive(Clone, Copy, Debug)]
pub struct MonotoneFlags {
    pub nondecreasing_in_y: bool,
    pub increasing_in_y_adv: bool,
    pub increasing_in_y_avg: bool,
}

impl Default for MonotoneFlags {
    fn default() -> Self {
        Self {
            nondecreasing_in_y: true,
            increasing_in_y_adv: true,
            increasing_in_y_avg: true,
        }
    }
}

/// A pair of problems plus the middle generator used for hypothesis checks.
#[derive(Clone)]
pub struct ComparisonCase {
    pub lower: GeneratorSpec,
    pub upper: GeneratorSpec,
    pub middle: GeneratorSpec,
    pub phi_lower: FreeTerm,
    pub phi_upper: FreeTerm,
    pub declared: MonotoneFlags,
}

impl ComparisonCase {
    /// Checks the structural restrictions of the comparison class.
    pub fn validate(&self, grid: &TimeGrid) -> Result<(), ComparisonError> {
        for spec in [&self.lower, &self.upper, &self.middle] {
            let u = spec.usage;
            if u.z_col || u.z_col_adv || u.z_col_avg || u.z_row_adv || u.z_row_avg {
                return Err(ComparisonError::UnsupportedArguments);
            }
        }
        let lo = self.phi_lower.phi();
        let hi = self.phi_upper.phi();
        for i in 0..grid.node_count() {
            let (a, b) = (lo.node(i), hi.node(i));
            for p in 0..a.len() {
                if a[p] > b[p] {
                    return Err(ComparisonError::UnorderedFreeTerms { node: i, path: p });
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    NotNondecreasingInY,
    NotIncreasingInYAdv,
    NotIncreasingInYAvg,
    LowerAboveMiddle,
    MiddleAboveUpper,
}

#[derive(Clone, Debug)]
pub struct MonotonicityViolation {
    pub kind: ViolationKind,
    pub t: f64,
    pub s: f64,
    pub base_value: f64,
    pub perturbed_value: f64,
}

/// Report of the randomized hypothesis check.
#[derive(Clone, Debug, Default)]
pub struct MonotonicityReport {
    pub samples: usize,
    pub violations: Vec<MonotonicityViolation>,
}

impl MonotonicityReport {
    pub fn clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Samples random argument tuples and ordered perturbations, reporting every
/// violation of the declared monotonicity or of the lower <= middle <= upper
/// envelope. Report-only: never fails.
pub fn spot_check_monotonicity(
    case: &ComparisonCase,
    grid: &TimeGrid,
    samples: usize,
    seed: u64,
) -> MonotonicityReport {
    let n = grid.steps_t();
    let mut report = MonotonicityReport {
        samples,
        ..Default::default()
    };
    let gauss = |k: u64, slot: u64| 2.0 * inverse_normal_cdf(counter_uniform(seed, k, slot, 0));
    let tol = 1e-12;

    for k in 0..samples as u64 {
        let j = (counter_uniform(seed, k, 100, 0) * n as f64) as usize % n;
        let i = (counter_uniform(seed, k, 101, 0) * (j + 1) as f64) as usize % (j + 1);
        let (t, s) = (grid.time(i), grid.time(j));
        let y = gauss(k, 0);
        let z = gauss(k, 1);
        let y_adv = gauss(k, 2);
        let y_avg = gauss(k, 3);
        let bump = 0.5 + counter_uniform(seed, k, 4, 0);

        let args = |y: f64, y_adv: f64, y_avg: f64| GenArgs {
            t,
            s,
            y,
            z_row: std::slice::from_ref(&z),
            z_col: &[],
            y_adv,
            z_row_adv: &[],
            z_col_adv: &[],
            y_avg,
            z_row_avg: &[],
            z_col_avg: &[],
        };
        let base = case.middle.eval(&args(y, y_adv, y_avg));
        let scale = base.abs().max(1.0);

        if case.declared.nondecreasing_in_y {
            let up = case.middle.eval(&args(y + bump, y_adv, y_avg));
            if up < base - tol * scale {
                report.violations.push(MonotonicityViolation {
                    kind: ViolationKind::NotNondecreasingInY,
                    t,
                    s,
                    base_value: base,
                    perturbed_value: up,
                });
            }
        }
        if case.declared.increasing_in_y_adv {
            let up = case.middle.eval(&args(y, y_adv + bump, y_avg));
            if up < base - tol * scale {
                report.violations.push(MonotonicityViolation {
                    kind: ViolationKind::NotIncreasingInYAdv,
                    t,
                    s,
                    base_value: base,
                    perturbed_value: up,
                });
            }
        }
        if case.declared.increasing_in_y_avg {
            let up = case.middle.eval(&args(y, y_adv, y_avg + bump));
            if up < base - tol * scale {
                report.violations.push(MonotonicityViolation {
                    kind: ViolationKind::NotIncreasingInYAvg,
                    t,
                    s,
                    base_value: base,
                    perturbed_value: up,
                });
            }
        }
        let lo = case.lower.eval(&args(y, y_adv, y_avg));
        let hi = case.upper.eval(&args(y, y_adv, y_avg));
        if lo > base + tol * scale {
            report.violations.push(MonotonicityViolation {
                kind: ViolationKind::LowerAboveMiddle,
                t,
                s,
                base_value: base,
                perturbed_value: lo,
            });
        }
        if base > hi + tol * scale {
            report.violations.push(MonotonicityViolation {
                kind: ViolationKind::MiddleAboveUpper,
                t,
                s,
                base_value: base,
                perturbed_value: hi,
            });
        }
    }
    report
}

/// Ordering outcome at one node.
#[derive(Clone, Debug)]
pub struct NodeOrdering {
    pub time: f64,
    /// Fraction of paths with Y_lower > Y_upper + eps_stat.
    pub violation_fraction: f64,
    /// Statistical allowance at this node (3 pooled fit standard errors).
    pub eps_stat: f64,
    /// Worst pathwise excess Y_lower - Y_upper (negative when ordered).
    pub worst_excess: f64,
    /// Mean margin Y_upper - Y_lower.
    pub mean_margin: f64,
}

/// Full ordering report over the grid.
#[derive(Clone, Debug)]
pub struct OrderingReport {
    pub per_node: Vec<NodeOrdering>,
    pub mean_lower: Vec<f64>,
    pub mean_upper: Vec<f64>,
    pub pass: bool,
}

/// Solves both problems on the shared ensemble and reports per-node ordering
/// statistics; passes when every violation fraction is at most 1e-3.
pub fn run_comparison(
    case: &ComparisonCase,
    ens: &PathEnsemble,
    grid: &TimeGrid,
    basis: &Basis,
    tol: f64,
    max_iter: usize,
) -> Result<OrderingReport, ComparisonError> {
    case.validate(grid)?;
    let (sol_lower, diag_lower) =
        solve_absvie(&case.lower, &case.phi_lower, ens, grid, basis, tol, max_iter)?;
    let (sol_upper, diag_upper) =
        solve_absvie(&case.upper, &case.phi_upper, ens, grid, basis, tol, max_iter)?;

    let paths = ens.paths();
    let mut per_node = Vec::with_capacity(grid.node_count());
    let mut pass = true;
    for i in 0..grid.node_count() {
        let se_l = diag_lower.y_stderr.get(i).copied().unwrap_or(0.0);
        let se_u = diag_upper.y_stderr.get(i).copied().unwrap_or(0.0);
        let eps = 3.0 * (se_l * se_l + se_u * se_u).sqrt();
        let lo = sol_lower.y().node(i);
        let hi = sol_upper.y().node(i);
        let mut violations = 0usize;
        let mut worst = f64::NEG_INFINITY;
        let mut margin_sum = 0.0;
        for p in 0..paths {
            let excess = lo[p] - hi[p];
            worst = worst.max(excess);
            margin_sum += -excess;
            if excess > eps {
                violations += 1;
            }
        }
        let fraction = violations as f64 / paths as f64;
        if fraction > 1e-3 {
            pass = false;
        }
        per_node.push(NodeOrdering {
            time: grid.time(i),
            violation_fraction: fraction,
            eps_stat: eps,
            worst_excess: worst,
            mean_margin: margin_sum / paths as f64,
        });
    }
    Ok(OrderingReport {
        per_node,
        mean_lower: sol_lower.mean_y().to_vec(),
        mean_upper: sol_upper.mean_y().to_vec(),
        pass,
    })
}
