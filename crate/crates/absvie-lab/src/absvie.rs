//! Backward solver for anticipated stochastic Volterra equations.
//!
//! The discrete equation on the grid reads, for every interior row i,
//!
//! ```text
//! Y(t_i) = phi(t_i) + h * sum_{j=i}^{n-1} g(args(t_i, t_j))
//!        - sum_{j=i}^{n-1} Z(t_i, t_j) dW_j,        n = steps to the horizon,
//! ```
//!
//! and Z is extended to the lower triangle by the martingale representation
//! `Y(t) = E[Y(t)] + sum_{j : t_j < t} Z(t, t_j) dW_j`, which is what makes
//! the pair an M-solution rather than a plain adapted solution.
//!
//! One Picard sweep realizes the solution-improvement map: accumulate the
//! per-path quantity `G_i = phi(t_i) + h * sum_j g(...)` with every state
//! argument (current, advanced, averaged, in both field slots) read from the
//! previous iterate, then
//!
//! * `Y(t_i) = project(G_i | node i)`,
//! * `Z(t_i, t_j) = (1/h) * project((G_i - settled_j) * dW_j | node j)` for
//!   `j >= i`, where `settled_j = project(G_i | node j)` removes the part of
//!   G_i already known at t_j (same conditional expectation, far lower
//!   estimator variance),
//! * `Z(t_i, t_j) = (1/h) * project((Y_i - settled_j) * dW_j | node j)` for
//!   `j < i`,
//!
//! with the rows t >= T of Y and the whole anticipated region of Z pinned to
//! the free-term data at every iteration. Each row only reads candidate
//! values at rows/nodes >= its own index, so the sweep runs in place on one
//! buffer and still equals the fully explicit update.

use crate::field::{mean, mean_sq, mean_sq_diff, rms, PairField, PathField};
use crate::grid::{DelaySpec, GridError, TimeGrid};
use crate::paths::PathEnsemble;
use crate::regress::{Basis, NodeDesign, RegressError};
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

const CHUNK: usize = 8192;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("generator returned a non-finite value at row {row}, cell {col}")]
    NonFiniteGenerator { row: usize, col: usize },
    #[error("free term contains a non-finite value at node {0}")]
    NonFiniteFreeTerm(usize),
    #[error(
        "no convergence after {iterations} iterations (last distance {last_distance:e}); \
         ratio history {ratios:?} — shrink the horizon or the generator scale"
    )]
    NoConvergence {
        iterations: usize,
        last_distance: f64,
        ratios: Vec<f64>,
    },
    #[error("advanced index out of range at row {row}, cell {col}")]
    IndexOverflow { row: usize, col: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Regress(#[from] RegressError),
}

/// Which of the nine state arguments a generator actually reads. Unused
/// arguments are never gathered, and the solver skips their window sums.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ArgUsage {
    pub y: bool,
    pub z_row: bool,
    pub z_col: bool,
    pub y_adv: bool,
    pub z_row_adv: bool,
    pub z_col_adv: bool,
    pub y_avg: bool,
    pub z_row_avg: bool,
    pub z_col_avg: bool,
}

impl ArgUsage {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_y(mut self) -> Self {
        self.y = true;
        self
    }

    pub fn with_z_row(mut self) -> Self {
        self.z_row = true;
        self
    }

    pub fn with_z_col(mut self) -> Self {
        self.z_col = true;
        self
    }

    pub fn with_y_adv(mut self) -> Self {
        self.y_adv = true;
        self
    }

    pub fn with_z_row_adv(mut self) -> Self {
        self.z_row_adv = true;
        self
    }

    pub fn with_z_col_adv(mut self) -> Self {
        self.z_col_adv = true;
        self
    }

    pub fn with_y_avg(mut self) -> Self {
        self.y_avg = true;
        self
    }

    pub fn with_z_row_avg(mut self) -> Self {
        self.z_row_avg = true;
        self
    }

    pub fn with_z_col_avg(mut self) -> Self {
        self.z_col_avg = true;
        self
    }

    /// True if any transposed-field argument is read.
    pub fn reads_transposed(&self) -> bool {
        self.z_col || self.z_col_adv || self.z_col_avg
    }
}

/// State arguments handed to a generator at one (row, cell, path) site.
/// Slices run over the Brownian dims of the field arguments; unused
/// arguments arrive zeroed (scalars) or empty (slices).
#[derive(Debug)]
pub struct GenArgs<'a> {
    pub t: f64,
    pub s: f64,
    /// Current solution value Y(s).
    pub y: f64,
    /// Z(t, s).
    pub z_row: &'a [f64],
    /// Z(s, t).
    pub z_col: &'a [f64],
    /// Advanced value Y(s + delta).
    pub y_adv: f64,
    /// Z(t, s + zeta).
    pub z_row_adv: &'a [f64],
    /// Z(s + zeta, t).
    pub z_col_adv: &'a [f64],
    /// Exponentially weighted average of Y over [s, s + delta].
    pub y_avg: f64,
    /// Same average of Z(t, ·) over [s, s + zeta].
    pub z_row_avg: &'a [f64],
    /// Same average of Z(·, t) over [s, s + zeta].
    pub z_col_avg: &'a [f64],
}

type GenEval = Arc<dyn for<'a> Fn(&GenArgs<'a>) -> f64 + Send + Sync>;

/// Generator of the backward equation: the integrand evaluator plus its
/// argument wiring (usage flags, averaging rate, delays).
#[derive(Clone)]
pub struct GeneratorSpec {
    eval: GenEval,
    pub usage: ArgUsage,
    /// Rate of the exponential weight exp(lambda * (s - theta)) in averages.
    pub lambda: f64,
    pub delays: DelaySpec,
    pub lipschitz_hint: Option<f64>,
}

impl GeneratorSpec {
    pub fn new(
        usage: ArgUsage,
        lambda: f64,
        delays: DelaySpec,
        eval: impl for<'a> Fn(&GenArgs<'a>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            eval: Arc::new(eval),
            usage,
            lambda,
            delays,
            lipschitz_hint: None,
        }
    }

    pub fn with_lipschitz_hint(mut self, c: f64) -> Self {
        self.lipschitz_hint = Some(c);
        self
    }

    /// g == c: quadrature-only generator.
    pub fn constant(c: f64) -> Self {
        Self::new(ArgUsage::none(), 0.0, DelaySpec::none(), move |_| c)
    }

    /// g = k * Y(s + delta): pointwise advanced value.
    pub fn advanced_value(k: f64, delays: DelaySpec) -> Self {
        Self::new(ArgUsage::none().with_y_adv(), 0.0, delays, move |a| {
            k * a.y_adv
        })
        .with_lipschitz_hint(k.abs())
    }

    /// g = k * (exponentially weighted average of Y over [s, s + delta]).
    pub fn averaged_value(k: f64, lambda: f64, delays: DelaySpec) -> Self {
        Self::new(ArgUsage::none().with_y_avg(), lambda, delays, move |a| {
            k * a.y_avg
        })
        .with_lipschitz_hint(k.abs())
    }

    /// g = k * Z(t, s): reads the solution's own representation coefficient.
    pub fn row_coeff(k: f64) -> Self {
        Self::new(
            ArgUsage::none().with_z_row(),
            0.0,
            DelaySpec::none(),
            move |a| k * a.z_row[0],
        )
        .with_lipschitz_hint(k.abs())
    }

    #[inline]
    pub fn eval(&self, args: &GenArgs<'_>) -> f64 {
        (self.eval)(args)
    }
}

type EtaFn = Arc<dyn Fn(usize, usize, usize, usize) -> f64 + Send + Sync>;

/// Free term of the backward equation: per-path values phi(t_i) on the whole
/// grid (interior data for t < T, boundary rows for t >= T) and the
/// prescribed field data eta on the anticipated region.
#[derive(Clone)]
pub struct FreeTerm {
    phi: PathField,
    eta: EtaFn,
}

impl FreeTerm {
    pub fn new(phi: PathField) -> Self {
        Self {
            phi,
            eta: Arc::new(|_, _, _, _| 0.0),
        }
    }

    /// Deterministic phi(t), zero eta.
    pub fn deterministic(grid: &TimeGrid, paths: usize, f: impl Fn(f64) -> f64) -> Self {
        let values: Vec<f64> = (0..grid.node_count()).map(|i| f(grid.time(i))).collect();
        Self::new(PathField::from_fn(grid.node_count(), paths, |_, i| {
            values[i]
        }))
    }

    /// phi(t) = x0 + b * W(T) for every t, with the compatible eta = b on
    /// cells below the horizon (the representation data of the boundary rows).
    pub fn terminal_affine(x0: f64, b: f64, ens: &PathEnsemble) -> Self {
        let grid = *ens.grid();
        let n = grid.steps_t();
        let wt: Vec<f64> = ens.values_at(n, 0).to_vec();
        let phi = PathField::from_fn(grid.node_count(), ens.paths(), |p, _| x0 + b * wt[p]);
        Self::new(phi).with_eta(move |_, j, k, _| if j < n && k == 0 { b } else { 0.0 })
    }

    /// Overrides the anticipated-region field data; closure arguments are
    /// (row, cell, dim, path).
    pub fn with_eta(
        mut self,
        eta: impl Fn(usize, usize, usize, usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.eta = Arc::new(eta);
        self
    }

    pub fn phi(&self) -> &PathField {
        &self.phi
    }

    #[inline]
    pub fn eta(&self, row: usize, cell: usize, dim: usize, path: usize) -> f64 {
        (self.eta)(row, cell, dim, path)
    }
}

/// Adapted M-solution on the grid: Y per node, Z per (row, cell) and dim,
/// plus the per-node mean of Y that anchors the representation.
#[derive(Clone)]
pub struct MSolution {
    grid: TimeGrid,
    y: PathField,
    z: Vec<PairField>,
    mean_y: Vec<f64>,
}

impl MSolution {
    /// Zero-extended initial iterate: boundary rows of Y copy phi, the
    /// anticipated region of Z copies eta, everything else starts at zero.
    pub fn zero_extended(free: &FreeTerm, grid: &TimeGrid, dims: usize) -> Self {
        let paths = free.phi.paths();
        let n = grid.steps_t();
        let cells = grid.cells();
        let mut y = PathField::zeros(cells + 1, paths);
        for i in n..=cells {
            y.node_mut(i).copy_from_slice(free.phi.node(i));
        }
        let mut z = Vec::with_capacity(dims);
        for k in 0..dims {
            let mut field = PairField::zeros(cells + 1, cells, paths);
            for i in 0..=cells {
                for j in 0..cells {
                    if i > n || j >= n {
                        let slot = field.entry_mut(i, j);
                        for (p, v) in slot.iter_mut().enumerate() {
                            *v = free.eta(i, j, k, p);
                        }
                    }
                }
            }
            z.push(field);
        }
        Self {
            grid: *grid,
            y,
            z,
            mean_y: vec![0.0; cells + 1],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn y(&self) -> &PathField {
        &self.y
    }

    pub fn z(&self, dim: usize) -> &PairField {
        &self.z[dim]
    }

    pub fn dims(&self) -> usize {
        self.z.len()
    }

    pub fn mean_y(&self) -> &[f64] {
        &self.mean_y
    }

    pub fn refresh_mean(&mut self) {
        for i in 0..self.y.nodes() {
            self.mean_y[i] = mean(self.y.node(i));
        }
    }

    /// Zeroes Y and Z on every row up to and including `row` (variational
    /// derivatives of adapted quantities vanish at or before their cell).
    pub fn zero_rows_through(&mut self, row: usize) {
        for i in 0..=row.min(self.grid.cells()) {
            self.y.node_mut(i).fill(0.0);
            for field in &mut self.z {
                for j in 0..self.grid.cells() {
                    field.entry_mut(i, j).fill(0.0);
                }
            }
        }
    }

    /// Test hook: zeroes the computed lower triangle to probe how much
    /// representation energy it carries.
    pub fn zero_lower_triangle(&mut self) {
        let n = self.grid.steps_t();
        for field in &mut self.z {
            for i in 0..=n {
                for j in 0..i.min(n) {
                    field.entry_mut(i, j).fill(0.0);
                }
            }
        }
    }
}

/// Advanced and averaged arguments of the generator at one site.
#[derive(Clone, Debug)]
pub struct AnticipatedArgs {
    pub y_adv: f64,
    pub z_row_adv: Vec<f64>,
    pub z_col_adv: Vec<f64>,
    pub y_avg: f64,
    pub z_row_avg: Vec<f64>,
    pub z_col_avg: Vec<f64>,
}

/// Evaluates the six advanced/averaged arguments from a candidate solution
/// at row i, cell j, path p. Errors signal delay misconfiguration.
pub fn anticipated_args(
    sol: &MSolution,
    spec: &GeneratorSpec,
    grid: &TimeGrid,
    i: usize,
    j: usize,
    p: usize,
) -> Result<AnticipatedArgs, SolveError> {
    let h = grid.step();
    let cells = grid.cells();
    let d = spec.delays.delta_at(j);
    let zt = spec.delays.zeta_at(j);
    if j + d > cells || j + zt >= cells || i >= cells {
        return Err(SolveError::IndexOverflow { row: i, col: j });
    }
    let dims = sol.dims();
    let weight = |l: usize| (-spec.lambda * h * (l - j) as f64).exp();

    let y_adv = sol.y.get(p, j + d);
    let mut y_avg = 0.0;
    for l in j..j + d {
        y_avg += h * weight(l) * sol.y.get(p, l);
    }

    let mut z_row_adv = vec![0.0; dims];
    let mut z_col_adv = vec![0.0; dims];
    let mut z_row_avg = vec![0.0; dims];
    let mut z_col_avg = vec![0.0; dims];
    for k in 0..dims {
        z_row_adv[k] = sol.z[k].get(p, i, j + zt);
        z_col_adv[k] = sol.z[k].get(p, j + zt, i);
        for l in j..j + zt {
            z_row_avg[k] += h * weight(l) * sol.z[k].get(p, i, l);
            z_col_avg[k] += h * weight(l) * sol.z[k].get(p, l, i);
        }
    }
    Ok(AnticipatedArgs {
        y_adv,
        z_row_adv,
        z_col_adv,
        y_avg,
        z_row_avg,
        z_col_avg,
    })
}

/// Per-solve diagnostics: iteration distances, contraction ratios, and the
/// regression noise floors of the final sweep.
#[derive(Clone, Debug, Default)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Successive-iterate M2 distances, one per sweep.
    pub distances: Vec<f64>,
    /// distances[k] / distances[k-1].
    pub ratios: Vec<f64>,
    /// Fit standard error of Y per node (0 on boundary rows).
    pub y_stderr: Vec<f64>,
    /// RMS of the computed Z entries over rows up to the horizon.
    pub z_rms: f64,
    /// Pooled RMS fit standard error of those entries.
    pub z_stderr_rms: f64,
}

struct Scratch {
    g: Vec<f64>,
    y_new: Vec<f64>,
    settled: Vec<f64>,
    target: Vec<f64>,
    fitted: Vec<f64>,
    /// New Z row, layout (dim * n + cell) * paths.
    z_row_new: Vec<f64>,
    /// Averaged-Y table, layout cell * paths.
    mu_table: Vec<f64>,
}

impl Scratch {
    fn new(paths: usize, n: usize, dims: usize) -> Self {
        Self {
            g: vec![0.0; paths],
            y_new: vec![0.0; paths],
            settled: vec![0.0; paths],
            target: vec![0.0; paths],
            fitted: vec![0.0; paths],
            z_row_new: vec![0.0; dims * n * paths],
            mu_table: vec![0.0; n * paths],
        }
    }
}

struct SweepOutcome {
    distance: f64,
    y_stderr: Vec<f64>,
    z_sq_sum: f64,
    z_se_sq_sum: f64,
    z_entries: usize,
}

/// Averaged-Y values per cell; they read only nodes >= their own cell, so one
/// table per sweep stays consistent with the in-place row updates.
fn fill_mu_table(mu: &mut [f64], y: &PathField, spec: &GeneratorSpec, grid: &TimeGrid) {
    let n = grid.steps_t();
    let h = grid.step();
    let paths = y.paths();
    mu.par_chunks_mut(paths).enumerate().for_each(|(j, out)| {
        if j >= n {
            return;
        }
        out.fill(0.0);
        let d = spec.delays.delta_at(j);
        for l in j..j + d {
            let w = h * (-spec.lambda * h * (l - j) as f64).exp();
            let row = y.node(l);
            for (o, &v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
    });
}

fn accumulate_g(
    g: &mut [f64],
    y: &PathField,
    z: &[PairField],
    mu_table: &[f64],
    spec: &GeneratorSpec,
    grid: &TimeGrid,
    row: usize,
) {
    let n = grid.steps_t();
    let h = grid.step();
    let paths = y.paths();
    let dims = z.len();
    let usage = spec.usage;
    let t = grid.time(row);
    static EMPTY: [f64; 0] = [];

    g.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, chunk)| {
        let base = ci * CHUNK;
        let mut z_row_buf = vec![0.0; dims];
        let mut z_col_buf = vec![0.0; dims];
        let mut z_row_adv_buf = vec![0.0; dims];
        let mut z_col_adv_buf = vec![0.0; dims];
        let mut z_row_avg_buf = vec![0.0; dims];
        let mut z_col_avg_buf = vec![0.0; dims];
        let mut row_slices: Vec<&[f64]> = Vec::with_capacity(dims);
        let mut col_slices: Vec<&[f64]> = Vec::with_capacity(dims);
        let mut row_adv_slices: Vec<&[f64]> = Vec::with_capacity(dims);
        let mut col_adv_slices: Vec<&[f64]> = Vec::with_capacity(dims);

        for j in row..n {
            let s = grid.time(j);
            let d = spec.delays.delta_at(j);
            let zt = spec.delays.zeta_at(j);
            let y_j = y.node(j);
            let y_adv_slice = if usage.y_adv { y.node(j + d) } else { &EMPTY[..] };
            let mu_slice = if usage.y_avg {
                &mu_table[j * paths..(j + 1) * paths]
            } else {
                &EMPTY[..]
            };
            row_slices.clear();
            col_slices.clear();
            row_adv_slices.clear();
            col_adv_slices.clear();
            for field in z {
                if usage.z_row {
                    row_slices.push(field.entry(row, j));
                }
                if usage.z_col {
                    col_slices.push(field.entry(j, row));
                }
                if usage.z_row_adv {
                    row_adv_slices.push(field.entry(row, j + zt));
                }
                if usage.z_col_adv {
                    col_adv_slices.push(field.entry(j + zt, row));
                }
            }

            for (o, gp) in chunk.iter_mut().enumerate() {
                let p = base + o;
                for k in 0..dims {
                    if usage.z_row {
                        z_row_buf[k] = row_slices[k][p];
                    }
                    if usage.z_col {
                        z_col_buf[k] = col_slices[k][p];
                    }
                    if usage.z_row_adv {
                        z_row_adv_buf[k] = row_adv_slices[k][p];
                    }
                    if usage.z_col_adv {
                        z_col_adv_buf[k] = col_adv_slices[k][p];
                    }
                    if usage.z_row_avg {
                        let mut acc = 0.0;
                        for l in j..j + zt {
                            let w = (-spec.lambda * h * (l - j) as f64).exp();
                            acc += h * w * z[k].get(p, row, l);
                        }
                        z_row_avg_buf[k] = acc;
                    }
                    if usage.z_col_avg {
                        let mut acc = 0.0;
                        for l in j..j + zt {
                            let w = (-spec.lambda * h * (l - j) as f64).exp();
                            acc += h * w * z[k].get(p, l, row);
                        }
                        z_col_avg_buf[k] = acc;
                    }
                }
                let args = GenArgs {
                    t,
                    s,
                    y: if usage.y { y_j[p] } else { 0.0 },
                    z_row: if usage.z_row { &z_row_buf } else { &EMPTY },
                    z_col: if usage.z_col { &z_col_buf } else { &EMPTY },
                    y_adv: if usage.y_adv { y_adv_slice[p] } else { 0.0 },
                    z_row_adv: if usage.z_row_adv { &z_row_adv_buf } else { &EMPTY },
                    z_col_adv: if usage.z_col_adv { &z_col_adv_buf } else { &EMPTY },
                    y_avg: if usage.y_avg { mu_slice[p] } else { 0.0 },
                    z_row_avg: if usage.z_row_avg { &z_row_avg_buf } else { &EMPTY },
                    z_col_avg: if usage.z_col_avg { &z_col_avg_buf } else { &EMPTY },
                };
                *gp += h * spec.eval(&args);
            }
        }
    });
}

/// Serial single-site generator evaluation (diagnostics and probes).
pub(crate) fn eval_generator_at(
    sol: &MSolution,
    spec: &GeneratorSpec,
    grid: &TimeGrid,
    i: usize,
    j: usize,
    p: usize,
) -> Result<f64, SolveError> {
    let adv = anticipated_args(sol, spec, grid, i, j, p)?;
    let dims = sol.dims();
    let mut z_row = vec![0.0; dims];
    let mut z_col = vec![0.0; dims];
    for k in 0..dims {
        z_row[k] = sol.z[k].get(p, i, j);
        z_col[k] = sol.z[k].get(p, j, i);
    }
    let args = GenArgs {
        t: grid.time(i),
        s: grid.time(j),
        y: sol.y.get(p, j),
        z_row: &z_row,
        z_col: &z_col,
        y_adv: adv.y_adv,
        z_row_adv: &adv.z_row_adv,
        z_col_adv: &adv.z_col_adv,
        y_avg: adv.y_avg,
        z_row_avg: &adv.z_row_avg,
        z_col_avg: &adv.z_col_avg,
    };
    Ok(spec.eval(&args))
}

/// Locates the (row, cell) of a non-finite generator value for diagnostics.
fn locate_bad_eval(
    sol: &MSolution,
    spec: &GeneratorSpec,
    grid: &TimeGrid,
    row: usize,
    path: usize,
) -> SolveError {
    let n = grid.steps_t();
    for j in row..n {
        if let Ok(v) = eval_generator_at(sol, spec, grid, row, j, path) {
            if !v.is_finite() {
                return SolveError::NonFiniteGenerator { row, col: j };
            }
        }
    }
    SolveError::NonFiniteGenerator { row, col: row }
}

fn sweep(
    sol: &mut MSolution,
    spec: &GeneratorSpec,
    free: &FreeTerm,
    ens: &PathEnsemble,
    designs: &[NodeDesign],
    scratch: &mut Scratch,
) -> Result<SweepOutcome, SolveError> {
    let grid = *ens.grid();
    let n = grid.steps_t();
    let h = grid.step();
    let inv_h = 1.0 / h;
    let paths = ens.paths();
    let dims = ens.dims();

    if spec.usage.y_avg {
        fill_mu_table(&mut scratch.mu_table, &sol.y, spec, &grid);
    }

    let mut dist2 = 0.0;
    let mut y_stderr = vec![0.0; grid.node_count()];
    let mut z_sq_sum = 0.0;
    let mut z_se_sq_sum = 0.0;
    let mut z_entries = 0usize;

    for i in 0..=n {
        if i < n {
            scratch.g.copy_from_slice(free.phi().node(i));
            accumulate_g(
                &mut scratch.g,
                &sol.y,
                &sol.z,
                &scratch.mu_table,
                spec,
                &grid,
                i,
            );
            if let Some(p) = scratch.g.iter().position(|v| !v.is_finite()) {
                return Err(locate_bad_eval(sol, spec, &grid, i, p));
            }
            let stats = designs[i].project_into(&scratch.g, &mut scratch.y_new);
            y_stderr[i] = stats.stderr;
        } else {
            // Row at the horizon: Y is boundary data; only the lower triangle
            // of Z is computed, from the representation of phi(T).
            scratch.y_new.copy_from_slice(free.phi().node(n));
        }

        for j in 0..n {
            let src: &[f64] = if i < n && j >= i {
                &scratch.g
            } else {
                &scratch.y_new
            };
            designs[j].project_into(src, &mut scratch.settled);
            for k in 0..dims {
                let dw = ens.increments_at(j, k);
                for p in 0..paths {
                    scratch.target[p] = (src[p] - scratch.settled[p]) * dw[p];
                }
                let stats = designs[j].project_into(&scratch.target, &mut scratch.fitted);
                let out = &mut scratch.z_row_new[(k * n + j) * paths..][..paths];
                for (o, &f) in out.iter_mut().zip(&scratch.fitted) {
                    *o = f * inv_h;
                }
                let se = stats.stderr * inv_h;
                z_se_sq_sum += se * se;
                z_entries += 1;
            }
        }

        if i < n {
            dist2 += h * mean_sq_diff(&scratch.y_new, sol.y.node(i));
            sol.y.node_mut(i).copy_from_slice(&scratch.y_new);
        }
        for k in 0..dims {
            for j in 0..n {
                let new = &scratch.z_row_new[(k * n + j) * paths..][..paths];
                let old = sol.z[k].entry(i, j);
                dist2 += h * h * mean_sq_diff(new, old);
                z_sq_sum += mean_sq(new);
                sol.z[k].entry_mut(i, j).copy_from_slice(new);
            }
        }
    }

    Ok(SweepOutcome {
        distance: dist2.sqrt(),
        y_stderr,
        z_sq_sum,
        z_se_sq_sum,
        z_entries,
    })
}

fn validate_inputs(
    spec: &GeneratorSpec,
    free: &FreeTerm,
    ens: &PathEnsemble,
    grid: &TimeGrid,
) -> Result<(), SolveError> {
    spec.delays.validate(grid)?;
    assert_eq!(
        free.phi().paths(),
        ens.paths(),
        "free term and ensemble disagree on path count"
    );
    assert_eq!(
        free.phi().nodes(),
        grid.node_count(),
        "free term does not cover the grid"
    );
    for i in 0..grid.node_count() {
        if free.phi().node(i).iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFiniteFreeTerm(i));
        }
    }
    Ok(())
}

/// One application of the solution-improvement map to a candidate.
pub fn picard_step(
    candidate: &MSolution,
    spec: &GeneratorSpec,
    free: &FreeTerm,
    ens: &PathEnsemble,
    grid: &TimeGrid,
    basis: &Basis,
) -> Result<MSolution, SolveError> {
    validate_inputs(spec, free, ens, grid)?;
    let n = grid.steps_t();
    let designs: Vec<NodeDesign> = (0..n).map(|j| NodeDesign::build(basis, ens, j)).collect();
    let mut next = candidate.clone();
    let mut scratch = Scratch::new(ens.paths(), n, ens.dims());
    sweep(&mut next, spec, free, ens, &designs, &mut scratch)?;
    next.refresh_mean();
    Ok(next)
}

/// Iterates the improvement map from the zero-extended candidate until the
/// successive-iterate M2 distance (Y over nodes and paths, Z over node pairs,
/// both triangles) falls below `tol`.
pub fn solve_absvie(
    spec: &GeneratorSpec,
    free: &FreeTerm,
    ens: &PathEnsemble,
    grid: &TimeGrid,
    basis: &Basis,
    tol: f64,
    max_iter: usize,
) -> Result<(MSolution, SolveDiagnostics), SolveError> {
    assert!(tol > 0.0, "tolerance must be positive");
    validate_inputs(spec, free, ens, grid)?;
    let n = grid.steps_t();
    let designs: Vec<NodeDesign> = (0..n).map(|j| NodeDesign::build(basis, ens, j)).collect();
    let mut sol = MSolution::zero_extended(free, grid, ens.dims());
    let mut scratch = Scratch::new(ens.paths(), n, ens.dims());

    let mut diag = SolveDiagnostics::default();
    for iter in 1..=max_iter {
        let outcome = sweep(&mut sol, spec, free, ens, &designs, &mut scratch)?;
        diag.iterations = iter;
        if let Some(&prev) = diag.distances.last() {
            if prev > 0.0 {
                diag.ratios.push(outcome.distance / prev);
            }
        }
        diag.distances.push(outcome.distance);
        if !outcome.distance.is_finite() {
            return Err(SolveError::NoConvergence {
                iterations: iter,
                last_distance: outcome.distance,
                ratios: diag.ratios,
            });
        }
        if outcome.distance <= tol {
            diag.converged = true;
            diag.y_stderr = outcome.y_stderr;
            diag.z_rms = (outcome.z_sq_sum / outcome.z_entries.max(1) as f64).sqrt();
            diag.z_stderr_rms = (outcome.z_se_sq_sum / outcome.z_entries.max(1) as f64).sqrt();
            sol.refresh_mean();
            return Ok((sol, diag));
        }
    }
    Err(SolveError::NoConvergence {
        iterations: max_iter,
        last_distance: diag.distances.last().copied().unwrap_or(f64::NAN),
        ratios: diag.ratios,
    })
}

/// Max over nodes of the relative L2 residual of the representation
/// `Y(t) - E[Y(t)] - sum_{j : t_j < t} Z(t, t_j) dW_j`.
pub fn msolution_residual(sol: &MSolution, ens: &PathEnsemble) -> f64 {
    let grid = sol.grid;
    let cells = grid.cells();
    let paths = ens.paths();
    let dims = sol.dims();
    let overall = (0..=cells)
        .map(|i| rms(sol.y.node(i)))
        .fold(0.0f64, f64::max);
    let floor = 1e-9 * overall + f64::MIN_POSITIVE;

    let mut worst = 0.0f64;
    let mut recon = vec![0.0; paths];
    for i in 0..=cells {
        recon.fill(sol.mean_y[i]);
        for j in 0..i.min(cells) {
            for k in 0..dims {
                let zrow = sol.z[k].entry(i, j);
                let dw = ens.increments_at(j, k);
                for (r, (&zv, &wv)) in recon.iter_mut().zip(zrow.iter().zip(dw)) {
                    *r += zv * wv;
                }
            }
        }
        let y_i = sol.y.node(i);
        let resid: Vec<f64> = y_i.iter().zip(&recon).map(|(a, b)| a - b).collect();
        let rel = rms(&resid) / rms(y_i).max(floor);
        worst = worst.max(rel);
    }
    worst
}

/// Outcome of a paired stability experiment: the M2 distance of the two
/// solutions against the distance of their input data.
#[derive(Clone, Debug)]
pub struct StabilityReport {
    pub solution_distance: f64,
    pub data_distance: f64,
    /// solution_distance / data_distance (0 when both vanish).
    pub ratio: f64,
}

/// Solves two problems on the shared ensemble and reports the empirical
/// stability constant: solution M2 distance over the free-term/generator
/// data distance, the generator difference evaluated along solution A.
#[allow(clippy::too_many_arguments)]
pub fn stability_probe(
    spec_a: &GeneratorSpec,
    free_a: &FreeTerm,
    spec_b: &GeneratorSpec,
    free_b: &FreeTerm,
    ens: &PathEnsemble,
    grid: &TimeGrid,
    basis: &Basis,
    tol: f64,
    max_iter: usize,
) -> Result<StabilityReport, SolveError> {
    let (sol_a, _) = solve_absvie(spec_a, free_a, ens, grid, basis, tol, max_iter)?;
    let (sol_b, _) = solve_absvie(spec_b, free_b, ens, grid, basis, tol, max_iter)?;
    let h = grid.step();
    let n = grid.steps_t();
    let cells = grid.cells();
    let paths = ens.paths();
    let dims = ens.dims();

    let mut sol_dist2 = 0.0;
    for i in 0..=cells {
        sol_dist2 += h * mean_sq_diff(sol_a.y.node(i), sol_b.y.node(i));
        for k in 0..dims {
            for j in 0..cells {
                sol_dist2 += h * h * mean_sq_diff(sol_a.z[k].entry(i, j), sol_b.z[k].entry(i, j));
            }
        }
    }

    let mut data_dist2 = 0.0;
    for i in 0..=cells {
        data_dist2 += h * mean_sq_diff(free_a.phi().node(i), free_b.phi().node(i));
    }
    for i in 0..=cells {
        for j in n..cells {
            for k in 0..dims {
                let mut acc = 0.0;
                for p in 0..paths {
                    let d = free_a.eta(i, j, k, p) - free_b.eta(i, j, k, p);
                    acc += d * d;
                }
                data_dist2 += h * h * acc / paths as f64;
            }
        }
    }
    for i in 0..n {
        let per_path: Vec<f64> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let mut acc = 0.0;
                for j in i..n {
                    let ga = eval_generator_at(&sol_a, spec_a, grid, i, j, p).unwrap_or(f64::NAN);
                    let gb = eval_generator_at(&sol_a, spec_b, grid, i, j, p).unwrap_or(f64::NAN);
                    acc += h * (gb - ga).abs();
                }
                acc * acc
            })
            .collect();
        data_dist2 += h * mean(&per_path);
    }

    let solution_distance = sol_dist2.sqrt();
    let data_distance = data_dist2.sqrt();
    let ratio = if data_distance > 0.0 {
        solution_distance / data_distance
    } else {
        0.0
    };
    Ok(StabilityReport {
        solution_distance,
        data_distance,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::paths::sample_paths;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn anticipated_args_zero_offsets() {
        let grid = make_grid(1.0, 0.25, 8).unwrap();
        let ens = sample_paths(&grid, 16, 1, 1);
        let free = FreeTerm::deterministic(&grid, 16, |_| 1.0);
        let mut sol = MSolution::zero_extended(&free, &grid, 1);
        for i in 0..sol.y.nodes() {
            sol.y.node_mut(i).fill(1.0);
        }
        let spec = GeneratorSpec::advanced_value(1.0, DelaySpec::constant(0, 0));
        let args = anticipated_args(&sol, &spec, &grid, 1, 3, 0).unwrap();
        assert_eq!(args.y_avg, 0.0);
        assert_eq!(args.y_adv, sol.y.get(0, 3));
        let _ = ens;
    }

    #[test]
    fn anticipated_args_flat_average_is_window_length() {
        // lambda = 0, Y == 1: the average is just h * window = delta.
        let grid = make_grid(1.0, 0.5, 8).unwrap();
        let free = FreeTerm::deterministic(&grid, 4, |_| 1.0);
        let mut sol = MSolution::zero_extended(&free, &grid, 1);
        for i in 0..sol.y.nodes() {
            sol.y.node_mut(i).fill(1.0);
        }
        let delays = DelaySpec::constant(4, 0);
        let spec = GeneratorSpec::averaged_value(1.0, 0.0, delays);
        let args = anticipated_args(&sol, &spec, &grid, 0, 2, 0).unwrap();
        assert!((args.y_avg - 0.5).abs() < 1e-14);
    }

    #[test]
    fn anticipated_args_exponential_average_matches_integral() {
        // lambda = 1, Y == 1, delta = 0.5, h = 1/32: the left sum of
        // exp(-(theta - s)) over the window approximates 1 - exp(-0.5)
        // with left-endpoint bias below h * delta * |lambda|.
        let grid = make_grid(1.0, 0.5, 32).unwrap();
        let free = FreeTerm::deterministic(&grid, 2, |_| 1.0);
        let mut sol = MSolution::zero_extended(&free, &grid, 1);
        for i in 0..sol.y.nodes() {
            sol.y.node_mut(i).fill(1.0);
        }
        let delays = DelaySpec::constant(16, 0);
        let spec = GeneratorSpec::averaged_value(1.0, 1.0, delays);
        let args = anticipated_args(&sol, &spec, &grid, 0, 5, 0).unwrap();
        let exact = 1.0 - (-0.5f64).exp();
        assert!(rel_err(args.y_avg, exact) < 0.02, "{}", args.y_avg);
    }

    #[test]
    fn anticipated_args_overflow_reported() {
        let grid = make_grid(1.0, 0.25, 4).unwrap();
        let free = FreeTerm::deterministic(&grid, 2, |_| 1.0);
        let sol = MSolution::zero_extended(&free, &grid, 1);
        let spec = GeneratorSpec::advanced_value(1.0, DelaySpec::constant(4, 0));
        assert!(matches!(
            anticipated_args(&sol, &spec, &grid, 0, 4, 0),
            Err(SolveError::IndexOverflow { .. })
        ));
    }

    #[test]
    fn picard_step_zero_generator_reproduces_free_term() {
        let grid = make_grid(1.0, 0.25, 8).unwrap();
        let ens = sample_paths(&grid, 4_000, 1, 11);
        let free = FreeTerm::deterministic(&grid, ens.paths(), |t| 2.0 - t);
        let spec = GeneratorSpec::constant(0.0);
        let basis = Basis::brownian(1, 2);
        let start = MSolution::zero_extended(&free, &grid, 1);
        let next = picard_step(&start, &spec, &free, &ens, &grid, &basis).unwrap();
        for i in 0..grid.node_count() {
            let want = 2.0 - grid.time(i);
            for p in [0, 17, 399] {
                assert!(rel_err(next.y.get(p, i), want) < 1e-9);
            }
        }
        // For a deterministic G the settled part is removed exactly, so the
        // extracted coefficients vanish identically.
        let z = next.z(0);
        for i in 0..=grid.steps_t() {
            for j in 0..grid.steps_t() {
                assert!(rms(z.entry(i, j)) < 1e-10, "row {i} cell {j}");
            }
        }
    }

    #[test]
    fn converged_solution_is_a_fixed_point() {
        let grid = make_grid(1.0, 0.25, 8).unwrap();
        let ens = sample_paths(&grid, 2_000, 1, 12);
        let delays = DelaySpec::constant(2, 0);
        let spec = GeneratorSpec::advanced_value(0.4, delays);
        let free = FreeTerm::deterministic(&grid, ens.paths(), |_| 1.0);
        let basis = Basis::constant();
        let tol = 1e-12;
        let (sol, diag) = solve_absvie(&spec, &free, &ens, &grid, &basis, tol, 60).unwrap();
        assert!(diag.converged);
        let next = picard_step(&sol, &spec, &free, &ens, &grid, &basis).unwrap();
        let mut dist2 = 0.0;
        for i in 0..grid.node_count() {
            dist2 += grid.step() * mean_sq_diff(next.y.node(i), sol.y.node(i));
        }
        assert!(dist2.sqrt() <= tol * 10.0);
    }

    #[test]
    fn constant_generator_closed_form() {
        let grid = make_grid(1.0, 0.25, 16).unwrap();
        let ens = sample_paths(&grid, 5_000, 1, 13);
        let c = 0.7;
        let x0 = 1.3;
        let spec = GeneratorSpec::constant(c);
        let free = FreeTerm::deterministic(&grid, ens.paths(), |_| x0);
        let basis = Basis::brownian(1, 2);
        let (sol, diag) = solve_absvie(&spec, &free, &ens, &grid, &basis, 1e-12, 20).unwrap();
        assert!(diag.iterations <= 3);
        for i in 0..=grid.cells() {
            let want = if i <= grid.steps_t() {
                x0 + c * (1.0 - grid.time(i))
            } else {
                x0
            };
            assert!(
                rel_err(sol.mean_y()[i], want) < 1e-10,
                "node {i}: {} vs {want}",
                sol.mean_y()[i]
            );
        }
        assert!(diag.z_rms <= 4.0 * diag.z_stderr_rms + 1e-12);
    }

    /// Backward recursion oracle for g = k * Y(s + delta) with phi == 1:
    /// y_i = 1 + h k * sum_{j >= i} y_{j + d}, y = 1 past the horizon.
    fn advanced_value_oracle(grid: &TimeGrid, k: f64, d: usize) -> Vec<f64> {
        let n = grid.steps_t();
        let h = grid.step();
        let mut y = vec![1.0; grid.node_count()];
        for i in (0..n).rev() {
            let mut acc = 0.0;
            for j in i..n {
                acc += y[j + d];
            }
            y[i] = 1.0 + h * k * acc;
        }
        y
    }

    #[test]
    fn advanced_value_generator_matches_recursion_oracle() {
        let grid = make_grid(1.0, 0.25, 16).unwrap();
        let ens = sample_paths(&grid, 64, 1, 14);
        let d = 4; // delta = 0.25
        let spec = GeneratorSpec::advanced_value(1.0, DelaySpec::constant(d, 0));
        let free = FreeTerm::deterministic(&grid, ens.paths(), |_| 1.0);
        let basis = Basis::constant();
        let (sol, _) = solve_absvie(&spec, &free, &ens, &grid, &basis, 1e-13, 80).unwrap();
        let oracle = advanced_value_oracle(&grid, 1.0, d);
        for i in 0..=grid.cells() {
            assert!(
                rel_err(sol.mean_y()[i], oracle[i]) <= 1e-10,
                "node {i}: {} vs {}",
                sol.mean_y()[i],
                oracle[i]
            );
        }
    }

    /// Quadrature oracle for g = averaged value with rate lambda, phi == 1:
    /// y_i = 1 + h * sum_{j >= i} mu(j), mu(j) the module's own left sum of
    /// exp(-lambda h (l - j)) y_l over the window. The diagonal term makes
    /// each y_i mildly implicit; solved exactly node by node.
    fn averaged_value_oracle(grid: &TimeGrid, lambda: f64, d: usize) -> Vec<f64> {
        let n = grid.steps_t();
        let h = grid.step();
        let mut y = vec![1.0; grid.node_count()];
        let w = |off: usize| (-lambda * h * off as f64).exp();
        for i in (0..n).rev() {
            // mu(j) for j > i uses only known values; mu(i) includes y_i.
            let mut known = 0.0;
            for j in i..n {
                let lo = if j == i { i + 1 } else { j };
                for l in lo..j + d {
                    known += h * w(l - j) * y[l];
                }
            }
            // Coefficient of y_i inside mu(i) is h * w(0) (only when d >= 1).
            let self_coef = if d >= 1 { h * w(0) } else { 0.0 };
            y[i] = (1.0 + h * known) / (1.0 - h * self_coef);
        }
        y
    }

    #[test]
    fn averaged_value_generator_matches_quadrature_oracle() {
        let grid = make_grid(1.0, 0.25, 16).unwrap();
        let ens = sample_paths(&grid, 64, 1, 15);
        let d = 4;
        let spec = GeneratorSpec::averaged_value(1.0, 1.0, DelaySpec::constant(d, 0));
        let free = FreeTerm::deterministic(&grid, ens.paths(), |_| 1.0);
        let basis = Basis::constant();
        let (sol, _) = solve_absvie(&spec, &free, &ens, &grid, &basis, 1e-13, 80).unwrap();
        let oracle = averaged_value_oracle(&grid, 1.0, d);
        for i in 0..=grid.cells() {
            assert!(
                rel_err(sol.mean_y()[i], oracle[i]) <= 1e-10,
                "node {i}: {} vs {}",
                sol.mean_y()[i],
                oracle[i]
            );
        }
    }

    #[test]
    fn boundary_rows_stay_bit_exact() {
        let grid = make_grid(1.0, 0.5, 8).unwrap();
        let ens = sample_paths(&grid, 500, 1, 16);
        let free = FreeTerm::terminal_affine(0.5, 1.0, &ens);
        let spec = GeneratorSpec::row_coeff(1.0);
        let basis = Basis::brownian(1, 1);
        let (sol, _) = solve_absvie(&spec, &free, &ens, &grid, &basis, 1e-8, 40).unwrap();
        let n = grid.steps_t();
        for i in n..=grid.cells() {
            assert_eq!(sol.y.node(i), free.phi().node(i));
        }
        for i in 0..=grid.cells() {
            for j in 0..grid.cells() {
                if i > n || j >= n {
                    for p in [0, 99] {
                        assert_eq!(sol.z(0).get(p, i, j), free.eta(i, j, 0, p));
                    }
                }
            }
        }
    }

    #[test]
    fn residual_zero_for_deterministic_solution() {
        let grid = make_grid(1.0, 0.0, 8).unwrap();
        let ens = sample_paths(&grid, 1_000, 1, 17);
        let spec = GeneratorSpec::constant(0.5);
        let free = FreeTerm::deterministic(&grid, ens.paths(), |_| 1.0);
        let basis = Basis::brownian(1, 1);
        let (sol, _) = solve_absvie(&spec, &free, &ens, &grid, &basis, 1e-12, 20).unwrap();
        assert!(msolution_residual(&sol, &ens) < 1e-9);
    }

    #[test]
    fn residual_detects_removed_lower_triangle() {
        let grid = make_grid(1.0, 0.0, 8).unwrap();
        let ens = sample_paths(&grid, 20_000, 1, 18);
        let free = FreeTerm::terminal_affine(1.0, 1.0, &ens);
        let spec = GeneratorSpec::row_coeff(1.0);
        let basis = Basis::brownian(1, 2);
        let (sol, _) = solve_absvie(&spec, &free, &ens, &grid, &basis, 1e-6, 40).unwrap();
        let before = msolution_residual(&sol, &ens);
        let mut broken = sol.clone();
        broken.zero_lower_triangle();
        let after = msolution_residual(&broken, &ens);
        assert!(after > before + 0.1, "before {before}, after {after}");
    }

    #[test]
    fn unused_arguments_do_not_influence_output() {
        // The evaluator ignores whatever the usage flags exclude; perturbing
        // the candidate fields that feed those arguments must not change G.
        let grid = make_grid(1.0, 0.25, 8).unwrap();
        let ens = sample_paths(&grid, 800, 1, 19);
        let free = FreeTerm::deterministic(&grid, ens.paths(), |_| 1.0);
        let spec = GeneratorSpec::advanced_value(0.5, DelaySpec::constant(2, 0));
        let basis = Basis::brownian(1, 1);
        let start = MSolution::zero_extended(&free, &grid, 1);
        let a = picard_step(&start, &spec, &free, &ens, &grid, &basis).unwrap();
        let mut perturbed = start.clone();
        for i in 0..=grid.steps_t() {
            for j in 0..grid.steps_t() {
                perturbed.z[0].entry_mut(i, j).fill(123.0);
            }
        }
        let b = picard_step(&perturbed, &spec, &free, &ens, &grid, &basis).unwrap();
        for i in 0..grid.node_count() {
            assert_eq!(a.y.node(i), b.y.node(i), "node {i}");
        }
    }

    #[test]
    fn two_noise_dims_resolve_component_wise() {
        // g = Z_1(t,s) + 0.5 Z_2(t,s) with phi = x0 + b1 W1(T) + b2 W2(T):
        // Y(t) = x0 + b1 W1(t) + b2 W2(t) + (b1 + 0.5 b2)(T - t) and the
        // field components are the constants b1, b2.
        let grid = make_grid(1.0, 0.0, 8).unwrap();
        let paths = 20_000;
        let ens = sample_paths(&grid, paths, 2, 25);
        let (x0, b1, b2) = (1.0, 1.0, -0.5);
        let n = grid.steps_t();
        let w1: Vec<f64> = ens.values_at(n, 0).to_vec();
        let w2: Vec<f64> = ens.values_at(n, 1).to_vec();
        let phi = crate::field::PathField::from_fn(grid.node_count(), paths, |p, _| {
            x0 + b1 * w1[p] + b2 * w2[p]
        });
        let free = FreeTerm::new(phi).with_eta(move |_, j, k, _| {
            if j < n {
                [b1, b2][k]
            } else {
                0.0
            }
        });
        let spec = GeneratorSpec::new(
            ArgUsage::none().with_z_row(),
            0.0,
            DelaySpec::none(),
            |a: &GenArgs<'_>| a.z_row[0] + 0.5 * a.z_row[1],
        );
        let basis = Basis::brownian(2, 1);
        let (sol, _) = solve_absvie(&spec, &free, &ens, &grid, &basis, 1e-6, 40).unwrap();

        let drift = b1 + 0.5 * b2;
        for i in 0..=n {
            let t = grid.time(i);
            let want: Vec<f64> = (0..paths)
                .map(|p| x0 + b1 * ens.value(p, i, 0) + b2 * ens.value(p, i, 1) + drift * (1.0 - t))
                .collect();
            let err = rms(&sol
                .y()
                .node(i)
                .iter()
                .zip(&want)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>());
            assert!(err / rms(&want) <= 0.05, "node {i}: rel err {}", err / rms(&want));
        }
        for (k, b) in [(0usize, b1), (1usize, b2)] {
            let mid = n / 2;
            let dev = rms(&sol
                .z(k)
                .entry(mid, mid / 2)
                .iter()
                .map(|z| z - b)
                .collect::<Vec<_>>());
            assert!(dev <= 0.1 * b.abs().max(0.5), "dim {k}: dev {dev}");
        }
        assert!(msolution_residual(&sol, &ens) <= 0.05);
    }

    #[test]
    fn zero_delays_specialize_to_the_plain_bsvie() {
        // With every advanced argument disabled and no anticipation span,
        // the solver on (t, s, y, z) must reproduce the K = 0 run; the
        // counter-based ensemble agrees on the shared cells, so the interior
        // nodes match exactly.
        let spec = GeneratorSpec::new(
            ArgUsage::none().with_y().with_z_row(),
            0.0,
            DelaySpec::none(),
            |a: &GenArgs<'_>| -0.5 * a.y + 0.3 * a.z_row[0],
        );
        let paths = 2_000;
        let seed = 24;
        let basis = Basis::brownian(1, 2);
        let grid_k = make_grid(1.0, 0.25, 8).unwrap();
        let ens_k = sample_paths(&grid_k, paths, 1, seed);
        let free_k = FreeTerm::deterministic(&grid_k, paths, |_| 1.0);
        let (sol_k, _) = solve_absvie(&spec, &free_k, &ens_k, &grid_k, &basis, 1e-10, 60).unwrap();

        let grid_0 = make_grid(1.0, 0.0, 8).unwrap();
        let ens_0 = sample_paths(&grid_0, paths, 1, seed);
        let free_0 = FreeTerm::deterministic(&grid_0, paths, |_| 1.0);
        let (sol_0, diag_0) =
            solve_absvie(&spec, &free_0, &ens_0, &grid_0, &basis, 1e-10, 60).unwrap();

        for i in 0..=grid_0.steps_t() {
            let dev = rms(&sol_k
                .y()
                .node(i)
                .iter()
                .zip(sol_0.y().node(i))
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>());
            let allowance = 3.0 * diag_0.y_stderr[i].max(1e-12);
            assert!(dev <= allowance, "node {i}: deviation {dev}");
        }
    }

    #[test]
    fn stability_identical_inputs_zero_distance() {
        let grid = make_grid(1.0, 0.25, 8).unwrap();
        let ens = sample_paths(&grid, 1_000, 1, 20);
        let spec = GeneratorSpec::constant(0.3);
        let free = FreeTerm::deterministic(&grid, ens.paths(), |_| 1.0);
        let basis = Basis::brownian(1, 1);
        let report =
            stability_probe(&spec, &free, &spec, &free, &ens, &grid, &basis, 1e-10, 30).unwrap();
        assert_eq!(report.solution_distance, 0.0);
        assert_eq!(report.data_distance, 0.0);
        assert_eq!(report.ratio, 0.0);
    }

    #[test]
    fn stability_scales_linearly_in_free_term_shift() {
        let grid = make_grid(1.0, 0.25, 8).unwrap();
        let ens = sample_paths(&grid, 1_000, 1, 21);
        let spec = GeneratorSpec::constant(0.3);
        let base = FreeTerm::deterministic(&grid, ens.paths(), |_| 1.0);
        let basis = Basis::brownian(1, 1);
        let mut ratios = Vec::new();
        for eps in [1e-2, 1e-3] {
            let shifted = FreeTerm::deterministic(&grid, ens.paths(), move |_| 1.0 + eps);
            let report =
                stability_probe(&spec, &base, &spec, &shifted, &ens, &grid, &basis, 1e-12, 30)
                    .unwrap();
            ratios.push(report.solution_distance / eps);
        }
        let spread = (ratios[0] - ratios[1]).abs() / ratios[0].max(1e-300);
        assert!(spread < 0.20, "ratios {ratios:?}");
    }

    #[test]
    fn stability_scales_linearly_in_generator_shift() {
        let grid = make_grid(1.0, 0.25, 8).unwrap();
        let ens = sample_paths(&grid, 1_000, 1, 22);
        let base = GeneratorSpec::constant(0.3);
        let free = FreeTerm::deterministic(&grid, ens.paths(), |_| 1.0);
        let basis = Basis::brownian(1, 1);
        let mut dists = Vec::new();
        for eps in [1e-2, 1e-3] {
            let shifted = GeneratorSpec::constant(0.3 + eps);
            let report =
                stability_probe(&base, &free, &shifted, &free, &ens, &grid, &basis, 1e-12, 30)
                    .unwrap();
            dists.push(report.solution_distance / eps);
        }
        let spread = (dists[0] - dists[1]).abs() / dists[0].max(1e-300);
        assert!(spread < 0.20, "scaled distances {dists:?}");
    }

    #[test]
    fn non_finite_generator_locates_site() {
        let grid = make_grid(1.0, 0.0, 4).unwrap();
        let ens = sample_paths(&grid, 100, 1, 23);
        let free = FreeTerm::deterministic(&grid, ens.paths(), |_| 1.0);
        let spec = GeneratorSpec::new(ArgUsage::none(), 0.0, DelaySpec::none(), |a| {
            if a.s >= 0.5 {
                f64::NAN
            } else {
                1.0
            }
        });
        let basis = Basis::constant();
        match solve_absvie(&spec, &free, &ens, &grid, &basis, 1e-10, 5) {
            Err(SolveError::NonFiniteGenerator { row: _, col }) => assert!(col >= 2),
            Err(other) => panic!("expected non-finite report, got {other:?}"),
            Ok(_) => panic!("expected non-finite report, got a solution"),
        }
    }
}
