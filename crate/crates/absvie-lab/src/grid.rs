//! Time discretization of [0, T+K] with delay alignment.
//!
//! Nodes are `t_i = i*h` for `i = 0..=cells`, where `h = T/steps_t` and
//! `cells = steps_t + K/h`. The anticipation span K must be an exact integer
//! multiple of the step so every advanced argument lands on a node. Delays are
//! grid-aligned integer offsets (constant or per-node piecewise-constant
//! tables); with constant offsets the paper-side change-of-variables bound
//! holds with M = 1 automatically.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("horizon must be positive, got {0}")]
    BadHorizon(f64),
    #[error("anticipation span must be nonnegative, got {0}")]
    BadSpan(f64),
    #[error("step count must be at least 1")]
    BadSteps,
    #[error("anticipation span {span} is not an integer multiple of step {step}")]
    MisalignedSpan { span: f64, step: f64 },
    #[error("delay offset {offset} at node {node} overruns the grid ({cells} cells)")]
    DelayOverrun {
        node: usize,
        offset: usize,
        cells: usize,
    },
    #[error("per-node delay table has {got} entries, grid needs {need}")]
    DelayTableLength { got: usize, need: usize },
}

/// Uniform grid over [0, T+K], aligned so that T and T+K are nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    anticipation: f64,
    steps_t: usize,
    step: f64,
    cells: usize,
}

impl TimeGrid {
    /// Horizon T.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Anticipation span K.
    pub fn anticipation(&self) -> f64 {
        self.anticipation
    }

    /// Number of steps in [0, T]; node `steps_t` is t = T.
    pub fn steps_t(&self) -> usize {
        self.steps_t
    }

    /// Step h = T / steps_t.
    pub fn step(&self) -> f64 {
        self.step
    }

    /// Total increment cells covering [0, T+K]; the last node index.
    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Number of nodes, `cells + 1`.
    pub fn node_count(&self) -> usize {
        self.cells + 1
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.step
    }
}

/// Builds the grid, rejecting K that does not land on a node.
pub fn make_grid(horizon: f64, anticipation: f64, steps_t: usize) -> Result<TimeGrid, GridError> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(GridError::BadHorizon(horizon));
    }
    if !(anticipation >= 0.0) || !anticipation.is_finite() {
        return Err(GridError::BadSpan(anticipation));
    }
    if steps_t < 1 {
        return Err(GridError::BadSteps);
    }
    let step = horizon / steps_t as f64;
    let ratio = anticipation / step;
    let span_cells = ratio.round();
    if (ratio - span_cells).abs() > 1e-12 * ratio.max(1.0) {
        return Err(GridError::MisalignedSpan {
            span: anticipation,
            step,
        });
    }
    Ok(TimeGrid {
        horizon,
        anticipation,
        steps_t,
        step,
        cells: steps_t + span_cells as usize,
    })
}

/// Grid-index delay offsets for the advanced arguments (state offset and
/// field offset), constant or piecewise-constant per node.
#[derive(Clone, Debug)]
pub enum Offset {
    Constant(usize),
    PerNode(Vec<usize>),
}

impl Offset {
    #[inline]
    pub fn at(&self, node: usize) -> usize {
        match self {
            Offset::Constant(d) => *d,
            Offset::PerNode(table) => table[node],
        }
    }
}

/// Delay configuration: `delta` shifts solution values, `zeta` shifts the
/// two-parameter field, both in whole grid cells.
#[derive(Clone, Debug)]
pub struct DelaySpec {
    pub delta: Offset,
    pub zeta: Offset,
}

impl DelaySpec {
    pub fn none() -> Self {
        Self {
            delta: Offset::Constant(0),
            zeta: Offset::Constant(0),
        }
    }

    pub fn constant(delta: usize, zeta: usize) -> Self {
        Self {
            delta: Offset::Constant(delta),
            zeta: Offset::Constant(zeta),
        }
    }

    #[inline]
    pub fn delta_at(&self, node: usize) -> usize {
        self.delta.at(node)
    }

    #[inline]
    pub fn zeta_at(&self, node: usize) -> usize {
        self.zeta.at(node)
    }

    /// Checks that every advanced index from a node in [0, T] stays on the
    /// grid (the discrete form of the admissibility condition on delays).
    /// The field offset is held one cell tighter below the horizon: shifted
    /// field reads are cell-indexed, so the last cell is the ceiling.
    pub fn validate(&self, grid: &TimeGrid) -> Result<(), GridError> {
        for off in [&self.delta, &self.zeta] {
            if let Offset::PerNode(table) = off {
                if table.len() < grid.steps_t() + 1 {
                    return Err(GridError::DelayTableLength {
                        got: table.len(),
                        need: grid.steps_t() + 1,
                    });
                }
            }
            for node in 0..=grid.steps_t() {
                let d = off.at(node);
                if node + d > grid.cells() {
                    return Err(GridError::DelayOverrun {
                        node,
                        offset: d,
                        cells: grid.cells(),
                    });
                }
            }
        }
        for node in 0..grid.steps_t() {
            let z = self.zeta.at(node);
            if node + z >= grid.cells() && z > 0 {
                return Err(GridError::DelayOverrun {
                    node,
                    offset: z,
                    cells: grid.cells(),
                });
            }
        }
        Ok(())
    }
}
