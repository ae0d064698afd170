//! Dense per-path storage for the discrete fields the solvers work on.
//!
//! Three layouts cover everything in the crate:
//!
//! * [`PathField`] — one scalar per (node, path), node-major, so the slice of
//!   all paths at a node is contiguous (regression gathers per node).
//! * [`PairField`] — one scalar per (t-node row, increment cell, path), used
//!   for the two-parameter field Z(t_i, t_j).
//! * [`ShiftedField`] — a [`PathField`] with `lead` extra nodes before index 0,
//!   used for delayed state and control paths on [-delta, T].
//!
//! All reductions over paths go through [`chunked_sum`] / [`chunked_dot`]:
//! fixed-size chunks are summed in parallel and the partials are folded in
//! index order, so results are bitwise identical at any worker count.

use rayon::prelude::*;

const CHUNK: usize = 8192;

/// Sum of a slice with a fixed chunking scheme, independent of thread count.
pub fn chunked_sum(values: &[f64]) -> f64 {
    if values.len() <= CHUNK {
        return values.iter().sum();
    }
    let partials: Vec<f64> = values
        .par_chunks(CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect();
    partials.iter().sum()
}

/// Dot product with the same deterministic chunking as [`chunked_sum`].
pub fn chunked_dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.len() <= CHUNK {
        return a.iter().zip(b).map(|(x, y)| x * y).sum();
    }
    let partials: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(ca, cb)| ca.iter().zip(cb).map(|(x, y)| x * y).sum::<f64>())
        .collect();
    partials.iter().sum()
}

/// Mean of a slice (deterministic reduction).
pub fn mean(values: &[f64]) -> f64 {
    chunked_sum(values) / values.len() as f64
}

/// Mean and standard error of the mean.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let m = mean(values);
    if n < 2 {
        return (m, 0.0);
    }
    let partials: Vec<f64> = values
        .par_chunks(CHUNK)
        .map(|c| c.iter().map(|v| (v - m) * (v - m)).sum::<f64>())
        .collect();
    let var = partials.iter().sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Root mean square of a slice.
pub fn rms(values: &[f64]) -> f64 {
    (chunked_dot(values, values) / values.len() as f64).sqrt()
}

/// Mean of squared entries (deterministic reduction, no allocation per call).
pub fn mean_sq(values: &[f64]) -> f64 {
    chunked_dot(values, values) / values.len() as f64
}

/// Mean of squared differences between two slices.
pub fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let partials: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(ca, cb)| {
            ca.iter()
                .zip(cb)
                .map(|(x, y)| {
                    let d = x - y;
                    d * d
                })
                .sum::<f64>()
        })
        .collect();
    partials.iter().sum::<f64>() / a.len() as f64
}

/// Per-path scalar values at each grid node, node-major.
#[derive(Clone, Debug)]
pub struct PathField {
    nodes: usize,
    paths: usize,
    data: Vec<f64>,
}

impl PathField {
    pub fn zeros(nodes: usize, paths: usize) -> Self {
        Self {
            nodes,
            paths,
            data: vec![0.0; nodes * paths],
        }
    }

    /// Builds a field by evaluating `f(path, node)` everywhere.
    pub fn from_fn(nodes: usize, paths: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let mut data = vec![0.0; nodes * paths];
        data.par_chunks_mut(paths).enumerate().for_each(|(i, row)| {
            for (p, slot) in row.iter_mut().enumerate() {
                *slot = f(p, i);
            }
        });
        Self { nodes, paths, data }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    #[inline]
    pub fn node(&self, i: usize) -> &[f64] {
        &self.data[i * self.paths..(i + 1) * self.paths]
    }

    #[inline]
    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.paths..(i + 1) * self.paths]
    }

    #[inline]
    pub fn get(&self, p: usize, i: usize) -> f64 {
        self.data[i * self.paths + p]
    }

    pub fn mean_at(&self, i: usize) -> f64 {
        mean(self.node(i))
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }
}

/// Per-path values of a two-parameter field, indexed by (t-node row `i`,
/// increment cell `j`); the slice over paths at a fixed (i, j) is contiguous.
#[derive(Clone, Debug)]
pub struct PairField {
    rows: usize,
    cells: usize,
    paths: usize,
    data: Vec<f64>,
}

impl PairField {
    pub fn zeros(rows: usize, cells: usize, paths: usize) -> Self {
        Self {
            rows,
            cells,
            paths,
            data: vec![0.0; rows * cells * paths],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.cells + j) * self.paths;
        &self.data[base..base + self.paths]
    }

    #[inline]
    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let base = (i * self.cells + j) * self.paths;
        &mut self.data[base..base + self.paths]
    }

    #[inline]
    pub fn get(&self, p: usize, i: usize, j: usize) -> f64 {
        self.data[(i * self.cells + j) * self.paths + p]
    }

    /// Contiguous storage of one row (all cells, all paths).
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let base = i * self.cells * self.paths;
        &mut self.data[base..base + self.cells * self.paths]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let base = i * self.cells * self.paths;
        &self.data[base..base + self.cells * self.paths]
    }
}

/// A [`PathField`] extended `lead` nodes to the left of index 0, for paths
/// with delay history on [-delta, 0]. Indexing is by `isize` in
/// `-lead ..= main_nodes`.
#[derive(Clone, Debug)]
pub struct ShiftedField {
    lead: usize,
    main_nodes: usize,
    paths: usize,
    data: Vec<f64>,
}

impl ShiftedField {
    pub fn zeros(lead: usize, main_nodes: usize, paths: usize) -> Self {
        Self {
            lead,
            main_nodes,
            paths,
            data: vec![0.0; (lead + main_nodes + 1) * paths],
        }
    }

    pub fn from_fn(
        lead: usize,
        main_nodes: usize,
        paths: usize,
        f: impl Fn(usize, isize) -> f64 + Sync,
    ) -> Self {
        let mut out = Self::zeros(lead, main_nodes, paths);
        out.data
            .par_chunks_mut(paths)
            .enumerate()
            .for_each(|(row, slot)| {
                let i = row as isize - lead as isize;
                for (p, v) in slot.iter_mut().enumerate() {
                    *v = f(p, i);
                }
            });
        out
    }

    pub fn lead(&self) -> usize {
        self.lead
    }

    pub fn main_nodes(&self) -> usize {
        self.main_nodes
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    #[inline]
    fn offset(&self, i: isize) -> usize {
        let row = i + self.lead as isize;
        debug_assert!(row >= 0 && (row as usize) <= self.lead + self.main_nodes);
        row as usize * self.paths
    }

    #[inline]
    pub fn node(&self, i: isize) -> &[f64] {
        let base = self.offset(i);
        &self.data[base..base + self.paths]
    }

    #[inline]
    pub fn node_mut(&mut self, i: isize) -> &mut [f64] {
        let base = self.offset(i);
        &mut self.data[base..base + self.paths]
    }

    #[inline]
    pub fn get(&self, p: usize, i: isize) -> f64 {
        self.data[self.offset(i) + p]
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Main-range view as a plain [`PathField`] (nodes 0..=main_nodes).
    pub fn main_field(&self) -> PathField {
        PathField {
            nodes: self.main_nodes + 1,
            paths: self.paths,
            data: self.data[self.lead * self.paths..].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_sequential() {
        let v: Vec<f64> = (0..50_000).map(|i| (i as f64).sin()).collect();
        let seq: f64 = v.iter().sum();
        assert!((chunked_sum(&v) - seq).abs() < 1e-9);
    }

    #[test]
    fn chunked_sum_deterministic_across_pools() {
        let v: Vec<f64> = (0..100_000).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let a = chunked_sum(&v);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = pool.install(|| chunked_sum(&v));
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn shifted_field_indexing() {
        let f = ShiftedField::from_fn(3, 5, 2, |p, i| i as f64 * 10.0 + p as f64);
        assert_eq!(f.get(0, -3), -30.0);
        assert_eq!(f.get(1, 5), 51.0);
        assert_eq!(f.node(0)[1], 1.0);
    }

    #[test]
    fn pair_field_entry_layout() {
        let mut z = PairField::zeros(3, 4, 2);
        z.entry_mut(2, 1)[1] = 7.5;
        assert_eq!(z.get(1, 2, 1), 7.5);
        assert_eq!(z.get(0, 2, 1), 0.0);
    }
}
