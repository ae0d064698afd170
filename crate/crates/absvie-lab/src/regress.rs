//! Conditional-expectation engine: least-squares projection of path
//! functionals onto adapted feature bases, and extraction of discrete
//! martingale-representation coefficients.
//!
//! A [`Basis`] is an ordered list of features; feature 0 is always the
//! constant 1, and every feature at node j reads only information available
//! at t_j (Brownian monomials at t_j, plus caller-registered adapted state
//! tables). Fits solve the normal equations by Cholesky; a ridge of
//! `1e-10 * trace / dim` (escalating) kicks in only when the Gram matrix is
//! rank-degenerate, so well-posed fits carry no regularization bias.

use crate::field::{chunked_dot, PathField};
use crate::paths::PathEnsemble;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegressError {
    #[error("regression target contains a non-finite value at path {0}")]
    NonFiniteValue(usize),
    #[error("target length {got} does not match ensemble path count {want}")]
    LengthMismatch { got: usize, want: usize },
}

/// One adapted feature evaluator.
#[derive(Clone, Debug)]
pub enum Feature {
    /// Product over dims of W_k(t_j)^e_k; the all-zero exponent is the constant.
    BrownianMonomial(Vec<u32>),
    /// Power of a registered per-path adapted state table.
    StatePow { state: usize, pow: u32 },
}

/// Ordered adapted feature basis shared by all fits of one solve.
#[derive(Clone)]
pub struct Basis {
    degree: u32,
    features: Vec<Feature>,
    states: Vec<Arc<PathField>>,
}

fn monomial_exponents(dims: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; dims]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for e in &out {
            let total: u32 = e.iter().sum();
            if total < degree {
                // Raise the last nonzero position or later, keeping exponent
                // vectors canonical so each monomial appears once.
                let start = e
                    .iter()
                    .rposition(|&x| x > 0)
                    .unwrap_or(0);
                for d in start..dims {
                    let mut e2 = e.clone();
                    e2[d] += 1;
                    next.push(e2);
                }
            }
        }
        out.extend(next.clone());
        if next.is_empty() {
            break;
        }
        out.dedup();
    }
    out.sort();
    out.dedup();
    out.sort_by_key(|e| (e.iter().sum::<u32>(), e.clone()));
    out
}

impl Basis {
    /// Polynomials in the Brownian components up to `degree` (feature 0 is
    /// the constant).
    pub fn brownian(dims: usize, degree: u32) -> Self {
        let features = monomial_exponents(dims, degree)
            .into_iter()
            .map(Feature::BrownianMonomial)
            .collect();
        Self {
            degree,
            features,
            states: Vec::new(),
        }
    }

    /// Constant-only basis: every projection is the per-node sample mean.
    pub fn constant() -> Self {
        Self::brownian(1, 0)
    }

    /// Registers an adapted per-path table and appends its powers 1..=pow.
    pub fn register_state(&mut self, table: Arc<PathField>, max_pow: u32) {
        let idx = self.states.len();
        self.states.push(table);
        for pow in 1..=max_pow {
            self.features.push(Feature::StatePow { state: idx, pow });
        }
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn includes_constant(&self) -> bool {
        matches!(&self.features[0], Feature::BrownianMonomial(e) if e.iter().all(|&x| x == 0))
    }

    fn fill_column(&self, feature: &Feature, ens: &PathEnsemble, node: usize, out: &mut [f64]) {
        match feature {
            Feature::BrownianMonomial(exps) => {
                out.fill(1.0);
                for (k, &e) in exps.iter().enumerate() {
                    if e == 0 {
                        continue;
                    }
                    let w = ens.values_at(node, k);
                    for (o, &wv) in out.iter_mut().zip(w) {
                        *o *= wv.powi(e as i32);
                    }
                }
            }
            Feature::StatePow { state, pow } => {
                let tab = self.states[*state].node(node);
                if *pow == 1 {
                    out.copy_from_slice(tab);
                } else {
                    for (o, &v) in out.iter_mut().zip(tab) {
                        *o = v.powi(*pow as i32);
                    }
                }
            }
        }
    }
}

/// Fitted regression coefficients at one node.
#[derive(Clone, Debug)]
pub struct Projection {
    pub node: usize,
    pub coefficients: Vec<f64>,
    pub ridge: f64,
}

/// Per-fit noise summary: RMS standard error of the fitted values,
/// `sigma_resid * sqrt(F/M)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct FitStats {
    pub stderr: f64,
}

/// Feature matrix and factored normal equations at one node, reusable across
/// many regression targets.
pub struct NodeDesign {
    node: usize,
    paths: usize,
    /// Feature count of the basis (pruned coefficients report as zero).
    total: usize,
    /// Indices of the retained (not identically zero) features.
    active: Vec<usize>,
    columns: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    ridge: f64,
}

impl NodeDesign {
    pub fn build(basis: &Basis, ens: &PathEnsemble, node: usize) -> Self {
        let paths = ens.paths();
        let total = basis.len();
        let mut all_columns = vec![vec![0.0; paths]; total];
        all_columns.par_iter_mut().enumerate().for_each(|(c, col)| {
            basis.fill_column(&basis.features[c], ens, node, col);
        });

        // Identically-zero features (the Brownian monomials at node 0, a zero
        // state table) carry no information; pruning them keeps well-posed
        // fits on the exact Cholesky path.
        let mut active = Vec::with_capacity(total);
        let mut columns = Vec::with_capacity(total);
        for (c, col) in all_columns.into_iter().enumerate() {
            if col.iter().any(|&v| v != 0.0) {
                active.push(c);
                columns.push(col);
            }
        }
        let f = columns.len();
        assert!(f > 0, "no usable feature at node {node}");

        let mut gram = DMatrix::<f64>::zeros(f, f);
        for a in 0..f {
            for b in a..f {
                let v = chunked_dot(&columns[a], &columns[b]);
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
        }
        let trace = gram.trace();
        let scale = trace / f as f64;

        let mut ridge = 0.0;
        let chol = loop {
            let mut m = gram.clone();
            if ridge > 0.0 {
                for d in 0..f {
                    m[(d, d)] += ridge;
                }
            }
            match Cholesky::new(m) {
                Some(ch) => {
                    let ok = ridge > 0.0 || {
                        let diag = ch.l_dirty();
                        let mut min_piv = f64::INFINITY;
                        for d in 0..f {
                            min_piv = min_piv.min(diag[(d, d)] * diag[(d, d)]);
                        }
                        min_piv >= 1e-12 * scale
                    };
                    if ok {
                        break ch;
                    }
                }
                None => {}
            }
            ridge = if ridge == 0.0 {
                1e-10 * scale.max(f64::MIN_POSITIVE)
            } else {
                ridge * 100.0
            };
            assert!(
                ridge.is_finite() && ridge < 1e30,
                "gram matrix not factorable at node {node}"
            );
        };

        Self {
            node,
            paths,
            total,
            active,
            columns,
            chol,
            ridge,
        }
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Solves the normal equations for one target; coefficients of pruned
    /// features come back as zero.
    pub fn fit(&self, values: &[f64]) -> Projection {
        assert_eq!(values.len(), self.paths);
        let rhs: Vec<f64> = self
            .columns
            .iter()
            .map(|col| chunked_dot(col, values))
            .collect();
        let c = self.chol.solve(&DVector::from_vec(rhs));
        let mut coefficients = vec![0.0; self.total];
        for (slot, &v) in self.active.iter().zip(c.iter()) {
            coefficients[*slot] = v;
        }
        Projection {
            node: self.node,
            coefficients,
            ridge: self.ridge,
        }
    }

    /// Evaluates fitted values for a (full-length) coefficient vector.
    pub fn evaluate(&self, coefficients: &[f64], out: &mut [f64]) {
        assert_eq!(out.len(), self.paths);
        out.fill(0.0);
        for (col, &idx) in self.columns.iter().zip(&self.active) {
            let c = coefficients[idx];
            if c == 0.0 {
                continue;
            }
            out.par_chunks_mut(8192)
                .zip(col.par_chunks(8192))
                .for_each(|(o, ci)| {
                    for (ov, &cv) in o.iter_mut().zip(ci) {
                        *ov += c * cv;
                    }
                });
        }
    }

    /// Fits and evaluates into a caller buffer, returning noise stats.
    pub fn project_into(&self, values: &[f64], out: &mut [f64]) -> FitStats {
        let proj = self.fit(values);
        self.evaluate(&proj.coefficients, out);
        let m = self.paths;
        let f = self.columns.len();
        if m > f {
            let mut ss = 0.0;
            for chunk in 0..m.div_ceil(8192) {
                let lo = chunk * 8192;
                let hi = (lo + 8192).min(m);
                let mut acc = 0.0;
                for p in lo..hi {
                    let d = out[p] - values[p];
                    acc += d * d;
                }
                ss += acc;
            }
            let sigma2 = ss / (m - f) as f64;
            FitStats {
                stderr: (sigma2 * f as f64 / m as f64).sqrt(),
            }
        } else {
            FitStats::default()
        }
    }

    /// Fits and evaluates in one call, returning fitted values and noise stats.
    pub fn project_values(&self, values: &[f64]) -> (Vec<f64>, FitStats) {
        let mut fitted = vec![0.0; self.paths];
        let stats = self.project_into(values, &mut fitted);
        (fitted, stats)
    }
}

fn check_values(values: &[f64], ens: &PathEnsemble) -> Result<(), RegressError> {
    if values.len() != ens.paths() {
        return Err(RegressError::LengthMismatch {
            got: values.len(),
            want: ens.paths(),
        });
    }
    if let Some(p) = values.iter().position(|v| !v.is_finite()) {
        return Err(RegressError::NonFiniteValue(p));
    }
    Ok(())
}

/// Fitted conditional-expectation estimates of `values` given the node-j
/// information, evaluated per path.
pub fn project(
    values: &[f64],
    node: usize,
    basis: &Basis,
    ens: &PathEnsemble,
) -> Result<Vec<f64>, RegressError> {
    check_values(values, ens)?;
    let design = NodeDesign::build(basis, ens, node);
    Ok(design.project_values(values).0)
}

/// Discrete martingale-representation coefficient of a terminal-measurable
/// target at cell `node`, dim `dim`: `(1/h) * project(values * dW, node)`.
pub fn martingale_coeff(
    values: &[f64],
    node: usize,
    dim: usize,
    basis: &Basis,
    ens: &PathEnsemble,
) -> Result<Vec<f64>, RegressError> {
    check_values(values, ens)?;
    let dw = ens.increments_at(node, dim);
    let target: Vec<f64> = values.iter().zip(dw).map(|(v, w)| v * w).collect();
    let design = NodeDesign::build(basis, ens, node);
    let (mut fitted, _) = design.project_values(&target);
    let inv_h = 1.0 / ens.step();
    for v in &mut fitted {
        *v *= inv_h;
    }
    Ok(fitted)
}
