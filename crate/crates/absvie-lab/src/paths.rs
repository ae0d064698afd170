//! Reproducible Brownian path ensembles.
//!
//! Every increment is a pure function of `(seed, path, cell, dim)`: a
//! splitmix64-style counter hash produces a 64-bit uniform, which is mapped
//! through a double-precision rational approximation of the inverse normal
//! CDF (Wichura's PPND16) and scaled by sqrt(h). No generator state exists,
//! so ensembles are bitwise identical across runs, platforms and worker
//! counts, and any sub-range can be generated independently.

use crate::grid::TimeGrid;
use rayon::prelude::*;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn counter_hash(seed: u64, path: u64, cell: u64, dim: u64) -> u64 {
    let mut h = splitmix(seed ^ 0x9E37_79B9_7F4A_7C15);
    h = splitmix(h ^ (path.wrapping_add(1)).wrapping_mul(0xA24B_AED4_963E_E407));
    h = splitmix(h ^ (cell.wrapping_add(1)).wrapping_mul(0x9FB2_1C65_1E98_DF25));
    h = splitmix(h ^ (dim.wrapping_add(1)).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    h
}

/// Strictly-interior uniform in (0, 1) from 53 high bits.
#[inline]
fn uniform_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Inverse of the standard normal CDF (AS 241, double precision).
#[allow(clippy::excessive_precision)] // published coefficients kept verbatim
pub fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 8] = [
        3.387_132_872_796_366_608e0,
        1.331_416_678_917_843_774_5e2,
        1.971_590_950_306_551_442_7e3,
        1.373_169_376_550_946_112_5e4,
        4.592_195_393_154_987_145_7e4,
        6.726_577_092_700_870_085_3e4,
        3.343_057_558_358_812_810_5e4,
        2.509_080_928_730_122_672_7e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.231_333_070_160_091_125_2e1,
        6.871_870_074_920_579_083e2,
        5.394_196_021_424_751_107_7e3,
        2.121_379_430_158_659_586_7e4,
        3.930_789_580_009_271_061e4,
        2.872_908_573_572_194_267_4e4,
        5.226_495_278_852_854_561e3,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_3e0,
        4.630_337_846_156_545_295_9e0,
        5.769_497_221_460_691_405_5e0,
        3.647_848_324_763_204_605e0,
        1.270_458_252_452_368_382_6e0,
        2.417_807_251_774_506_117_7e-1,
        2.272_384_498_926_918_458_3e-2,
        7.745_450_142_783_414_076_4e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_9e0,
        1.676_384_830_183_803_849_4e0,
        6.897_673_349_851_000_045_5e-1,
        1.481_039_764_274_800_745_9e-1,
        1.519_866_656_361_645_719_7e-2,
        5.475_938_084_995_344_946e-4,
        1.050_750_071_644_416_843_2e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_2e0,
        5.463_784_911_164_114_369_9e0,
        1.784_826_539_917_291_335_8e0,
        2.965_605_718_285_048_912_3e-1,
        2.653_218_952_657_612_309_3e-2,
        1.242_660_947_388_078_438_6e-3,
        2.711_555_568_743_487_578_2e-5,
        2.010_334_399_292_288_132_6e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.998_322_065_558_879_376_9e-1,
        1.369_298_809_227_358_053_1e-1,
        1.487_536_129_085_061_485_2e-2,
        7.868_691_311_456_132_591e-4,
        1.846_318_317_510_054_681_8e-5,
        1.421_511_758_316_445_888_7e-7,
        2.044_263_103_389_939_785_6e-15,
    ];

    #[inline]
    fn horner(coef: &[f64; 8], x: f64) -> f64 {
        coef.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * horner(&A, r) / horner(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        horner(&C, r) / horner(&D, r)
    } else {
        let r = r - 5.0;
        horner(&E, r) / horner(&F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Deterministic uniform in (0, 1) keyed by a seed and three counters
/// (used by sampling probes outside the path ensemble).
pub(crate) fn counter_uniform(seed: u64, a: u64, b: u64, c: u64) -> f64 {
    uniform_open(counter_hash(seed, a, b, c))
}

/// Seeded ensemble of Brownian increments and prefix-summed values on a grid.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    grid: TimeGrid,
    paths: usize,
    dims: usize,
    seed: u64,
    /// Increment over cell j, dim k, path p at `(j*dims + k)*paths + p`.
    increments: Vec<f64>,
    /// W(t_i) at `(i*dims + k)*paths + p`.
    values: Vec<f64>,
}

/// Draws the ensemble: increments i.i.d. N(0, h) per coordinate.
pub fn sample_paths(grid: &TimeGrid, paths: usize, dims: usize, seed: u64) -> PathEnsemble {
    assert!(paths >= 1 && dims >= 1);
    let cells = grid.cells();
    let scale = grid.step().sqrt();
    let mut increments = vec![0.0; cells * dims * paths];
    increments
        .par_chunks_mut(paths)
        .enumerate()
        .for_each(|(row, slot)| {
            let j = (row / dims) as u64;
            let k = (row % dims) as u64;
            for (p, v) in slot.iter_mut().enumerate() {
                let u = uniform_open(counter_hash(seed, p as u64, j, k));
                *v = scale * inverse_normal_cdf(u);
            }
        });
    PathEnsemble::from_increments(*grid, paths, dims, seed, increments)
}

impl PathEnsemble {
    /// Builds an ensemble from explicit increments (cell-major layout, as in
    /// [`PathEnsemble::increments_at`]); Brownian values are prefix sums.
    pub fn from_increments(
        grid: TimeGrid,
        paths: usize,
        dims: usize,
        seed: u64,
        increments: Vec<f64>,
    ) -> Self {
        let cells = grid.cells();
        assert_eq!(increments.len(), cells * dims * paths);
        let mut values = vec![0.0; (cells + 1) * dims * paths];
        for i in 0..cells {
            for k in 0..dims {
                let prev = (i * dims + k) * paths;
                let next = ((i + 1) * dims + k) * paths;
                let inc = (i * dims + k) * paths;
                for p in 0..paths {
                    values[next + p] = values[prev + p] + increments[inc + p];
                }
            }
        }
        Self {
            grid,
            paths,
            dims,
            seed,
            increments,
            values,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> f64 {
        self.grid.step()
    }

    #[inline]
    pub fn increment(&self, p: usize, j: usize, k: usize) -> f64 {
        self.increments[(j * self.dims + k) * self.paths + p]
    }

    /// All paths' increment over cell j, dim k.
    #[inline]
    pub fn increments_at(&self, j: usize, k: usize) -> &[f64] {
        let base = (j * self.dims + k) * self.paths;
        &self.increments[base..base + self.paths]
    }

    #[inline]
    pub fn value(&self, p: usize, i: usize, k: usize) -> f64 {
        self.values[(i * self.dims + k) * self.paths + p]
    }

    /// All paths' W_k(t_i).
    #[inline]
    pub fn values_at(&self, i: usize, k: usize) -> &[f64] {
        let base = (i * self.dims + k) * self.paths;
        &self.values[base..base + self.paths]
    }

    /// W(t_i) on path p, all dims.
    pub fn brownian_value(&self, p: usize, i: usize) -> Vec<f64> {
        (0..self.dims).map(|k| self.value(p, i, k)).collect()
    }

    /// Copy with one increment replaced (test hook for causality probes).
    pub fn with_replaced_increment(&self, p: usize, j: usize, k: usize, value: f64) -> Self {
        let mut inc = self.increments.clone();
        inc[(j * self.dims + k) * self.paths + p] = value;
        Self::from_increments(self.grid, self.paths, self.dims, self.seed, inc)
    }
}
