//! Component-count bound, tuning grids and K-fold cross-validation.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::design::{build_design, score_matrix, CurveDataset, DesignMatrices};
use crate::eigensolver::{
    fit_smooth_with, fit_sparse_with, ComponentSet, PenaltyConfig, PenaltyMode, SpectralFactor,
};
use crate::error::{invalid, Result};

/// Ratio `σ̂_k² / Σ_{i≤k} σ̂_i²` at or below which later components are
/// considered negligible.
pub const K_UPPER_RATIO: f64 = 1e-3;

/// Default number of folds.
pub const DEFAULT_FOLDS: usize = 5;

/// `min{k > 1 : σ̂_k² / (σ̂_1² + … + σ̂_k²) ≤ 0.001} ∧ m`, or
/// `m ∧ len(sigma2)` when no k qualifies.
pub fn k_upper(sigma2: &[f64], m: usize) -> Result<usize> {
    if sigma2.is_empty() {
        return invalid("k_upper needs at least one eigenvalue");
    }
    if sigma2.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return invalid("eigenvalues must be finite and nonnegative");
    }
    if sigma2.windows(2).any(|w| w[1] > w[0]) {
        return invalid("eigenvalues must be non-increasing");
    }
    let mut cum = sigma2[0];
    for (i, &s) in sigma2.iter().enumerate().skip(1) {
        cum += s;
        if s == 0.0 || s <= K_UPPER_RATIO * cum {
            return Ok((i + 1).min(m));
        }
    }
    Ok(sigma2.len().min(m))
}

/// One tuning cell `(τ, λ)`; λ is zero for the smooth penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub tau: f64,
    pub lambda: f64,
    pub eta: f64,
}

/// Tuning grid: the Cartesian product of `(τ, λ)` pairs and `η` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvGrid {
    pub mode: PenaltyMode,
    pub pairs: Vec<(f64, f64)>,
    pub etas: Vec<f64>,
}

impl CvGrid {
    /// 25 cells for the smooth penalty.
    pub fn small_p() -> Self {
        CvGrid {
            mode: PenaltyMode::Smooth,
            pairs: [1e-9, 1e-6, 1e-3, 1e1, 1e3]
                .iter()
                .map(|&t| (t, 0.0))
                .collect(),
            etas: vec![1e-7, 1e-5, 1e-3, 1e-1, 10.0],
        }
    }

    /// 12 cells for the smooth-sparse penalty.
    pub fn large_p() -> Self {
        CvGrid {
            mode: PenaltyMode::SmoothSparse,
            pairs: vec![(0.1, 0.1), (1.0, 0.2), (10.0, 0.3), (100.0, 0.4)],
            etas: vec![1e-6, 1e-3, 1.0],
        }
    }

    pub fn for_mode(mode: PenaltyMode) -> Self {
        match mode {
            PenaltyMode::Smooth => Self::small_p(),
            PenaltyMode::SmoothSparse => Self::large_p(),
        }
    }

    /// Cells in table order: η outer, `(τ, λ)` inner.
    pub fn cells(&self) -> Vec<Cell> {
        self.etas
            .iter()
            .flat_map(|&eta| {
                self.pairs
                    .iter()
                    .map(move |&(tau, lambda)| Cell { tau, lambda, eta })
            })
            .collect()
    }

    pub fn config(&self, cell: &Cell) -> PenaltyConfig {
        match self.mode {
            PenaltyMode::Smooth => PenaltyConfig::smooth(cell.tau, cell.eta),
            PenaltyMode::SmoothSparse => PenaltyConfig::sparse(cell.tau, cell.lambda, cell.eta),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() || self.etas.is_empty() {
            return invalid("tuning grid is empty");
        }
        for cell in self.cells() {
            self.config(&cell).validate()?;
        }
        Ok(())
    }
}

/// Validation errors of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    /// Bound on K from the full-data fit.
    pub k_upper: usize,
    /// `total[k-1]` is the summed validation error with k components.
    pub total: Vec<f64>,
    /// `per_fold[f][k-1]`.
    pub per_fold: Vec<Vec<f64>>,
}

/// Selected tuning parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvBest {
    pub mode: PenaltyMode,
    pub tau: f64,
    pub lambda: f64,
    pub eta: f64,
    pub k: usize,
    pub error: f64,
}

impl CvBest {
    pub fn config(&self) -> PenaltyConfig {
        match self.mode {
            PenaltyMode::Smooth => PenaltyConfig::smooth(self.tau, self.eta),
            PenaltyMode::SmoothSparse => PenaltyConfig::sparse(self.tau, self.lambda, self.eta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best: CvBest,
    pub table: Vec<CellResult>,
    pub seed: u64,
    pub folds: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

impl CvResult {
    /// Number of (cell, K) entries in the error table.
    pub fn table_len(&self) -> usize {
        self.table.iter().map(|c| c.total.len()).sum()
    }
}

/// Random permutation of `0..n` cut into `k` contiguous blocks whose sizes
/// differ by at most one. Indices within a fold are sorted.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return invalid(format!("cannot split {n} samples into {k} folds"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = perm[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}

/// Cross-validation over the smooth grid.
pub fn cv_small_p(ds: &CurveDataset, basis: &BasisSpec, seed: u64) -> Result<CvResult> {
    cross_validate(ds, basis, &CvGrid::small_p(), seed)
}

/// Cross-validation over the smooth-sparse grid.
pub fn cv_large_p(ds: &CurveDataset, basis: &BasisSpec, seed: u64) -> Result<CvResult> {
    cross_validate(ds, basis, &CvGrid::large_p(), seed)
}

/// Five-fold cross-validation, with fewer folds when n is below 10.
pub fn cross_validate(
    ds: &CurveDataset,
    basis: &BasisSpec,
    grid: &CvGrid,
    seed: u64,
) -> Result<CvResult> {
    let n = ds.n();
    let mut warnings = Vec::new();
    let mut k = DEFAULT_FOLDS;
    if n < 2 * DEFAULT_FOLDS {
        if n < 4 {
            return invalid(format!(
                "cross-validation needs at least 4 samples, got {n}"
            ));
        }
        k = n / 2;
        warnings.push(format!(
            "only {n} samples: using {k} folds instead of {DEFAULT_FOLDS}"
        ));
    }
    let folds = make_folds(n, k, seed)?;
    let mut res = cv_with_folds(ds, basis, grid, &folds)?;
    res.seed = seed;
    res.warnings.extend(warnings);
    Ok(res)
}

fn fit_cell(
    dm: &DesignMatrices,
    factor: &SpectralFactor,
    mode: PenaltyMode,
    cell: &Cell,
    k_max: usize,
) -> Result<ComponentSet> {
    match mode {
        PenaltyMode::Smooth => fit_smooth_with(dm, factor, cell.tau, k_max),
        PenaltyMode::SmoothSparse => fit_sparse_with(dm, factor, cell.tau, cell.lambda, k_max),
    }
}

/// Cross-validation on caller-supplied folds, which must partition `0..n`.
pub fn cv_with_folds(
    ds: &CurveDataset,
    basis: &BasisSpec,
    grid: &CvGrid,
    folds: &[Vec<usize>],
) -> Result<CvResult> {
    grid.validate()?;
    let n = ds.n();
    let mut seen = vec![false; n];
    for &i in folds.iter().flatten() {
        if i >= n || seen[i] {
            return invalid("folds must partition the sample indices");
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) || folds.len() < 2 || folds.iter().any(|f| f.is_empty()) {
        return invalid("folds must partition the sample indices into at least two nonempty sets");
    }
    let m = ds.m();
    let cells = grid.cells();
    let per_eta = grid.pairs.len();

    // Step 1: K bound per cell from the full data.
    let full = build_design(ds, basis)?;
    let bounds: Vec<Result<Vec<usize>>> = grid
        .etas
        .par_iter()
        .enumerate()
        .map(|(e, &eta)| {
            let factor = SpectralFactor::new(&full, eta)?;
            cells[e * per_eta..(e + 1) * per_eta]
                .iter()
                .map(|cell| {
                    let comps = fit_cell(&full, &factor, grid.mode, cell, m)?;
                    k_upper(&comps.sigma2, m)
                })
                .collect()
        })
        .collect();
    let mut k_up = Vec::with_capacity(cells.len());
    for b in bounds {
        k_up.extend(b?);
    }

    // Step 2: per-fold validation errors for every K up to the bound.
    let designs: Vec<Result<(DesignMatrices, CurveDataset)>> = folds
        .par_iter()
        .map(|val| {
            let train: Vec<usize> = (0..n).filter(|i| val.binary_search(i).is_err()).collect();
            Ok((build_design(&ds.subset(&train)?, basis)?, ds.subset(val)?))
        })
        .collect();
    let designs: Vec<(DesignMatrices, CurveDataset)> =
        designs.into_iter().collect::<Result<_>>()?;

    let items: Vec<(usize, usize)> = (0..folds.len())
        .flat_map(|f| (0..grid.etas.len()).map(move |e| (f, e)))
        .collect();
    let errors: Vec<Result<Vec<Vec<f64>>>> = items
        .par_iter()
        .map(|&(f, e)| {
            let (dm, val) = &designs[f];
            let factor = SpectralFactor::new(dm, grid.etas[e])?;
            let zval = score_matrix(basis, val.curves(), &dm.xbar)?;
            (e * per_eta..(e + 1) * per_eta)
                .map(|c| {
                    let comps = fit_cell(dm, &factor, grid.mode, &cells[c], k_up[c])?;
                    Ok(validation_errors(
                        dm,
                        &comps,
                        &zval,
                        val.responses(),
                        k_up[c],
                    ))
                })
                .collect()
        })
        .collect();

    let mut table: Vec<CellResult> = cells
        .iter()
        .zip(&k_up)
        .map(|(cell, &ku)| CellResult {
            cell: *cell,
            k_upper: ku,
            total: vec![0.0; ku],
            per_fold: Vec::new(),
        })
        .collect();
    // deterministic reduction: folds in order
    let mut by_item = errors.into_iter();
    let mut slots: Vec<Vec<Vec<f64>>> = vec![Vec::new(); items.len()];
    for (slot, r) in slots.iter_mut().zip(&mut by_item) {
        *slot = r?;
    }
    for f in 0..folds.len() {
        for e in 0..grid.etas.len() {
            let item = &slots[f * grid.etas.len() + e];
            for (i, errs) in item.iter().enumerate() {
                let cell = &mut table[e * per_eta + i];
                for (tot, v) in cell.total.iter_mut().zip(errs) {
                    *tot += v;
                }
                cell.per_fold.push(errs.clone());
            }
        }
    }

    // Step 3: minimize with a tolerance, preferring parsimony.
    let yc_ss = full.yc.norm_squared();
    let min = table
        .iter()
        .flat_map(|c| c.total.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let tol = 1e-10 * min.max(1e-6 * yc_ss) + f64::MIN_POSITIVE;
    let mut best: Option<(usize, usize)> = None;
    for (c, res) in table.iter().enumerate() {
        for (k, &err) in res.total.iter().enumerate() {
            if err > min + tol {
                continue;
            }
            let better = match best {
                None => true,
                Some((bc, bk)) => {
                    let (a, b) = (&cells[c], &cells[bc]);
                    (k, -a.tau, -a.eta) < (bk, -b.tau, -b.eta)
                }
            };
            if better {
                best = Some((c, k));
            }
        }
    }
    let (c, k) =
        best.ok_or_else(|| crate::Error::Numerical("validation errors are not finite".into()))?;
    let cell = cells[c];
    Ok(CvResult {
        best: CvBest {
            mode: grid.mode,
            tau: cell.tau,
            lambda: cell.lambda,
            eta: cell.eta,
            k: k + 1,
            error: table[c].total[k],
        },
        table,
        seed: 0,
        folds: folds.to_vec(),
        warnings: Vec::new(),
    })
}

/// `‖Ŷ_K − Y_val‖_F²` for K = 1..=k_max. Components the training fit could
/// not produce contribute nothing.
fn validation_errors(
    dm: &DesignMatrices,
    comps: &ComponentSet,
    zval: &DMatrix<f64>,
    yval: &DMatrix<f64>,
    k_max: usize,
) -> Vec<f64> {
    let n = dm.n() as f64;
    let t = zval * &comps.coeffs;
    let w = comps.scores.tr_mul(&dm.yc) / n;
    let mut resid = yval.clone();
    for mut row in resid.row_iter_mut() {
        row -= dm.ybar.transpose();
    }
    let mut out = Vec::with_capacity(k_max);
    for k in 0..k_max {
        if k < comps.k() {
            resid -= t.column(k) * w.row(k);
        }
        out.push(resid.norm_squared());
    }
    out
}
