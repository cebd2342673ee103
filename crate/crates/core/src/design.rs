//! Curve datasets and the score matrices every estimator works from.
//!
//! Covariance kernels are never formed on the time grid. Instead the
//! centered curves are projected once onto the basis, giving the n×pD
//! matrix `Z`; the quadratic forms of the predictor covariance and of the
//! response cross-covariance are then `‖Za‖²/n` and `‖YcᵀZa‖²/n²`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::{trapezoid_weights, BasisSpec};
use crate::error::{invalid, Result};

/// `n` samples of `p` curves observed on a shared grid.
///
/// Values are stored sample-major: curve `j` of sample `l` occupies
/// `values[(l * p + j) * T .. (l * p + j + 1) * T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveArray {
    grid: Vec<f64>,
    n: usize,
    p: usize,
    values: Vec<f64>,
}

impl CurveArray {
    pub fn new(grid: Vec<f64>, n: usize, p: usize, values: Vec<f64>) -> Result<Self> {
        trapezoid_weights(&grid)?;
        if grid[0] < 0.0 || grid[grid.len() - 1] > 1.0 {
            return invalid("grid must lie within [0, 1]");
        }
        if p == 0 {
            return invalid("at least one predictor curve is required");
        }
        if values.len() != n * p * grid.len() {
            return invalid(format!(
                "expected {} curve values (n={n}, p={p}, T={}), got {}",
                n * p * grid.len(),
                grid.len(),
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let t = grid.len();
            return invalid(format!(
                "non-finite curve value at sample {}, curve {}, time index {}",
                i / (p * t),
                (i / t) % p,
                i % t
            ));
        }
        Ok(CurveArray { grid, n, p, values })
    }

    /// Builds an array by evaluating `f(sample, curve, time_index)`.
    pub fn from_fn(
        grid: Vec<f64>,
        n: usize,
        p: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let t = grid.len();
        let mut values = Vec::with_capacity(n * p * t);
        for l in 0..n {
            for j in 0..p {
                for i in 0..t {
                    values.push(f(l, j, i));
                }
            }
        }
        Self::new(grid, n, p, values)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn t_len(&self) -> usize {
        self.grid.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn curve(&self, sample: usize, predictor: usize) -> &[f64] {
        let t = self.grid.len();
        let start = (sample * self.p + predictor) * t;
        &self.values[start..start + t]
    }

    /// Samples in the given order; indices may repeat.
    pub fn select(&self, indices: &[usize]) -> CurveArray {
        let block = self.p * self.grid.len();
        let mut values = Vec::with_capacity(indices.len() * block);
        for &l in indices {
            values.extend_from_slice(&self.values[l * block..(l + 1) * block]);
        }
        CurveArray {
            grid: self.grid.clone(),
            n: indices.len(),
            p: self.p,
            values,
        }
    }

    /// Linear interpolation of every curve onto `target`. Fails when
    /// `target` reaches outside the range of the current grid.
    pub fn resample(&self, target: &[f64]) -> Result<CurveArray> {
        if target == self.grid.as_slice() {
            return Ok(self.clone());
        }
        trapezoid_weights(target)?;
        let (lo, hi) = (self.grid[0], self.grid[self.grid.len() - 1]);
        if target[0] < lo || target[target.len() - 1] > hi {
            return invalid(format!(
                "interpolating onto [{}, {}] would extrapolate beyond the observed range [{lo}, {hi}]",
                target[0],
                target[target.len() - 1]
            ));
        }
        let stencil: Vec<(usize, f64)> = target
            .iter()
            .map(|&t| {
                let k = self
                    .grid
                    .partition_point(|&g| g <= t)
                    .clamp(1, self.grid.len() - 1);
                let (a, b) = (self.grid[k - 1], self.grid[k]);
                (k - 1, (t - a) / (b - a))
            })
            .collect();
        let mut values = Vec::with_capacity(self.n * self.p * target.len());
        for l in 0..self.n {
            for j in 0..self.p {
                let c = self.curve(l, j);
                values.extend(stencil.iter().map(|&(k, w)| c[k] + w * (c[k + 1] - c[k])));
            }
        }
        CurveArray::new(target.to_vec(), self.n, self.p, values)
    }
}

/// Known regression function and support of a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    /// Noise-free responses `F`, one row per sample.
    pub regression: DMatrix<f64>,
    /// 0-based indices of predictors with nonzero coefficient functions.
    pub support: Vec<usize>,
    /// Signal scale applied to the coefficient functions.
    pub scale: f64,
    pub sigma: f64,
}

/// Predictor curves paired with an n×m response matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveDataset {
    curves: CurveArray,
    responses: DMatrix<f64>,
    truth: Option<Truth>,
}

impl CurveDataset {
    pub fn new(curves: CurveArray, responses: DMatrix<f64>) -> Result<Self> {
        if curves.n() < 2 {
            return invalid("a dataset needs at least two samples");
        }
        if responses.nrows() != curves.n() {
            return invalid(format!(
                "{} response rows for {} curve samples",
                responses.nrows(),
                curves.n()
            ));
        }
        if responses.ncols() == 0 {
            return invalid("responses need at least one column");
        }
        if let Some(i) = responses.iter().position(|v| !v.is_finite()) {
            let n = responses.nrows();
            return invalid(format!(
                "non-finite response at row {}, column {}",
                i % n,
                i / n
            ));
        }
        Ok(CurveDataset {
            curves,
            responses,
            truth: None,
        })
    }

    pub fn with_truth(mut self, truth: Truth) -> Result<Self> {
        if truth.regression.shape() != self.responses.shape() {
            return invalid("truth regression matrix must match the response shape");
        }
        if truth.support.iter().any(|&j| j >= self.p()) {
            return invalid("truth support index out of range");
        }
        self.truth = Some(truth);
        Ok(self)
    }

    pub fn curves(&self) -> &CurveArray {
        &self.curves
    }

    pub fn responses(&self) -> &DMatrix<f64> {
        &self.responses
    }

    pub fn truth(&self) -> Option<&Truth> {
        self.truth.as_ref()
    }

    pub fn grid(&self) -> &[f64] {
        self.curves.grid()
    }

    pub fn n(&self) -> usize {
        self.curves.n()
    }

    pub fn p(&self) -> usize {
        self.curves.p()
    }

    pub fn m(&self) -> usize {
        self.responses.ncols()
    }

    /// Samples in the given order (repeats allowed); truth rows follow.
    pub fn subset(&self, indices: &[usize]) -> Result<CurveDataset> {
        if let Some(&bad) = indices.iter().find(|&&l| l >= self.n()) {
            return invalid(format!("sample index {bad} out of range"));
        }
        let rows = |m: &DMatrix<f64>| m.select_rows(indices);
        let mut out = CurveDataset::new(self.curves.select(indices), rows(&self.responses))?;
        if let Some(t) = &self.truth {
            out.truth = Some(Truth {
                regression: rows(&t.regression),
                ..t.clone()
            });
        }
        Ok(out)
    }
}

/// Basis scores of centered curves and the centered response.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    /// n×pD, entry `(l, jD + d) = ∫ (X_lj − X̄_j) B_d`.
    pub z: DMatrix<f64>,
    /// n×m centered responses.
    pub yc: DMatrix<f64>,
    /// p×T mean curves.
    pub xbar: DMatrix<f64>,
    pub ybar: DVector<f64>,
    pub basis: BasisSpec,
    pub grid: Vec<f64>,
    pub p: usize,
}

impl DesignMatrices {
    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn m(&self) -> usize {
        self.yc.ncols()
    }

    pub fn d(&self) -> usize {
        self.basis.dim()
    }

    /// Per-block norm matrix `G + ηH`.
    pub fn g_eta(&self, eta: f64) -> DMatrix<f64> {
        self.basis.penalty_gram(eta)
    }

    /// `‖Za‖² / n`, the discretized `∫∫ αᵀ Σ̂ α`.
    pub fn sigma_form(&self, a: &DVector<f64>) -> f64 {
        (&self.z * a).norm_squared() / self.n() as f64
    }

    /// `‖Ycᵀ Z a‖² / n²`, the discretized `∫∫ αᵀ Γ̂ α`.
    pub fn gamma_form(&self, a: &DVector<f64>) -> f64 {
        let n = self.n() as f64;
        (self.yc.tr_mul(&(&self.z * a))).norm_squared() / (n * n)
    }

    /// Scores of new curves against the training mean, q×pD.
    pub fn score_new(&self, curves: &CurveArray) -> Result<DMatrix<f64>> {
        score_matrix(&self.basis, curves, &self.xbar)
    }
}

/// Projects centered curves onto the basis. The curves must share the
/// grid the mean curves `xbar` (p×T) were computed on.
pub fn score_matrix(
    basis: &BasisSpec,
    curves: &CurveArray,
    xbar: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (n, p, t) = (curves.n(), curves.p(), curves.t_len());
    if xbar.nrows() != p || xbar.ncols() != t {
        return invalid(format!(
            "curves have p={p}, T={t} but the centering curves are {}×{}",
            xbar.nrows(),
            xbar.ncols()
        ));
    }
    let op = basis.score_operator(curves.grid())?;
    let d = basis.dim();
    let blocks: Vec<DMatrix<f64>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let centered = DMatrix::from_fn(n, t, |l, i| curves.curve(l, j)[i] - xbar[(j, i)]);
            centered * &op
        })
        .collect();
    let mut z = DMatrix::zeros(n, p * d);
    for (j, b) in blocks.iter().enumerate() {
        z.view_mut((0, j * d), (n, d)).copy_from(b);
    }
    Ok(z)
}

/// Mean curve of each predictor, p×T.
pub fn mean_curves(curves: &CurveArray) -> DMatrix<f64> {
    let (n, p, t) = (curves.n(), curves.p(), curves.t_len());
    let mut xbar = DMatrix::zeros(p, t);
    for l in 0..n {
        for j in 0..p {
            for (i, v) in curves.curve(l, j).iter().enumerate() {
                xbar[(j, i)] += v;
            }
        }
    }
    xbar / n as f64
}

pub fn build_design(ds: &CurveDataset, basis: &BasisSpec) -> Result<DesignMatrices> {
    let xbar = mean_curves(ds.curves());
    let z = score_matrix(basis, ds.curves(), &xbar)?;
    let y = ds.responses();
    let ybar = y.row_mean().transpose();
    let mut yc = y.clone();
    for mut row in yc.row_iter_mut() {
        row -= ybar.transpose();
    }
    Ok(DesignMatrices {
        z,
        yc,
        xbar,
        ybar,
        basis: basis.clone(),
        grid: ds.grid().to_vec(),
        p: ds.p(),
    })
}

/// `√(aᵀ Gη a)`, the norm of one coefficient block.
pub fn group_norm(a_j: &[f64], g_eta: &DMatrix<f64>) -> Result<f64> {
    if a_j.len() != g_eta.nrows() || !g_eta.is_square() {
        return invalid("block length does not match the norm matrix");
    }
    let v = DVector::from_column_slice(a_j);
    Ok((v.transpose() * g_eta * &v)[(0, 0)].max(0.0).sqrt())
}

/// `τ[(1−λ) Σ_j ‖a_j‖²_η + λ (Σ_j ‖a_j‖_η)²]` for a full coefficient
/// vector split into blocks of the norm matrix's size.
pub fn penalty_value(a: &[f64], g_eta: &DMatrix<f64>, tau: f64, lambda: f64) -> Result<f64> {
    let d = g_eta.nrows();
    if d == 0 || !a.len().is_multiple_of(d) {
        return invalid("coefficient length is not a multiple of the block size");
    }
    let mut sq = 0.0;
    let mut lin = 0.0;
    for block in a.chunks(d) {
        let g = group_norm(block, g_eta)?;
        sq += g * g;
        lin += g;
    }
    Ok(tau * ((1.0 - lambda) * sq + lambda * lin * lin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{make_basis, uniform_grid};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(n: usize, p: usize, m: usize, t: usize, seed: u64) -> CurveDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = uniform_grid(t);
        let curves = CurveArray::from_fn(grid, n, p, |_, _, _| rng.random::<f64>() - 0.5).unwrap();
        let y = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>());
        CurveDataset::new(curves, y).unwrap()
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        let g = uniform_grid(4);
        assert!(CurveArray::new(g.clone(), 2, 1, vec![0.0; 7]).is_err());
        assert!(CurveArray::new(vec![0.0, 0.5, 0.5], 1, 1, vec![0.0; 3]).is_err());
        assert!(CurveArray::new(vec![0.0, 1.5], 1, 1, vec![0.0; 2]).is_err());
        let mut v = vec![0.0; 8];
        v[5] = f64::NAN;
        assert!(CurveArray::new(g.clone(), 2, 1, v).is_err());
        let c = CurveArray::new(g.clone(), 2, 1, vec![0.0; 8]).unwrap();
        assert!(CurveDataset::new(c.clone(), DMatrix::zeros(3, 1)).is_err());
        assert!(CurveDataset::new(c.clone(), DMatrix::from_element(2, 1, f64::INFINITY)).is_err());
        let one = CurveArray::new(g, 1, 1, vec![0.0; 4]).unwrap();
        assert!(CurveDataset::new(one, DMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn identical_samples_give_zero_scores() {
        let grid = uniform_grid(16);
        let c = CurveArray::from_fn(grid, 4, 2, |_, j, i| (j + i) as f64).unwrap();
        let ds = CurveDataset::new(c, DMatrix::from_element(4, 1, 1.0)).unwrap();
        let dm = build_design(&ds, &make_basis(6, 3).unwrap()).unwrap();
        assert!(dm.z.iter().all(|v| v.abs() < 1e-14));
        assert!(dm.yc.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn antisymmetric_pair_gives_opposite_rows() {
        let grid = uniform_grid(20);
        let c = CurveArray::from_fn(grid, 2, 1, |l, _, i| {
            let s = if l == 0 { 1.0 } else { -1.0 };
            s * (i as f64 * 0.3).sin()
        })
        .unwrap();
        let ds = CurveDataset::new(c, DMatrix::from_row_slice(2, 1, &[1.0, 2.0])).unwrap();
        let dm = build_design(&ds, &make_basis(7, 3).unwrap()).unwrap();
        for d in 0..7 {
            assert_abs_diff_eq!(dm.z[(0, d)], -dm.z[(1, d)], epsilon = 1e-15);
        }
    }

    #[test]
    fn columns_are_centered() {
        let ds = random_dataset(13, 3, 2, 25, 1);
        let dm = build_design(&ds, &make_basis(8, 3).unwrap()).unwrap();
        for c in dm.z.column_iter() {
            assert!(c.sum().abs() < 1e-9 * 13.0);
        }
        for c in dm.yc.column_iter() {
            assert!(c.sum().abs() < 1e-9 * 13.0);
        }
    }

    #[test]
    fn sigma_form_matches_kernel_double_quadrature() {
        // Oracle: build Σ̂(s,t) on the grid and integrate α(s)ᵀΣ̂(s,t)α(t)
        // with a trapezoid rule in each variable.
        let (n, p, d, t) = (5, 2, 6, 33);
        let ds = random_dataset(n, p, 2, t, 7);
        let basis = make_basis(d, 3).unwrap();
        let dm = build_design(&ds, &basis).unwrap();
        let grid = ds.grid().to_vec();
        let w = trapezoid_weights(&grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = DVector::from_fn(p * d, |_, _| rng.random::<f64>() - 0.5);
            let alpha: Vec<Vec<f64>> = (0..p)
                .map(|j| {
                    basis
                        .eval_function(&a.as_slice()[j * d..(j + 1) * d], &grid)
                        .unwrap()
                })
                .collect();
            let xbar = mean_curves(ds.curves());
            let mut direct = 0.0;
            for l in 0..n {
                // ∫ (X_l − X̄)ᵀ α
                let mut proj = 0.0;
                for j in 0..p {
                    let x = ds.curves().curve(l, j);
                    for i in 0..t {
                        proj += w[i] * (x[i] - xbar[(j, i)]) * alpha[j][i];
                    }
                }
                direct += proj * proj;
            }
            direct /= n as f64;
            let via_z = dm.sigma_form(&a);
            assert!((via_z - direct).abs() <= 1e-6 * direct.abs().max(1e-300));

            // Γ̂ = Σ̂_{XY} Σ̂_{YX} route: ‖(1/n) Σ_l Yc_l ∫(X_l − X̄)ᵀα‖²
            let mut cross = DVector::<f64>::zeros(2);
            for l in 0..n {
                let mut proj = 0.0;
                for j in 0..p {
                    let x = ds.curves().curve(l, j);
                    for i in 0..t {
                        proj += w[i] * (x[i] - xbar[(j, i)]) * alpha[j][i];
                    }
                }
                cross += dm.yc.row(l).transpose() * proj;
            }
            let direct_gamma = (cross / n as f64).norm_squared();
            let via = dm.gamma_form(&a);
            assert!((via - direct_gamma).abs() <= 1e-6 * direct_gamma);
        }
    }

    #[test]
    fn cross_product_rank_is_at_most_m() {
        let ds = random_dataset(30, 2, 2, 40, 11);
        let dm = build_design(&ds, &make_basis(10, 3).unwrap()).unwrap();
        let c = dm.z.tr_mul(&dm.yc);
        let a = &c * c.transpose();
        let sv = a.singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|x, y| y.total_cmp(x));
        assert!(s[2] <= 1e-10 * s[0]);
        assert!(s[1] > 1e-6 * s[0]);
    }

    #[test]
    fn design_is_equivariant_to_sample_order() {
        let ds = random_dataset(9, 2, 3, 17, 5);
        let basis = make_basis(7, 3).unwrap();
        let perm = [4, 0, 8, 2, 6, 1, 3, 7, 5];
        let a = build_design(&ds, &basis).unwrap();
        let b = build_design(&ds.subset(&perm).unwrap(), &basis).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            assert!((b.z.row(r) - a.z.row(src)).amax() < 1e-13);
            assert!((b.yc.row(r) - a.yc.row(src)).amax() < 1e-13);
        }
    }

    #[test]
    fn group_norm_properties() {
        let basis = make_basis(12, 3).unwrap();
        let g = basis.penalty_gram(0.0);
        assert_eq!(group_norm(&[0.0; 12], &g).unwrap(), 0.0);
        let ones = basis.interpolate(|_| 1.0).unwrap();
        assert_abs_diff_eq!(
            group_norm(ones.as_slice(), &g).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let a: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let a2: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        assert_abs_diff_eq!(
            group_norm(&a2, &g).unwrap(),
            2.0 * group_norm(&a, &g).unwrap(),
            epsilon = 1e-12
        );
        assert!(group_norm(&a[..5], &g).is_err());
    }

    #[test]
    fn penalty_combines_ridge_and_squared_group_sum() {
        let g = DMatrix::<f64>::identity(2, 2);
        let a = [3.0, 4.0, 0.0, 1.0];
        // norms 5 and 1
        let v = penalty_value(&a, &g, 2.0, 0.25).unwrap();
        assert_abs_diff_eq!(v, 2.0 * (0.75 * 26.0 + 0.25 * 36.0), epsilon = 1e-12);
    }

    #[test]
    fn resample_interpolates_linearly_and_refuses_extrapolation() {
        let c =
            CurveArray::from_fn(vec![0.0, 0.5, 1.0], 1, 1, |_, _, i| [0.0, 1.0, 4.0][i]).unwrap();
        let r = c.resample(&[0.0, 0.25, 0.75, 1.0]).unwrap();
        assert_eq!(r.values(), &[0.0, 0.5, 2.5, 4.0]);
        let short = CurveArray::from_fn(vec![0.1, 0.9], 1, 1, |_, _, _| 0.0).unwrap();
        assert!(short.resample(&[0.0, 1.0]).is_err());
    }
}
