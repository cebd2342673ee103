//! The two-step estimator: components, then a least-squares refit of the
//! responses on the component scores.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::design::{build_design, score_matrix, CurveArray, CurveDataset, DesignMatrices};
use crate::eigensolver::{
    fit_components_smooth, fit_components_sparse, ComponentDiagnostics, ComponentSet,
    PenaltyConfig, PenaltyMode,
};
use crate::error::{invalid, Error, Result};
use crate::selection::{cross_validate, CvGrid};
use crate::simgen::rng_stream;

/// Threshold on `‖α̂_kj‖_η` above which predictor `j` counts as selected.
pub const SELECTION_TOL: f64 = 1e-10;

/// Fitted model: `Ŷ = μ̂ + Σ_k ŵ_k ∫ (X − X̄)ᵀ α̂_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct FittedModel {
    pub basis: BasisSpec,
    pub config: PenaltyConfig,
    /// Intercept `μ̂ = Ȳ`.
    pub mu: DVector<f64>,
    /// K×m loadings; row k is `ŵ_k`.
    pub w: DMatrix<f64>,
    pub components: ComponentSet,
    /// p×T centering curves on `grid`.
    pub xbar: DMatrix<f64>,
    pub grid: Vec<f64>,
}

/// How many components a refit keeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KRule {
    Fixed(usize),
    /// Re-run the full tuning procedure on every resample.
    CrossValidated {
        grid: PenaltyMode,
        seed: u64,
    },
}

fn solve(dm: &DesignMatrices, config: &PenaltyConfig, k: usize) -> Result<ComponentSet> {
    config.validate()?;
    match config.mode {
        PenaltyMode::Smooth => fit_components_smooth(dm, config.tau, config.eta, k),
        PenaltyMode::SmoothSparse => {
            fit_components_sparse(dm, config.tau, config.lambda, config.eta, k)
        }
    }
}

/// Fits `k` components under `config` and regresses the responses on
/// their scores.
pub fn fit(
    ds: &CurveDataset,
    basis: &BasisSpec,
    config: &PenaltyConfig,
    k: usize,
) -> Result<FittedModel> {
    let dm = build_design(ds, basis)?;
    let available = ds.m().min(ds.n() - 1).min(ds.p() * basis.dim());
    if k > available {
        return invalid(format!(
            "K = {k} exceeds the {available} available components"
        ));
    }
    let components = if k == 0 {
        config.validate()?;
        ComponentSet {
            coeffs: DMatrix::zeros(dm.z.ncols(), 0),
            sigma2: Vec::new(),
            scores: DMatrix::zeros(dm.n(), 0),
            config: *config,
            diagnostics: Vec::new(),
        }
    } else {
        solve(&dm, config, k)?
    };
    Ok(from_components(&dm, components))
}

/// Least-squares refit on given components. Scores are orthogonal, so
/// `ŵ_k = (1/n) Σ_ℓ T̂_ℓk (Y_ℓ − Ȳ)`.
pub fn from_components(dm: &DesignMatrices, components: ComponentSet) -> FittedModel {
    let n = dm.n() as f64;
    let w = components.scores.tr_mul(&dm.yc) / n;
    FittedModel {
        basis: dm.basis.clone(),
        config: components.config,
        mu: dm.ybar.clone(),
        w,
        components,
        xbar: dm.xbar.clone(),
        grid: dm.grid.clone(),
    }
}

impl FittedModel {
    pub fn k(&self) -> usize {
        self.w.nrows()
    }

    pub fn m(&self) -> usize {
        self.mu.len()
    }

    pub fn p(&self) -> usize {
        self.xbar.nrows()
    }

    /// In-sample fitted values `μ̂ + T̂ Ŵ`.
    pub fn fitted_values(&self) -> DMatrix<f64> {
        self.with_intercept(&self.components.scores * &self.w)
    }

    fn with_intercept(&self, mut centered: DMatrix<f64>) -> DMatrix<f64> {
        for mut row in centered.row_iter_mut() {
            row += self.mu.transpose();
        }
        centered
    }

    /// Scores of new curves; curves on another grid are linearly
    /// interpolated onto the training grid first.
    pub fn score(&self, x: &CurveArray) -> Result<DMatrix<f64>> {
        if x.p() != self.p() {
            return invalid(format!(
                "model has p = {} predictors, input has {}",
                self.p(),
                x.p()
            ));
        }
        let x = x.resample(&self.grid)?;
        let z = score_matrix(&self.basis, &x, &self.xbar)?;
        Ok(z * &self.components.coeffs)
    }

    pub fn predict(&self, x: &CurveArray) -> Result<DMatrix<f64>> {
        let t = self.score(x)?;
        Ok(self.with_intercept(t * &self.w))
    }

    /// `B̂_jr(t) = Σ_k α̂_kj(t) Ŵ_kr` on `grid`.
    pub fn coefficient_surface(&self, grid: &[f64]) -> Result<CoefficientSurface> {
        let (p, m, d) = (self.p(), self.m(), self.basis.dim());
        let basis_vals = self.basis.eval_basis(grid)?;
        let mut values = vec![0.0; p * m * grid.len()];
        for j in 0..p {
            // D×m coefficient block of predictor j
            let block = self.components.coeffs.rows(j * d, d) * &self.w;
            let vals = &basis_vals * block;
            for r in 0..m {
                for i in 0..grid.len() {
                    values[(j * m + r) * grid.len() + i] = vals[(i, r)];
                }
            }
        }
        Ok(CoefficientSurface {
            grid: grid.to_vec(),
            p,
            m,
            values,
        })
    }

    /// Predictors with a nonzero coefficient function. Smooth fits do not
    /// select, so every predictor is returned unless the fit is empty.
    pub fn selected_predictors(&self) -> Vec<usize> {
        let g = self.basis.penalty_gram(self.config.eta);
        let active: Vec<usize> = (0..self.p())
            .filter(|&j| {
                (0..self.k()).any(|k| {
                    self.w.row(k).amax() > 0.0
                        && self.components.block_norm(k, j, &g) > SELECTION_TOL
                })
            })
            .collect();
        match self.config.mode {
            PenaltyMode::Smooth if !active.is_empty() => (0..self.p()).collect(),
            _ => active,
        }
    }
}

/// Coefficient functions on a grid, indexed `(predictor, response, time)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSurface {
    pub grid: Vec<f64>,
    pub p: usize,
    pub m: usize,
    values: Vec<f64>,
}

impl CoefficientSurface {
    pub fn get(&self, j: usize, r: usize, i: usize) -> f64 {
        self.values[(j * self.m + r) * self.grid.len() + i]
    }

    /// The curve `B̂_jr(·)` on the grid.
    pub fn curve(&self, j: usize, r: usize) -> &[f64] {
        let t = self.grid.len();
        let start = (j * self.m + r) * t;
        &self.values[start..start + t]
    }
}

/// Percentile bootstrap limits, q×m each.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapIntervals {
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    /// Degenerate resamples that were drawn again.
    pub redraws: usize,
}

/// Maximum redraws of one degenerate resample.
const MAX_REDRAWS: usize = 10;

/// Percentile bootstrap prediction intervals at `xnew`.
///
/// Each of the `b` resamples draws n indices with replacement from its
/// own random stream, refits under `rule`, and predicts. Limits are the
/// `(1 ∓ level)/2` empirical quantiles (linear interpolation between
/// order statistics) of the predictions.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_intervals(
    ds: &CurveDataset,
    basis: &BasisSpec,
    config: &PenaltyConfig,
    rule: &KRule,
    xnew: &CurveArray,
    b: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapIntervals> {
    if b < 2 {
        return invalid("at least two bootstrap resamples are required");
    }
    if !(0.0..1.0).contains(&level) {
        return invalid("level must lie in [0, 1)");
    }
    let n = ds.n();
    let draws: Vec<Result<(DMatrix<f64>, usize)>> = (0..b)
        .into_par_iter()
        .map(|i| {
            use rand::Rng;
            let mut rng = rng_stream(seed, i as u64);
            let mut redraws = 0;
            let idx = loop {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                if idx.iter().any(|&v| v != idx[0]) {
                    break idx;
                }
                redraws += 1;
                if redraws > MAX_REDRAWS {
                    return Err(Error::Numerical(format!(
                        "resample {i} stayed degenerate after {MAX_REDRAWS} redraws"
                    )));
                }
            };
            let sample = ds.subset(&idx)?;
            let model = match *rule {
                KRule::Fixed(k) => fit(&sample, basis, config, k)?,
                KRule::CrossValidated {
                    grid,
                    seed: cv_seed,
                } => {
                    let grid = match grid {
                        PenaltyMode::Smooth => CvGrid::small_p(),
                        PenaltyMode::SmoothSparse => CvGrid::large_p(),
                    };
                    let cv = cross_validate(&sample, basis, &grid, cv_seed.wrapping_add(i as u64))?;
                    fit(&sample, basis, &cv.best.config(), cv.best.k)?
                }
            };
            Ok((model.predict(xnew)?, redraws))
        })
        .collect();
    let mut preds = Vec::with_capacity(b);
    let mut redraws = 0;
    for d in draws {
        let (p, r) = d?;
        preds.push(p);
        redraws += r;
    }
    let (q, m) = preds[0].shape();
    let lo_q = (1.0 - level) / 2.0;
    let hi_q = (1.0 + level) / 2.0;
    let mut lower = DMatrix::zeros(q, m);
    let mut upper = DMatrix::zeros(q, m);
    let mut buf = vec![0.0; b];
    for i in 0..q {
        for r in 0..m {
            for (slot, p) in buf.iter_mut().zip(&preds) {
                *slot = p[(i, r)];
            }
            buf.sort_by(f64::total_cmp);
            lower[(i, r)] = quantile_sorted(&buf, lo_q);
            upper[(i, r)] = quantile_sorted(&buf, hi_q);
        }
    }
    Ok(BootstrapIntervals {
        lower,
        upper,
        redraws,
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Row-major matrix with explicit dimensions, as stored in model files.
#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixRepr {
    fn from(m: &DMatrix<f64>) -> Self {
        let data = m.transpose().as_slice().to_vec();
        MatrixRepr {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl TryFrom<MatrixRepr> for DMatrix<f64> {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        if r.data.len() != r.rows * r.cols {
            return invalid(format!(
                "matrix declares {}×{} but holds {} values",
                r.rows,
                r.cols,
                r.data.len()
            ));
        }
        Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
    }
}

pub const MODEL_FORMAT: &str = "msof-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    format: String,
    version: u32,
    basis: BasisSpec,
    config: PenaltyConfig,
    p: usize,
    m: usize,
    k: usize,
    n: usize,
    grid: Vec<f64>,
    mu: Vec<f64>,
    w: MatrixRepr,
    coeffs: MatrixRepr,
    scores: MatrixRepr,
    sigma2: Vec<f64>,
    xbar: MatrixRepr,
    diagnostics: Vec<ComponentDiagnostics>,
}

impl From<FittedModel> for ModelRepr {
    fn from(f: FittedModel) -> Self {
        ModelRepr {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            p: f.p(),
            m: f.m(),
            k: f.k(),
            n: f.components.scores.nrows(),
            grid: f.grid.clone(),
            mu: f.mu.as_slice().to_vec(),
            w: (&f.w).into(),
            coeffs: (&f.components.coeffs).into(),
            scores: (&f.components.scores).into(),
            sigma2: f.components.sigma2.clone(),
            xbar: (&f.xbar).into(),
            diagnostics: f.components.diagnostics.clone(),
            config: f.config,
            basis: f.basis,
        }
    }
}

impl TryFrom<ModelRepr> for FittedModel {
    type Error = Error;

    fn try_from(r: ModelRepr) -> Result<Self> {
        if r.format != MODEL_FORMAT || r.version != MODEL_VERSION {
            return invalid(format!(
                "unsupported model file {} v{}",
                r.format, r.version
            ));
        }
        r.config.validate()?;
        let w: DMatrix<f64> = r.w.try_into()?;
        let coeffs: DMatrix<f64> = r.coeffs.try_into()?;
        let scores: DMatrix<f64> = r.scores.try_into()?;
        let xbar: DMatrix<f64> = r.xbar.try_into()?;
        let pd = r.p * r.basis.dim();
        let ok = w.shape() == (r.k, r.m)
            && coeffs.shape() == (pd, r.k)
            && scores.shape() == (r.n, r.k)
            && xbar.shape() == (r.p, r.grid.len())
            && r.mu.len() == r.m
            && r.sigma2.len() == r.k
            && r.diagnostics.len() == r.k;
        if !ok {
            return invalid("model arrays have inconsistent dimensions");
        }
        Ok(FittedModel {
            basis: r.basis,
            config: r.config,
            mu: DVector::from_vec(r.mu),
            w,
            components: ComponentSet {
                coeffs,
                sigma2: r.sigma2,
                scores,
                config: r.config,
                diagnostics: r.diagnostics,
            },
            xbar,
            grid: r.grid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{make_basis, trapezoid_weights};
    use crate::simgen::{gen_sim2, gen_sim3, SimScenario};

    fn basis() -> BasisSpec {
        make_basis(30, 3).unwrap()
    }

    #[test]
    fn loadings_match_a_general_least_squares_solve() {
        let ds = gen_sim2(60, 5, 0.1, 1).unwrap();
        let model = fit(&ds, &basis(), &PenaltyConfig::smooth(1e-3, 1e-5), 4).unwrap();
        let t = &model.components.scores;
        // normal equations on [1 T]
        let design = DMatrix::from_fn(60, 5, |i, j| if j == 0 { 1.0 } else { t[(i, j - 1)] });
        let coef = (design.tr_mul(&design))
            .lu()
            .solve(&design.tr_mul(ds.responses()))
            .unwrap();
        assert!((coef.rows(1, 4) - &model.w).amax() < 1e-10);
        assert!((coef.row(0).transpose() - &model.mu).amax() < 1e-10);
        // uncentered responses give the same loadings
        let raw = t.tr_mul(ds.responses()) / 60.0;
        assert!((raw - &model.w).amax() < 1e-12);
    }

    #[test]
    fn noiseless_fit_reproduces_responses() {
        let ds = gen_sim2(100, 5, 0.0, 3).unwrap();
        let model = fit(&ds, &basis(), &PenaltyConfig::smooth(1e-9, 1e-7), 3).unwrap();
        let resid = (model.fitted_values() - ds.responses()).norm() / ds.responses().norm();
        assert!(resid <= 1e-3, "{resid}");
    }

    #[test]
    fn constant_responses_give_zero_loadings() {
        let ds = gen_sim2(30, 3, 0.1, 3).unwrap();
        let flat =
            CurveDataset::new(ds.curves().clone(), DMatrix::from_element(30, 3, 2.5)).unwrap();
        let model = fit(&flat, &basis(), &PenaltyConfig::smooth(1e-3, 1e-3), 3).unwrap();
        assert!(model.w.iter().all(|v| *v == 0.0));
        let pred = model.predict(ds.curves()).unwrap();
        assert!(pred.iter().all(|v| *v == 2.5));
    }

    #[test]
    fn prediction_identities() {
        let ds = gen_sim2(50, 4, 0.1, 8).unwrap();
        let model = fit(&ds, &basis(), &PenaltyConfig::smooth(1e-3, 1e-3), 3).unwrap();
        let train = model.predict(ds.curves()).unwrap();
        assert!((&train - model.fitted_values()).amax() < 1e-12);

        let t = ds.grid().len();
        let mean =
            CurveArray::from_fn(ds.grid().to_vec(), 1, 1, |_, _, i| model.xbar[(0, i)]).unwrap();
        let at_mean = model.predict(&mean).unwrap();
        assert!((at_mean.row(0).transpose() - &model.mu).amax() < 1e-12);

        let doubled = CurveArray::from_fn(ds.grid().to_vec(), 50, 1, |l, _, i| {
            model.xbar[(0, i)] + 2.0 * (ds.curves().curve(l, 0)[i] - model.xbar[(0, i)])
        })
        .unwrap();
        let pd = model.predict(&doubled).unwrap();
        for l in 0..50 {
            let lhs = pd.row(l).transpose() - &model.mu;
            let rhs = (train.row(l).transpose() - &model.mu) * 2.0;
            assert!((lhs - rhs).amax() < 1e-10);
        }
        let _ = t;
    }

    #[test]
    fn wrong_predictor_count_is_rejected() {
        let ds = gen_sim2(20, 2, 0.1, 8).unwrap();
        let model = fit(&ds, &basis(), &PenaltyConfig::smooth(1e-3, 1e-3), 1).unwrap();
        let two = CurveArray::from_fn(ds.grid().to_vec(), 1, 2, |_, _, _| 0.0).unwrap();
        assert!(model.predict(&two).is_err());
        assert!(fit(&ds, &basis(), &PenaltyConfig::smooth(1e-3, 1e-3), 3).is_err());
    }

    #[test]
    fn residual_sum_of_squares_decreases_with_k() {
        let ds = gen_sim2(60, 10, 0.1, 4).unwrap();
        let model = fit(&ds, &basis(), &PenaltyConfig::smooth(1e-3, 1e-3), 10).unwrap();
        let mut last = f64::INFINITY;
        for k in 0..=10 {
            let t = model.components.scores.columns(0, k);
            let w = model.w.rows(0, k);
            let mut fitted = t * w;
            for mut row in fitted.row_iter_mut() {
                row += model.mu.transpose();
            }
            let rss = (fitted - ds.responses()).norm_squared();
            assert!(rss <= last * (1.0 + 1e-12));
            last = rss;
        }
    }

    #[test]
    fn response_shift_moves_only_the_intercept() {
        let ds = gen_sim2(40, 3, 0.1, 5).unwrap();
        let shifted =
            CurveDataset::new(ds.curves().clone(), ds.responses().add_scalar(7.0)).unwrap();
        let cfg = PenaltyConfig::smooth(1e-3, 1e-3);
        let a = fit(&ds, &basis(), &cfg, 3).unwrap();
        let b = fit(&shifted, &basis(), &cfg, 3).unwrap();
        assert!((b.mu.add_scalar(-7.0) - &a.mu).amax() < 1e-10);
        assert!((&b.w - &a.w).amax() < 1e-10);
        assert!((&b.components.coeffs - &a.components.coeffs).amax() < 1e-10);
    }

    #[test]
    fn coefficient_surface_agrees_with_prediction() {
        let ds = gen_sim3(60, 3, 0.1, 0.2, 2).unwrap();
        let model = fit(&ds, &basis(), &PenaltyConfig::smooth(1e-3, 1e-3), 3).unwrap();
        let grid = ds.grid().to_vec();
        let surf = model.coefficient_surface(&grid).unwrap();
        let w = trapezoid_weights(&grid).unwrap();
        let pred = model.predict(ds.curves()).unwrap();
        for l in [0usize, 7, 33] {
            for r in 0..3 {
                let mut v = model.mu[r];
                for j in 0..ds.p() {
                    let x = ds.curves().curve(l, j);
                    let b = surf.curve(j, r);
                    for i in 0..grid.len() {
                        v += w[i] * (x[i] - model.xbar[(j, i)]) * b[i];
                    }
                }
                assert!((v - pred[(l, r)]).abs() < 1e-10);
            }
        }
        let empty = fit(&ds, &basis(), &PenaltyConfig::smooth(1e-3, 1e-3), 0).unwrap();
        let s0 = empty.coefficient_surface(&grid).unwrap();
        assert!((0..ds.p()).all(|j| s0.curve(j, 0).iter().all(|v| *v == 0.0)));
        assert!(empty.selected_predictors().is_empty());
    }

    #[test]
    fn smooth_fits_select_everything_and_sparse_fits_zero_blocks() {
        let ds = gen_sim3(80, 3, 0.01, 0.2, 6).unwrap();
        let smooth = fit(&ds, &basis(), &PenaltyConfig::smooth(1e-3, 1e-3), 2).unwrap();
        assert_eq!(smooth.selected_predictors(), (0..50).collect::<Vec<_>>());
        let sparse = fit(&ds, &basis(), &PenaltyConfig::sparse(10.0, 0.3, 1e-3), 2).unwrap();
        let sel = sparse.selected_predictors();
        assert!(sel.len() < 50);
        let surf = sparse.coefficient_surface(ds.grid()).unwrap();
        for j in (0..50).filter(|j| !sel.contains(j)) {
            for r in 0..3 {
                assert!(surf.curve(j, r).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn serialization_round_trip_is_exact() {
        let ds = gen_sim2(40, 3, 0.1, 5).unwrap();
        let model = fit(&ds, &basis(), &PenaltyConfig::smooth(1e-3, 1e-5), 3).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: FittedModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);
        let fresh = SimScenario::new(2, 10, 3, 0.1, 77)
            .unwrap()
            .generate()
            .unwrap();
        let a = model.predict(fresh.curves()).unwrap();
        let b = back.predict(fresh.curves()).unwrap();
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupt_model_files_are_rejected() {
        let ds = gen_sim2(20, 2, 0.1, 5).unwrap();
        let model = fit(&ds, &basis(), &PenaltyConfig::smooth(1e-3, 1e-5), 1).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let bad = json.replace("\"version\":1", "\"version\":9");
        assert!(serde_json::from_str::<FittedModel>(&bad).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["w"]["rows"] = 5.into();
        assert!(serde_json::from_value::<FittedModel>(v).is_err());
    }

    #[test]
    fn interpolates_curves_given_on_another_grid() {
        let ds = gen_sim2(30, 2, 0.1, 5).unwrap();
        let model = fit(&ds, &basis(), &PenaltyConfig::smooth(1e-3, 1e-3), 2).unwrap();
        // Same curves on a grid twice as fine: linear interpolation back
        // onto the training grid recovers them exactly.
        let fine: Vec<f64> = (0..127).map(|i| i as f64 / 126.0).collect();
        let curves = ds.curves().resample(&fine).unwrap();
        let a = model.predict(&curves).unwrap();
        let b = model.predict(ds.curves()).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn quantiles_interpolate_order_statistics() {
        let v = [1.0, 2.0, 3.0, 10.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 10.0);
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
    }

    #[test]
    fn bootstrap_without_variation_has_zero_width() {
        let ds = gen_sim2(20, 2, 0.0, 5).unwrap();
        let same: Vec<usize> = vec![3; 20];
        let dup = ds.subset(&same).unwrap();
        let xnew = gen_sim2(4, 2, 0.0, 6).unwrap();
        let cfg = PenaltyConfig::smooth(1e-3, 1e-3);
        let iv = bootstrap_intervals(
            &dup,
            &basis(),
            &cfg,
            &KRule::Fixed(1),
            xnew.curves(),
            50,
            0.95,
            1,
        )
        .unwrap();
        assert!((&iv.upper - &iv.lower).amax() <= 1e-6);
    }

    #[test]
    fn bootstrap_level_zero_gives_the_median() {
        let ds = gen_sim2(30, 2, 0.1, 5).unwrap();
        let xnew = gen_sim2(3, 2, 0.0, 6).unwrap();
        let cfg = PenaltyConfig::smooth(1e-3, 1e-3);
        let iv = bootstrap_intervals(
            &ds,
            &basis(),
            &cfg,
            &KRule::Fixed(2),
            xnew.curves(),
            41,
            0.0,
            2,
        )
        .unwrap();
        assert_eq!(iv.lower, iv.upper);
        let again = bootstrap_intervals(
            &ds,
            &basis(),
            &cfg,
            &KRule::Fixed(2),
            xnew.curves(),
            41,
            0.0,
            2,
        )
        .unwrap();
        assert_eq!(iv, again);
        assert!(bootstrap_intervals(
            &ds,
            &basis(),
            &cfg,
            &KRule::Fixed(2),
            xnew.curves(),
            1,
            0.9,
            2
        )
        .is_err());
    }

    #[test]
    fn degenerate_resamples_are_redrawn() {
        // With n = 2 half of all resamples repeat a single row.
        let ds = gen_sim2(2, 1, 0.1, 5).unwrap();
        let xnew = gen_sim2(2, 1, 0.0, 6).unwrap();
        let cfg = PenaltyConfig::smooth(1e-3, 1e-3);
        let iv = bootstrap_intervals(
            &ds,
            &basis(),
            &cfg,
            &KRule::Fixed(1),
            xnew.curves(),
            40,
            0.9,
            3,
        )
        .unwrap();
        assert!(iv.redraws > 0);
    }
}
