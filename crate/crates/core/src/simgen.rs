//! Synthetic scenarios and population-level demonstrations.
//!
//! Every scenario draws its random pieces from independent ChaCha
//! streams of one seed: the coefficient matrix, the Monte Carlo for the
//! signal scale, and per sample set the curves and the noise. Changing
//! the noise level therefore rescales the noise and nothing else.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{trapezoid_weights, uniform_grid};
use crate::design::{CurveArray, CurveDataset, Truth};
use crate::error::{invalid, Error, Result};

const STREAM_COEFFS: u64 = 0;
const STREAM_SNR: u64 = 1;
const SNR_DRAWS: usize = 10_000;
/// Intercept of every response coordinate.
pub const MU: f64 = 1.0;

pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator settings for the four synthetic designs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    /// 1 and 2 have a single predictor, 3 has 50 and 4 has 1000.
    pub id: u8,
    pub n: usize,
    pub m: usize,
    pub sigma: f64,
    /// Grid size; curves are observed at `i/(t−1)`.
    pub t: usize,
    /// Cross-predictor correlation of scenario 3.
    pub rho: f64,
    /// Moving-sum window of scenario 4.
    pub lag: usize,
    pub seed: u64,
}

impl SimScenario {
    pub fn new(id: u8, n: usize, m: usize, sigma: f64, seed: u64) -> Result<Self> {
        let s = SimScenario {
            id,
            n,
            m,
            sigma,
            t: 64,
            rho: 0.2,
            lag: 2,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_rho(mut self, rho: f64) -> Result<Self> {
        self.rho = rho;
        self.validate()?;
        Ok(self)
    }

    pub fn with_grid_size(mut self, t: usize) -> Result<Self> {
        self.t = t;
        self.validate()?;
        Ok(self)
    }

    pub fn with_lag(mut self, lag: usize) -> Result<Self> {
        self.lag = lag;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.id) {
            return invalid(format!("unknown scenario {}", self.id));
        }
        if self.m == 0 || self.t < 2 {
            return invalid("need m >= 1 and at least two grid points");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return invalid("sigma must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return invalid("rho must lie in [0, 1]");
        }
        if self.lag == 0 {
            return invalid("lag must be positive");
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        match self.id {
            1 | 2 => 1,
            3 => 50,
            _ => 1000,
        }
    }

    /// Draws the coefficient functions and calibrates the signal scale.
    pub fn model(&self) -> Result<SimModel> {
        SimModel::new(self)
    }

    /// Training sample of size `n`.
    pub fn generate(&self) -> Result<CurveDataset> {
        self.model()?.sample(self.n, self.sigma, 0)
    }
}

pub fn gen_sim1(n: usize, m: usize, sigma: f64, seed: u64) -> Result<CurveDataset> {
    SimScenario::new(1, n, m, sigma, seed)?.generate()
}

pub fn gen_sim2(n: usize, m: usize, sigma: f64, seed: u64) -> Result<CurveDataset> {
    SimScenario::new(2, n, m, sigma, seed)?.generate()
}

pub fn gen_sim3(n: usize, m: usize, sigma: f64, rho: f64, seed: u64) -> Result<CurveDataset> {
    SimScenario::new(3, n, m, sigma, seed)?
        .with_rho(rho)?
        .generate()
}

pub fn gen_sim4(n: usize, m: usize, sigma: f64, lag: usize, seed: u64) -> Result<CurveDataset> {
    SimScenario::new(4, n, m, sigma, seed)?
        .with_lag(lag)?
        .generate()
}

/// A scenario with its coefficient functions drawn and scaled.
#[derive(Debug, Clone)]
pub struct SimModel {
    pub scenario: SimScenario,
    pub grid: Vec<f64>,
    /// 0-based predictors with nonzero coefficient functions.
    pub support: Vec<usize>,
    /// For each support predictor, the T×m values `b_j(t_i)`.
    pub coefficients: Vec<DMatrix<f64>>,
    /// Signal scale `c`.
    pub scale: f64,
    gp: Option<DMatrix<f64>>,
    /// T×40 table of `sin(2kπt)`, `cos(2kπt)` for the Fourier scenarios.
    fourier: Option<DMatrix<f64>>,
}

impl SimModel {
    fn new(sc: &SimScenario) -> Result<Self> {
        sc.validate()?;
        let grid = uniform_grid(sc.t);
        let m = sc.m;
        let mut rng = rng_stream(sc.seed, STREAM_COEFFS);
        let uniform = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>())
        };
        let eval = |f: &dyn Fn(f64) -> f64| -> Vec<f64> { grid.iter().map(|&t| f(t)).collect() };

        let (support, coefficients) = match sc.id {
            1 => {
                let b = DMatrix::from_fn(grid.len(), m, |i, k| {
                    let arg = 3.0 * std::f64::consts::PI * grid[i] + (k + 1) as f64;
                    arg.sin() + arg.cos()
                });
                (vec![0], vec![b])
            }
            2 => {
                use std::f64::consts::PI;
                let mm = uniform(m, 3, &mut rng);
                let beta = [
                    eval(&|t| (2.0 * PI * t).cos()),
                    eval(&|t| 2.0 * t * t),
                    eval(&|t| 1.0 / (1.0 + t)),
                ];
                let b = DMatrix::from_fn(grid.len(), m, |i, r| {
                    (0..3).map(|k| mm[(r, k)] * beta[k][i]).sum()
                });
                (vec![0], vec![b])
            }
            3 => {
                use std::f64::consts::PI;
                let mm = uniform(3, m, &mut rng);
                let fam: [&dyn Fn(f64, f64) -> f64; 5] = [
                    &|t, k| t.powf(k),
                    &|t, k| (k * PI * t).cos(),
                    &|t, k| 1.0 / (t + k),
                    &|t, k| (t + k).ln(),
                    &|t, k| (-k * t * t).exp(),
                ];
                let coefs = fam.iter().map(|f| combine(&grid, &mm, f)).collect();
                ((0..5).collect(), coefs)
            }
            _ => {
                use std::f64::consts::PI;
                let mm = uniform(3, m, &mut rng);
                let fam: [&dyn Fn(f64, f64) -> f64; 5] = [
                    &|t, k| 2.0 * (t + 1.0) * (-k * t).exp(),
                    &|t, k| (k * PI * t / 2.0).sin() / (1.0 + t).sqrt(),
                    &|t, k| 3.0 * (-t).sinh() / k + t * t,
                    &|t, k| 0.5 * (1.0 + t).powf(k) * (k * PI * t).cos(),
                    &|t, k| t.tan() / (1.0 + k * t * t),
                ];
                let coefs = fam.iter().map(|f| combine(&grid, &mm, f)).collect();
                (vec![0, 10, 20, 30, 40], coefs)
            }
        };
        let gp = matches!(sc.id, 1 | 4)
            .then(|| gp_factor(&grid))
            .transpose()?;
        let fourier = matches!(sc.id, 2 | 3).then(|| fourier_table(&grid));
        let mut model = SimModel {
            scenario: sc.clone(),
            grid,
            support,
            coefficients,
            scale: 1.0,
            gp,
            fourier,
        };
        model.scale = snr_scale(&model, sc.seed)?;
        Ok(model)
    }

    pub fn p(&self) -> usize {
        self.scenario.p()
    }

    pub fn m(&self) -> usize {
        self.scenario.m
    }

    /// Draws `n` curves of the first `p` predictors.
    fn draw_curves(&self, n: usize, p: usize, rng: &mut ChaCha8Rng) -> CurveArray {
        let t = self.grid.len();
        let mut values = Vec::with_capacity(n * p * t);
        for _ in 0..n {
            match self.scenario.id {
                1 => values.extend(self.gp_draws(1, rng).iter()),
                2 => values.extend(fourier_curve(self.table(), rng).iter()),
                3 => values
                    .extend(correlated_fourier(self.table(), p, self.scenario.rho, rng).iter()),
                _ => {
                    let lag = self.scenario.lag;
                    let w = self.gp_draws(p + lag, rng);
                    values.extend(moving_sums(&w, p, lag).iter());
                }
            }
        }
        CurveArray::new(self.grid.clone(), n, p, values).expect("generated curves are valid")
    }

    fn table(&self) -> &DMatrix<f64> {
        self.fourier
            .as_ref()
            .expect("Fourier table present for this scenario")
    }

    /// Independent GP paths as the columns of a T×count matrix.
    fn gp_draws(&self, count: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let l = self
            .gp
            .as_ref()
            .expect("GP factor present for this scenario");
        let z = DMatrix::from_fn(l.ncols(), count, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        l * z
    }

    /// Signal `∫ Xᵀ b` of one sample, before scaling, from a closure
    /// giving the curve of a support predictor.
    fn signal<'c>(&self, curve: impl Fn(usize) -> &'c [f64], w: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.m());
        for (j, b) in self.support.iter().zip(&self.coefficients) {
            let x = curve(*j);
            for (i, row) in b.row_iter().enumerate() {
                out.axpy(w[i] * x[i], &row.transpose(), 1.0);
            }
        }
        out
    }

    /// Sample set `set` (0 for training, 1 for testing, …) of size `n`.
    pub fn sample(&self, n: usize, sigma: f64, set: u64) -> Result<CurveDataset> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return invalid("sigma must be finite and nonnegative");
        }
        let seed = self.scenario.seed;
        let mut xrng = rng_stream(seed, 2 + 2 * set);
        let mut erng = rng_stream(seed, 3 + 2 * set);
        let curves = self.draw_curves(n, self.p(), &mut xrng);
        let w = trapezoid_weights(&self.grid)?;
        let m = self.m();
        let mut f = DMatrix::zeros(n, m);
        for l in 0..n {
            let s = self.signal(|j| curves.curve(l, j), &w);
            for r in 0..m {
                f[(l, r)] = MU + self.scale * s[r];
            }
        }
        let noise = DMatrix::from_fn(n, m, |_, _| erng.sample::<f64, _>(StandardNormal));
        let y = &f + noise * sigma;
        let truth = Truth {
            regression: f,
            support: self.support.clone(),
            scale: self.scale,
            sigma,
        };
        CurveDataset::new(curves, y)?.with_truth(truth)
    }
}

fn combine(grid: &[f64], mm: &DMatrix<f64>, beta: impl Fn(f64, f64) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(grid.len(), mm.ncols(), |i, r| {
        (0..3)
            .map(|k| beta(grid[i], (k + 1) as f64) * mm[(k, r)])
            .sum()
    })
}

/// Cholesky factor of the squared-exponential kernel `exp(−(30(t−t′))²)`
/// with the smallest diagonal jitter (from 1e-10 up) that factorizes.
pub fn gp_factor(grid: &[f64]) -> Result<DMatrix<f64>> {
    let t = grid.len();
    let k = DMatrix::from_fn(t, t, |i, j| (-(30.0 * (grid[i] - grid[j])).powi(2)).exp());
    let mut jitter = 1e-10;
    while jitter < 1e-2 {
        let kj = &k + DMatrix::identity(t, t) * jitter;
        if let Some(c) = kj.cholesky() {
            return Ok(c.l());
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(
        "kernel matrix is not positive definite".into(),
    ))
}

/// `Σ_{k=1}^{20} V_k1 sin(2kπt) + V_k2 cos(2kπt)` with `Var V_k· = k^{-1/2}`.
fn fourier_curve(table: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<(f64, f64)> = (1..=20)
        .map(|k| {
            let sd = (k as f64).powf(-0.25);
            (
                sd * rng.sample::<f64, _>(StandardNormal),
                sd * rng.sample::<f64, _>(StandardNormal),
            )
        })
        .collect();
    fourier_eval(table, &v)
}

fn fourier_table(grid: &[f64]) -> DMatrix<f64> {
    use std::f64::consts::PI;
    DMatrix::from_fn(grid.len(), 40, |i, c| {
        let w = 2.0 * (c / 2 + 1) as f64 * PI * grid[i];
        if c % 2 == 0 {
            w.sin()
        } else {
            w.cos()
        }
    })
}

fn fourier_eval(table: &DMatrix<f64>, v: &[(f64, f64)]) -> Vec<f64> {
    let coef = DVector::from_iterator(40, v.iter().flat_map(|(a, b)| [*a, *b]));
    (table * coef).as_slice().to_vec()
}

/// `p` Fourier curves whose coefficient vectors have covariance
/// `((1−ρ)I + ρ11ᵀ)/√k`.
fn correlated_fourier(table: &DMatrix<f64>, p: usize, rho: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = vec![vec![(0.0, 0.0); 20]; p];
    for k in 0..20 {
        let sd = ((k + 1) as f64).powf(-0.25);
        for i in 0..2 {
            let common: f64 = rng.sample(StandardNormal);
            for vj in v.iter_mut() {
                let own: f64 = rng.sample(StandardNormal);
                let draw = sd * ((1.0 - rho).sqrt() * own + rho.sqrt() * common);
                if i == 0 {
                    vj[k].0 = draw;
                } else {
                    vj[k].1 = draw;
                }
            }
        }
    }
    v.iter().flat_map(|vj| fourier_eval(table, vj)).collect()
}

/// `X_j = (W_{j+1} + … + W_{j+lag})/√lag` from the T×(p+lag) paths `w`.
fn moving_sums(w: &DMatrix<f64>, p: usize, lag: usize) -> Vec<f64> {
    let t = w.nrows();
    let norm = 1.0 / (lag as f64).sqrt();
    let mut out = Vec::with_capacity(p * t);
    for j in 0..p {
        for i in 0..t {
            let s: f64 = (1..=lag).map(|k| w[(i, j + k)]).sum();
            out.push(s * norm);
        }
    }
    out
}

/// Signal scale making the response-averaged signal variance one, so that
/// noise level σ = 1 gives unit signal-to-noise ratio. Estimated from
/// 10 000 Monte Carlo curve draws on stream `seed`.
pub fn snr_scale(model: &SimModel, seed: u64) -> Result<f64> {
    let mut rng = rng_stream(seed, STREAM_SNR);
    let w = trapezoid_weights(&model.grid)?;
    let m = model.m();
    let mut sum = DVector::<f64>::zeros(m);
    let mut sumsq = DVector::<f64>::zeros(m);
    for _ in 0..SNR_DRAWS {
        let s = match model.scenario.id {
            4 => {
                // Only the supported predictors matter: draw the paths they
                // average over.
                let lag = model.scenario.lag;
                let paths = model.gp_draws(model.support.len() * lag, &mut rng);
                let t = model.grid.len();
                let curves: Vec<Vec<f64>> = (0..model.support.len())
                    .map(|s| {
                        (0..t)
                            .map(|i| {
                                (0..lag).map(|k| paths[(i, s * lag + k)]).sum::<f64>()
                                    / (lag as f64).sqrt()
                            })
                            .collect()
                    })
                    .collect();
                let index: Vec<usize> = model.support.clone();
                model.signal(|j| &curves[index.iter().position(|&x| x == j).unwrap()], &w)
            }
            _ => {
                // The support is a prefix of the predictors, and the
                // predictors are exchangeable, so only it is drawn.
                let p = model.support.iter().max().map_or(0, |j| j + 1);
                let c = model.draw_curves(1, p, &mut rng);
                model.signal(|j| c.curve(0, j), &w)
            }
        };
        sum += &s;
        sumsq += s.component_mul(&s);
    }
    let nd = SNR_DRAWS as f64;
    let var: f64 = (0..m)
        .map(|r| (sumsq[r] - sum[r] * sum[r] / nd) / (nd - 1.0))
        .sum::<f64>()
        / m as f64;
    if !(var > 0.0) {
        return Err(Error::InvalidArgument(
            "signal variance is zero; scale undefined".into(),
        ));
    }
    Ok(1.0 / var.sqrt())
}

/// Covariance structure of the response-space example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fig1Case {
    /// `ρ^{|i−j|}`
    Ar,
    /// unit diagonal, `ρ` elsewhere
    Cs,
}

/// Relative approximation errors `Σ_{k>K} σ_k² / Σ_k σ_k²` for
/// `K = 0..=m` of an m×m covariance matrix.
pub fn fig1_curves(m: usize, case: Fig1Case, rho: f64) -> Result<Vec<f64>> {
    if m == 0 || !rho.is_finite() {
        return invalid("need m >= 1 and finite rho");
    }
    let cov = DMatrix::from_fn(m, m, |i, j| match case {
        Fig1Case::Ar => rho.powi((i as i32 - j as i32).abs()),
        Fig1Case::Cs if i == j => 1.0,
        Fig1Case::Cs => rho,
    });
    let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let top = eig[0].abs();
    if eig.iter().any(|&l| l < -1e-12 * top.max(1.0)) {
        return invalid(format!(
            "rho = {rho} does not give a positive semidefinite covariance"
        ));
    }
    let eig: Vec<f64> = eig.into_iter().map(|l| l.max(0.0)).collect();
    let total: f64 = eig.iter().sum();
    let mut out = Vec::with_capacity(m + 1);
    for k in 0..=m {
        let tail: f64 = eig[k..].iter().sum();
        out.push(tail / total);
    }
    Ok(out)
}

/// Relative errors of three rank-K decompositions of the Brownian-motion
/// example, for `K = 1..=k_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoErrors {
    pub optimal: Vec<f64>,
    pub fpca: Vec<f64>,
    pub fpls: Vec<f64>,
}

/// Brownian motion `Σ(s,t) = min(s,t)` on a uniform grid with
/// `b_k(t) = sin(kπt) + 2 sin((k+1)πt)`, `k = 1..5`, discretized with
/// trapezoid weights. Errors are `E‖f − E[f | T_1..T_K]‖² / E‖f − Ef‖²`
/// for the regression function `f = ∫ X b`.
pub fn brownian_demo(t: usize, k_max: usize) -> Result<DemoErrors> {
    use std::f64::consts::PI;
    if t < 3 || k_max == 0 {
        return invalid("need at least three grid points and one component");
    }
    let grid = uniform_grid(t);
    let w = DVector::from_vec(trapezoid_weights(&grid)?);
    let m = 5;
    let sigma = DMatrix::from_fn(t, t, |i, j| grid[i].min(grid[j]));
    let b = DMatrix::from_fn(t, m, |i, k| {
        let k = (k + 1) as f64;
        (k * PI * grid[i]).sin() + 2.0 * ((k + 1.0) * PI * grid[i]).sin()
    });
    let wm = DMatrix::from_diagonal(&w);
    // Cov(∫Xα, ∫Xβ) = αᵀ K β
    let kk = &wm * &sigma * &wm;
    let kb = &kk * &b;
    let total = (b.transpose() * &kb).trace();

    let error_of = |alphas: &[DVector<f64>]| -> Vec<f64> {
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut explained = 0.0;
        let mut out = Vec::new();
        for a in alphas {
            let mut v = a.clone();
            for _ in 0..2 {
                for q in &basis {
                    let c = (q.transpose() * &kk * &v)[(0, 0)];
                    v.axpy(-c, q, 1.0);
                }
            }
            let var = (v.transpose() * &kk * &v)[(0, 0)];
            if var > 1e-14 * kk.trace() {
                v /= var.sqrt();
                explained += (kb.transpose() * &v).norm_squared();
                basis.push(v);
            }
            out.push(((total - explained) / total).max(0.0));
        }
        out
    };

    // optimal: generalized eigenproblem restricted to the positive part of K
    let eig = kk.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let pos: Vec<usize> = (0..t)
        .filter(|&i| eig.eigenvalues[i] > 1e-12 * top)
        .collect();
    let vp = eig.eigenvectors.select_columns(&pos);
    let lam = DVector::from_iterator(pos.len(), pos.iter().map(|&i| eig.eigenvalues[i]));
    let mut red = vp.tr_mul(&kb);
    for (mut row, l) in red.row_iter_mut().zip(lam.iter()) {
        row /= l.sqrt();
    }
    let svd = red.svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let optimal: Vec<DVector<f64>> = (0..k_max)
        .map(|k| match order.get(k) {
            Some(&c) => {
                let y = u.column(c).component_div(&lam.map(|l| l.sqrt()));
                &vp * y
            }
            None => DVector::zeros(t),
        })
        .collect();

    // FPCA: eigenfunctions of the covariance operator
    let ws = w.map(f64::sqrt);
    let sym = DMatrix::from_fn(t, t, |i, j| ws[i] * sigma[(i, j)] * ws[j]);
    let e = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let fpca: Vec<DVector<f64>> = order[..k_max.min(t)]
        .iter()
        .map(|&c| e.eigenvectors.column(c).component_div(&ws))
        .collect();

    // FPLS: max ‖Cov(∫Xα, f)‖² over ‖α‖_{L²} = 1 with uncorrelated scores
    let wsi = ws.map(|v| if v > 0.0 { 1.0 / v } else { 0.0 });
    let scale_rows = |m: &DMatrix<f64>| {
        let mut out = m.clone();
        for (mut row, s) in out.row_iter_mut().zip(wsi.iter()) {
            row *= *s;
        }
        out
    };
    let g = scale_rows(&kb);
    let target = &g * g.transpose();
    let mut fpls = Vec::new();
    let mut cons: Vec<DVector<f64>> = Vec::new();
    for _ in 0..k_max {
        let proj = if cons.is_empty() {
            DMatrix::identity(t, t)
        } else {
            let c = DMatrix::from_columns(&cons);
            let q = c.qr().q();
            DMatrix::identity(t, t) - &q * q.transpose()
        };
        let mat = &proj * &target * &proj;
        let mat = (&mat + mat.transpose()) * 0.5;
        let e = mat.symmetric_eigen();
        let i = e.eigenvalues.imax();
        let beta = e.eigenvectors.column(i).into_owned();
        let alpha = beta.component_mul(&wsi);
        cons.push((&kk * &alpha).component_mul(&wsi));
        fpls.push(alpha);
    }

    Ok(DemoErrors {
        optimal: error_of(&optimal),
        fpca: error_of(&fpca),
        fpls: error_of(&fpls),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn noiseless_responses_equal_the_truth() {
        for id in 1..=3u8 {
            let sc = SimScenario::new(id, 30, 3, 0.0, 5).unwrap();
            let ds = sc.generate().unwrap();
            let t = ds.truth().unwrap();
            assert_eq!(ds.responses(), &t.regression);
        }
    }

    #[test]
    fn truth_is_invariant_to_the_noise_level() {
        let a = gen_sim2(20, 5, 0.01, 9).unwrap();
        let b = gen_sim2(20, 5, 1.0, 9).unwrap();
        assert_eq!(a.curves(), b.curves());
        assert_eq!(a.truth().unwrap().regression, b.truth().unwrap().regression);
        let na = a.responses() - &a.truth().unwrap().regression;
        let nb = b.responses() - &b.truth().unwrap().regression;
        assert!((na * 100.0 - nb).amax() < 1e-12);
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_sim3(10, 2, 0.1, 0.2, 4).unwrap();
        let b = gen_sim3(10, 2, 0.1, 0.2, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            a.responses(),
            gen_sim3(10, 2, 0.1, 0.2, 5).unwrap().responses()
        );
    }

    #[test]
    fn truth_matches_an_independent_quadrature() {
        use std::f64::consts::PI;
        let ds = gen_sim1(15, 4, 0.5, 3).unwrap();
        let truth = ds.truth().unwrap();
        let grid = ds.grid();
        let h = grid[1] - grid[0];
        for l in 0..15 {
            let x = ds.curves().curve(l, 0);
            for k in 0..4 {
                let f: Vec<f64> = grid
                    .iter()
                    .zip(x)
                    .map(|(&t, &xv)| {
                        let a = 3.0 * PI * t + (k + 1) as f64;
                        xv * (a.sin() + a.cos())
                    })
                    .collect();
                let integral = h * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[f.len() - 1]));
                let want = MU + truth.scale * integral;
                let got = truth.regression[(l, k)];
                assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gp_marginal_variance_is_one() {
        let ds = gen_sim1(5000, 1, 0.0, 11).unwrap();
        let mid: Vec<f64> = (0..5000).map(|l| ds.curves().curve(l, 0)[32]).collect();
        let mean = mid.iter().sum::<f64>() / 5000.0;
        let var = mid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4999.0;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn coefficient_matrix_entries_are_uniform_draws() {
        // Recover M from b at t = 0, 1/3 and 1 by solving the 3×3 system
        // of the known β values there.
        let model = SimScenario::new(2, 5, 10, 0.1, 2)
            .unwrap()
            .with_grid_size(4)
            .unwrap();
        let model = model.model().unwrap();
        let b = &model.coefficients[0];
        let beta = |t: f64| {
            [
                (2.0 * std::f64::consts::PI * t).cos(),
                2.0 * t * t,
                1.0 / (1.0 + t),
            ]
        };
        let rows: Vec<[f64; 3]> = [0.0, 1.0 / 3.0, 1.0].iter().map(|&t| beta(t)).collect();
        let a = DMatrix::from_fn(3, 3, |i, k| rows[i][k]);
        let lu = a.lu();
        for r in 0..10 {
            let rhs = DVector::from_vec(vec![b[(0, r)], b[(1, r)], b[(3, r)]]);
            let m = lu.solve(&rhs).unwrap();
            assert!(m.iter().all(|v| *v > 0.0 && *v < 1.0), "{m}");
        }
    }

    #[test]
    fn uncorrelated_scenario_three_has_independent_coordinates() {
        let model = SimScenario::new(3, 2000, 1, 0.0, 8)
            .unwrap()
            .with_rho(0.0)
            .unwrap();
        let ds = model.generate().unwrap();
        // X_j(0) = Σ_k V_k2 for each j; check cross-correlation of two curves
        let a: Vec<f64> = (0..2000).map(|l| ds.curves().curve(l, 0)[0]).collect();
        let b: Vec<f64> = (0..2000).map(|l| ds.curves().curve(l, 1)[0]).collect();
        assert!(correlation(&a, &b).abs() <= 0.1);
        assert_eq!(ds.truth().unwrap().support, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn correlated_scenario_three_matches_rho() {
        let ds = gen_sim3(3000, 1, 0.0, 0.7, 8).unwrap();
        let a: Vec<f64> = (0..3000).map(|l| ds.curves().curve(l, 3)[10]).collect();
        let b: Vec<f64> = (0..3000).map(|l| ds.curves().curve(l, 17)[10]).collect();
        assert!((correlation(&a, &b) - 0.7).abs() < 0.05);
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn scenario_four_correlation_grows_with_lag() {
        let mut last = -1.0;
        for lag in [1usize, 2, 5] {
            let ds = gen_sim4(500, 1, 0.0, lag, 3).unwrap();
            assert_eq!(ds.p(), 1000);
            let a: Vec<f64> = (0..500).map(|l| ds.curves().curve(l, 100)[20]).collect();
            let b: Vec<f64> = (0..500).map(|l| ds.curves().curve(l, 101)[20]).collect();
            let r = correlation(&a, &b);
            if lag == 1 {
                assert!(r.abs() < 0.15);
            }
            assert!(r > last);
            last = r;
        }
        let ds = gen_sim4(5, 1, 0.0, 2, 3).unwrap();
        assert_eq!(ds.truth().unwrap().support, vec![0, 10, 20, 30, 40]);
    }

    #[test]
    fn snr_scale_behaves() {
        let sc = SimScenario::new(1, 10, 1, 1.0, 21).unwrap();
        let mut model = sc.model().unwrap();
        let c1 = snr_scale(&model, 100).unwrap();
        let c2 = snr_scale(&model, 200).unwrap();
        assert!((c1 / c2 - 1.0).abs() < 0.02);

        // exact variance for a Gaussian process: bᵀ W K W b
        let grid = model.grid.clone();
        let w = DVector::from_vec(trapezoid_weights(&grid).unwrap());
        let k = DMatrix::from_fn(64, 64, |i, j| (-(30.0 * (grid[i] - grid[j])).powi(2)).exp());
        let wb = model.coefficients[0].column(0).component_mul(&w);
        let exact = 1.0 / (wb.transpose() * k * &wb)[(0, 0)].sqrt();
        assert!((c1 / exact - 1.0).abs() < 0.03, "{c1} vs {exact}");

        for b in &mut model.coefficients {
            *b *= 2.0;
        }
        let doubled = snr_scale(&model, 100).unwrap();
        assert_abs_diff_eq!(doubled, c1 / 2.0, epsilon = 1e-12 * c1);
        for b in &mut model.coefficients {
            b.fill(0.0);
        }
        assert!(snr_scale(&model, 100).is_err());
    }

    #[test]
    fn signal_to_noise_is_one_at_unit_noise() {
        let model = SimScenario::new(2, 10, 5, 1.0, 4).unwrap().model().unwrap();
        let ds = model.sample(4000, 1.0, 1).unwrap();
        let f = &ds.truth().unwrap().regression;
        let mean = f.row_mean();
        let mut var = 0.0;
        for row in f.row_iter() {
            var += (row - &mean).norm_squared();
        }
        var /= 3999.0 * 5.0;
        assert!((var - 1.0).abs() < 0.08, "{var}");
    }

    #[test]
    fn fig1_closed_forms() {
        let cs = fig1_curves(20, Fig1Case::Cs, 0.5).unwrap();
        assert_abs_diff_eq!(cs[1], 0.475, epsilon = 1e-12);
        assert_abs_diff_eq!(cs[20], 0.0, epsilon = 1e-12);
        let one = fig1_curves(20, Fig1Case::Cs, 1.0).unwrap();
        assert_abs_diff_eq!(one[1], 0.0, epsilon = 1e-12);
        let ar = fig1_curves(20, Fig1Case::Ar, 0.0).unwrap();
        for (k, v) in ar.iter().enumerate() {
            assert_eq!(*v, (20 - k) as f64 / 20.0);
        }
        let ar9 = fig1_curves(20, Fig1Case::Ar, 0.9).unwrap();
        assert!(ar9.windows(2).all(|w| w[1] <= w[0]));
        assert!(fig1_curves(20, Fig1Case::Cs, -0.5).is_err());
    }

    #[test]
    fn brownian_demo_orders_the_decompositions() {
        let e = brownian_demo(64, 5).unwrap();
        for k in 0..5 {
            assert!(e.optimal[k] <= e.fpca[k] + 1e-12);
            assert!(e.optimal[k] <= e.fpls[k] + 1e-12);
        }
        assert!(e.optimal[4] <= 1e-8);
        assert!(e.optimal[0] < 0.5 * e.fpca[0].min(e.fpls[0]));
    }
}
