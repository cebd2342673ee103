//! Closed-form solver for the ridge-plus-roughness penalty.
//!
//! With `Z_w = U Σ Vᵀ` the whitened scores, the denominator matrix is
//! `M = Z_wᵀZ_w/n + τI` and every candidate score lives in the span of
//! `U`. The quotient reduces to the m×m eigenproblem of `YcᵀH Yc/n²`
//! with the kernel `H = Z_w M⁻¹ Z_wᵀ = U diag(nσ²/(σ² + nτ)) Uᵀ`.
//! Orthogonality to earlier scores `Q` replaces `H` by its Schur
//! complement `H − HQ(QᵀHQ)⁻¹QᵀH`, which is exact rather than a
//! deflation of `Z`.

use nalgebra::{DMatrix, DVector};

use super::{
    assemble, component_cap, finish_component, psd_pinv, top_eigen, ComponentDiagnostics,
    ComponentSet, PenaltyConfig, SpectralFactor,
};
use crate::design::DesignMatrices;
use crate::error::{invalid, Error, Result};

pub fn fit_components_smooth(
    dm: &DesignMatrices,
    tau: f64,
    eta: f64,
    k_max: usize,
) -> Result<ComponentSet> {
    let factor = SpectralFactor::new(dm, eta)?;
    fit_smooth_with(dm, &factor, tau, k_max)
}

/// Smooth fit reusing a precomputed factor; `η` is the factor's.
pub fn fit_smooth_with(
    dm: &DesignMatrices,
    factor: &SpectralFactor,
    tau: f64,
    k_max: usize,
) -> Result<ComponentSet> {
    let config = PenaltyConfig::smooth(tau, factor.eta);
    config.validate()?;
    if k_max == 0 {
        return invalid("at least one component must be requested");
    }
    let kernel = SmoothKernel::new(dm, factor, tau)?;
    let cap = component_cap(dm, k_max);
    let mut prev: Vec<(DVector<f64>, DVector<f64>)> = Vec::new();
    let mut comps = Vec::with_capacity(cap);
    for _ in 0..cap {
        if prev.len() < comps.len() {
            comps.push(None);
            continue;
        }
        let scores: Vec<&DVector<f64>> = prev.iter().map(|(_, s)| s).collect();
        let found = kernel.direction(&scores).and_then(|(value, x)| {
            let a = factor.whitener.to_coeffs(&x);
            finish_component(dm, a, &prev).map(|(a, s)| (a, s, value))
        });
        match found {
            Some((a, s, value)) => {
                prev.push((a.clone(), s.clone()));
                comps.push(Some((a, s, value, ComponentDiagnostics::exact(value))));
            }
            None => comps.push(None),
        }
    }
    Ok(assemble(dm, comps, config))
}

/// Spectral form of the smooth quotient for one `τ`.
pub(crate) struct SmoothKernel<'a> {
    factor: &'a SpectralFactor,
    tau: f64,
    n: f64,
    /// Kernel eigenvalues `nσ²/(σ² + nτ)`.
    h: DVector<f64>,
    /// `Uᵀ Yc`, r×m.
    uy: DMatrix<f64>,
    /// `diag(h) Uᵀ Yc`
    hy: DMatrix<f64>,
    floor: f64,
}

impl<'a> SmoothKernel<'a> {
    pub(crate) fn new(dm: &DesignMatrices, factor: &'a SpectralFactor, tau: f64) -> Result<Self> {
        if tau == 0.0 && factor.rank() < factor.pd() {
            return Err(Error::RegularizationRequired(format!(
                "score matrix has rank {} < {} coefficients",
                factor.rank(),
                factor.pd()
            )));
        }
        let n = dm.n() as f64;
        let h = factor.sv.map(|s| n * s * s / (s * s + n * tau));
        let uy = factor.u.tr_mul(&dm.yc);
        let mut hy = uy.clone();
        for (mut row, hi) in hy.row_iter_mut().zip(h.iter()) {
            row *= *hi;
        }
        let floor = 1e-12 * dm.yc.norm_squared() / n;
        Ok(SmoothKernel {
            factor,
            tau,
            n,
            h,
            uy,
            hy,
            floor,
        })
    }

    /// Leading eigenvalue and whitened coefficient vector of the quotient
    /// restricted to scores orthogonal to `prev`. `None` when the
    /// remaining quotient vanishes.
    pub(crate) fn direction(&self, prev: &[&DVector<f64>]) -> Option<(f64, DVector<f64>)> {
        let r = self.h.len();
        if r == 0 || prev.len() >= r || self.floor == 0.0 {
            return None;
        }
        let n2 = self.n * self.n;
        let base = self.uy.tr_mul(&self.hy);
        let (value, rt) = if prev.is_empty() {
            let (value, u) = top_eigen(&(base / n2));
            (value, &self.uy * &u)
        } else {
            let mut qt = DMatrix::zeros(r, prev.len());
            for (c, s) in prev.iter().enumerate() {
                qt.set_column(c, &self.factor.u.tr_mul(s));
            }
            let q = qt.qr().q();
            let mut hq = q.clone();
            for (mut row, hi) in hq.row_iter_mut().zip(self.h.iter()) {
                row *= *hi;
            }
            let pinv = psd_pinv(&q.tr_mul(&hq));
            let b = q.tr_mul(&self.hy);
            let c = (base - b.tr_mul(&(&pinv * &b))) / n2;
            let (value, u) = top_eigen(&c);
            (value, &self.uy * &u - &q * (&pinv * (&b * &u)))
        };
        if !(value > self.floor) {
            return None;
        }
        let w = DVector::from_iterator(
            r,
            self.factor
                .sv
                .iter()
                .zip(rt.iter())
                .map(|(s, c)| s / (s * s / self.n + self.tau) * c),
        );
        Some((value, &self.factor.v * w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{make_basis, uniform_grid};
    use crate::design::{build_design, CurveArray, CurveDataset};
    use crate::eigensolver::penalized_quotient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Curves built from random basis coefficients plus white noise, with
    /// responses linear in random functionals of the curves.
    fn instance(n: usize, p: usize, d: usize, m: usize, seed: u64) -> DesignMatrices {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = make_basis(d, 3).unwrap();
        let grid = uniform_grid(40);
        let b = basis.eval_basis(&grid).unwrap();
        let mut values = Vec::new();
        for _ in 0..n * p {
            let c = DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let curve = &b * c;
            values.extend(curve.iter().map(|v| v + 0.05 * (rng.random::<f64>() - 0.5)));
        }
        let curves = CurveArray::new(grid, n, p, values).unwrap();
        let y = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>());
        let ds = CurveDataset::new(curves, y).unwrap();
        build_design(&ds, &basis).unwrap()
    }

    /// Dense oracle: maximize aᵀAa / aᵀ(S+P)a over the null space of the
    /// earlier score constraints, by Cholesky reduction to a standard
    /// symmetric eigenproblem.
    fn dense_oracle(dm: &DesignMatrices, tau: f64, eta: f64, k: usize) -> Vec<f64> {
        let n = dm.n() as f64;
        let pd = dm.z.ncols();
        let d = dm.d();
        let a_mat = dm.z.tr_mul(&dm.yc) * dm.yc.tr_mul(&dm.z) / (n * n);
        let mut den = dm.z.tr_mul(&dm.z) / n;
        let g = dm.g_eta(eta);
        for j in 0..dm.p {
            let mut blk = den.view_mut((j * d, j * d), (d, d));
            blk += &g * tau;
        }
        let mut out = Vec::new();
        let mut cons: Vec<DVector<f64>> = Vec::new();
        for _ in 0..k {
            // null-space basis of the constraint rows sᵀZ
            let basis = if cons.is_empty() {
                DMatrix::identity(pd, pd)
            } else {
                let c = DMatrix::from_fn(cons.len(), pd, |i, j| cons[i].dot(&dm.z.column(j)));
                let svd = c.clone().svd(false, true);
                let vt = svd.v_t.unwrap();
                // complete to a full orthonormal basis via QR of [vtᵀ | I]
                let full = DMatrix::from_fn(pd, pd, |i, j| {
                    if j < cons.len() {
                        vt[(j, i)]
                    } else if i == j - cons.len() {
                        1.0
                    } else {
                        0.0
                    }
                });
                let q = full.qr().q();
                q.columns(cons.len(), pd - cons.len()).into_owned()
            };
            let ar = basis.tr_mul(&(&a_mat * &basis));
            let dr = basis.tr_mul(&(&den * &basis));
            let l = dr.cholesky().unwrap().l();
            let li = l.clone().try_inverse().unwrap();
            let c = &li * ar * li.transpose();
            let c = (&c + c.transpose()) * 0.5;
            let eig = c.symmetric_eigen();
            let (i, v) = eig
                .eigenvalues
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
            out.push(v);
            let y = eig.eigenvectors.column(i).into_owned();
            let a = &basis * (li.transpose() * y);
            cons.push(&dm.z * a);
        }
        out
    }

    #[test]
    fn matches_dense_generalized_eigensolver() {
        for seed in 0..6 {
            let dm = instance(25, 2, 7, 3, seed);
            for &(tau, eta) in &[(1e-3, 0.0), (0.1, 1e-3), (10.0, 0.1)] {
                let cs = fit_components_smooth(&dm, tau, eta, 3).unwrap();
                let oracle = dense_oracle(&dm, tau, eta, 3);
                for (got, want) in cs.sigma2.iter().zip(&oracle) {
                    assert!(
                        (got - want).abs() <= 1e-8 * want,
                        "seed {seed} tau {tau}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn unpenalized_limit_matches_projection_oracle() {
        for seed in 0..5 {
            let dm = instance(20, 2, 8, 3, 100 + seed);
            let n = dm.n() as f64;
            // P_col(Z) from a thin SVD of Z
            let svd = dm.z.clone().svd(true, false);
            let u = svd.u.unwrap();
            let smax = svd.singular_values.max();
            let keep: Vec<usize> = (0..svd.singular_values.len())
                .filter(|&i| svd.singular_values[i] > 1e-10 * smax)
                .collect();
            let u = u.select_columns(&keep);
            let proj = &u * u.transpose();
            let c = dm.yc.tr_mul(&(proj * &dm.yc)) / n;
            let mut eig: Vec<f64> = c.symmetric_eigen().eigenvalues.iter().copied().collect();
            eig.sort_by(|a, b| b.total_cmp(a));
            let cs = fit_components_smooth(&dm, 1e-12, 0.0, 3).unwrap();
            for (got, want) in cs.sigma2.iter().zip(&eig) {
                assert!((got - want).abs() <= 1e-8 * want, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn component_invariants_hold() {
        let dm = instance(40, 3, 8, 5, 9);
        let cs = fit_components_smooth(&dm, 1e-3, 1e-4, 5).unwrap();
        let n = dm.n() as f64;
        assert_eq!(cs.k(), 5);
        for k in 0..5 {
            let s = cs.scores.column(k);
            assert!((s.norm_squared() / n - 1.0).abs() < 1e-8);
            assert!((&dm.z * cs.coeffs.column(k) - s).amax() < 1e-9);
            for j in 0..k {
                assert!(s.dot(&cs.scores.column(j)).abs() < 1e-8 * n);
            }
            if k > 0 {
                assert!(cs.sigma2[k] <= cs.sigma2[k - 1]);
            }
            let cross = dm.yc.tr_mul(&s);
            let lead = cross
                .iter()
                .fold(0.0f64, |m, &v| if v.abs() > m.abs() { v } else { m });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn reported_value_is_the_penalized_quotient_and_scale_free() {
        let dm = instance(30, 2, 8, 2, 21);
        let cs = fit_components_smooth(&dm, 0.5, 1e-2, 1).unwrap();
        let cfg = PenaltyConfig::smooth(0.5, 1e-2);
        let a = cs.coeffs.column(0).into_owned();
        let q = penalized_quotient(&dm, &a, &cfg).unwrap();
        assert!((q - cs.sigma2[0]).abs() <= 1e-10 * q);
        let q3 = penalized_quotient(&dm, &(a * 3.7), &cfg).unwrap();
        assert!((q3 - q).abs() <= 1e-10 * q);
    }

    #[test]
    fn aligns_with_ridge_direction_for_a_single_column_response() {
        let mut dm = instance(30, 1, 8, 1, 4);
        let col = dm.z.column(0).into_owned();
        dm.yc.set_column(0, &col);
        let cs = fit_components_smooth(&dm, 1e-9, 0.0, 1).unwrap();
        let n = dm.n() as f64;
        let s_mat = dm.z.tr_mul(&dm.z) / n + DMatrix::identity(8, 8) * 1e-9 * 0.0;
        let den = &s_mat + dm.g_eta(0.0) * 1e-9;
        let ridge = den.clone().lu().solve(&(dm.z.tr_mul(&col) / n)).unwrap();
        let a = cs.coeffs.column(0);
        let ip = (a.transpose() * &s_mat * &ridge)[(0, 0)];
        let na = (a.transpose() * &s_mat * a)[(0, 0)].sqrt();
        let nr = (ridge.transpose() * &s_mat * &ridge)[(0, 0)].sqrt();
        assert!((ip / (na * nr)).abs() >= 0.999);
    }

    #[test]
    fn zero_response_gives_null_components() {
        let mut dm = instance(20, 2, 6, 3, 2);
        dm.yc.fill(0.0);
        let cs = fit_components_smooth(&dm, 1.0, 0.0, 3).unwrap();
        assert_eq!(cs.sigma2, vec![0.0; 3]);
        assert!(cs.coeffs.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unregularized_rank_deficient_problem_is_rejected() {
        let dm = instance(10, 2, 8, 2, 3);
        match fit_components_smooth(&dm, 0.0, 0.0, 2) {
            Err(Error::RegularizationRequired(_)) => {}
            other => panic!("expected regularization error, got {other:?}"),
        }
        assert!(fit_components_smooth(&dm, 1e-6, 0.0, 2).is_ok());
    }

    #[test]
    fn component_count_is_capped() {
        let dm = instance(6, 1, 6, 10, 8);
        let cs = fit_components_smooth(&dm, 1.0, 0.0, 50).unwrap();
        assert_eq!(cs.k(), 5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn scores_stay_orthonormal(seed in 0u64..10_000, tau in 1e-6f64..10.0, eta in 0.0f64..1.0) {
                let dm = instance(18, 2, 6, 4, seed);
                let cs = fit_components_smooth(&dm, tau, eta, 4).unwrap();
                let n = dm.n() as f64;
                let gram = cs.scores.tr_mul(&cs.scores) / n;
                for i in 0..cs.k() {
                    if cs.sigma2[i] > 0.0 {
                        prop_assert!((gram[(i, i)] - 1.0).abs() < 1e-8);
                    }
                    for j in 0..i {
                        prop_assert!(gram[(i, j)].abs() < 1e-8);
                    }
                    if i > 0 {
                        prop_assert!(cs.sigma2[i] <= cs.sigma2[i - 1]);
                    }
                }
            }
        }
    }
}
