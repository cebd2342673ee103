//! Sequential penalized generalized eigensolvers.
//!
//! Component `k` maximizes the quotient
//!
//! ```text
//!     aᵀ A a / (aᵀ S a + pen(a)),   A = ZᵀYcYcᵀZ/n²,  S = ZᵀZ/n
//! ```
//!
//! over coefficient vectors whose scores `Za` are orthogonal to the
//! scores of components `1..k`. Both solvers work in whitened block
//! coordinates `x_j = Lᵀ a_j`, where `L Lᵀ = G + ηH`, so every block norm
//! `‖a_j‖_η` becomes a Euclidean norm `‖x_j‖`.

mod smooth;
mod sparse;

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{penalty_value, DesignMatrices};
use crate::error::{invalid, Error, Result};

pub use smooth::{fit_components_smooth, fit_smooth_with};
pub use sparse::{fit_components_sparse, fit_sparse_with};

/// Which penalty the denominator carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyMode {
    /// `τ Σ_j ‖α_j‖²_η`
    Smooth,
    /// `τ[(1−λ) Σ_j ‖α_j‖²_η + λ (Σ_j ‖α_j‖_η)²]`
    SmoothSparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub mode: PenaltyMode,
    pub tau: f64,
    pub lambda: f64,
    pub eta: f64,
}

impl PenaltyConfig {
    pub fn smooth(tau: f64, eta: f64) -> Self {
        PenaltyConfig {
            mode: PenaltyMode::Smooth,
            tau,
            lambda: 0.0,
            eta,
        }
    }

    pub fn sparse(tau: f64, lambda: f64, eta: f64) -> Self {
        PenaltyConfig {
            mode: PenaltyMode::SmoothSparse,
            tau,
            lambda,
            eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.tau, self.lambda, self.eta]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.tau < 0.0 || self.eta < 0.0 {
            return invalid("tau and eta must be finite and nonnegative");
        }
        match self.mode {
            PenaltyMode::Smooth if self.lambda != 0.0 => invalid("smooth mode requires lambda = 0"),
            PenaltyMode::SmoothSparse if !(self.lambda > 0.0 && self.lambda <= 1.0) => {
                invalid("smooth-sparse mode requires 0 < lambda <= 1")
            }
            PenaltyMode::SmoothSparse if self.tau <= 0.0 => {
                invalid("smooth-sparse mode requires tau > 0")
            }
            _ => Ok(()),
        }
    }
}

/// Convergence record of one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Penalized quotient after every accepted outer iteration.
    pub objective_trace: Vec<f64>,
}

impl ComponentDiagnostics {
    fn exact(objective: f64) -> Self {
        ComponentDiagnostics {
            iterations: 0,
            converged: true,
            objective_trace: vec![objective],
        }
    }
}

/// Estimated components in basis coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    /// pD×K; column k holds the basis coefficients of `α̂_k`.
    pub coeffs: DMatrix<f64>,
    /// Achieved quotient values, non-increasing.
    pub sigma2: Vec<f64>,
    /// n×K; column k is `Z · coeffs_k`, normalized to `‖·‖²/n = 1`.
    /// Components with a vanishing quotient are stored as zeros.
    pub scores: DMatrix<f64>,
    pub config: PenaltyConfig,
    pub diagnostics: Vec<ComponentDiagnostics>,
}

impl ComponentSet {
    pub fn k(&self) -> usize {
        self.sigma2.len()
    }

    /// Keeps the leading `k` components.
    pub fn truncate(&self, k: usize) -> Result<ComponentSet> {
        if k > self.k() {
            return invalid(format!(
                "requested {k} components but only {} exist",
                self.k()
            ));
        }
        Ok(ComponentSet {
            coeffs: self.coeffs.columns(0, k).into_owned(),
            sigma2: self.sigma2[..k].to_vec(),
            scores: self.scores.columns(0, k).into_owned(),
            config: self.config,
            diagnostics: self.diagnostics[..k].to_vec(),
        })
    }

    /// Norm `‖α̂_kj‖_η` of predictor `j` in component `k`.
    pub fn block_norm(&self, k: usize, j: usize, g_eta: &DMatrix<f64>) -> f64 {
        let d = g_eta.nrows();
        let block = self.coeffs.view((j * d, k), (d, 1));
        (block.transpose() * g_eta * block)[(0, 0)].max(0.0).sqrt()
    }
}

/// Penalized quotient of a coefficient vector under `config`.
pub fn penalized_quotient(
    dm: &DesignMatrices,
    a: &DVector<f64>,
    config: &PenaltyConfig,
) -> Result<f64> {
    let g = dm.g_eta(config.eta);
    let pen = penalty_value(a.as_slice(), &g, config.tau, config.lambda)?;
    let den = dm.sigma_form(a) + pen;
    if den <= 0.0 {
        return Err(Error::Numerical(
            "quotient denominator is not positive".into(),
        ));
    }
    Ok(dm.gamma_form(a) / den)
}

/// `(I − ttᵀ/‖t‖²) Z`: removes the direction `t` from every column.
pub fn deflate(z: &DMatrix<f64>, t: &DVector<f64>) -> Result<DMatrix<f64>> {
    if t.len() != z.nrows() {
        return invalid("score length does not match the number of rows");
    }
    let nt = t.norm_squared();
    if !(nt > 0.0) {
        return invalid("cannot deflate by a zero score vector");
    }
    let coef = z.tr_mul(t) / nt;
    Ok(z - t * coef.transpose())
}

/// Block-diagonal whitening by the Cholesky factor of `G + ηH`.
#[derive(Debug, Clone)]
pub(crate) struct Whitener {
    /// `L⁻ᵀ`, maps whitened blocks back to basis coefficients.
    linv_t: DMatrix<f64>,
    /// `Lᵀ`
    lt: DMatrix<f64>,
}

impl Whitener {
    fn new(g_eta: &DMatrix<f64>) -> Result<Self> {
        let chol = g_eta
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("G + eta*H is not positive definite".into()))?;
        let l = chol.l();
        let d = l.nrows();
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        Ok(Whitener {
            linv_t: linv.transpose(),
            lt: l.transpose(),
        })
    }

    fn d(&self) -> usize {
        self.lt.nrows()
    }

    pub(crate) fn to_coeffs(&self, x: &DVector<f64>) -> DVector<f64> {
        self.blockwise(&self.linv_t, x)
    }

    pub(crate) fn to_whitened(&self, a: &DVector<f64>) -> DVector<f64> {
        self.blockwise(&self.lt, a)
    }

    fn blockwise(&self, m: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        let d = self.d();
        let mut out = DVector::zeros(v.len());
        for (j, block) in v.as_slice().chunks(d).enumerate() {
            if block.iter().any(|b| *b != 0.0) {
                let b = m * DVector::from_column_slice(block);
                out.rows_mut(j * d, d).copy_from(&b);
            }
        }
        out
    }
}

/// Whitened score matrix and its thin SVD for one `(design, η)` pair.
/// Reused across every `τ` and `λ`.
pub struct SpectralFactor {
    pub(crate) eta: f64,
    pub(crate) p: usize,
    pub(crate) d: usize,
    pub(crate) whitener: Whitener,
    /// `Z · blockdiag(L⁻ᵀ)`, n×pD.
    pub(crate) zw: DMatrix<f64>,
    /// n×r left singular vectors.
    pub(crate) u: DMatrix<f64>,
    /// r nonzero singular values, descending.
    pub(crate) sv: DVector<f64>,
    /// pD×r right singular vectors.
    pub(crate) v: DMatrix<f64>,
    block_eigen: OnceLock<Vec<SymmetricEigen<f64, nalgebra::Dyn>>>,
}

impl SpectralFactor {
    pub fn new(dm: &DesignMatrices, eta: f64) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return invalid("eta must be finite and nonnegative");
        }
        let whitener = Whitener::new(&dm.g_eta(eta))?;
        let (n, d, p) = (dm.n(), dm.d(), dm.p);
        let blocks: Vec<DMatrix<f64>> = (0..p)
            .into_par_iter()
            .map(|j| dm.z.view((0, j * d), (n, d)) * &whitener.linv_t)
            .collect();
        let mut zw = DMatrix::zeros(n, p * d);
        for (j, b) in blocks.iter().enumerate() {
            zw.view_mut((0, j * d), (n, d)).copy_from(b);
        }

        let (u, s, v) = if p * d > n {
            let qr = zw.transpose().qr();
            let q = qr.q();
            let r = qr.r();
            let svd = r.transpose().svd(true, true);
            let u = svd.u.expect("requested U");
            let v = q * svd.v_t.expect("requested V").transpose();
            (u, svd.singular_values, v)
        } else {
            let svd = zw.clone().svd(true, true);
            let v = svd.v_t.expect("requested V").transpose();
            (svd.u.expect("requested U"), svd.singular_values, v)
        };

        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        let smax = order.first().map_or(0.0, |&i| s[i]);
        let cutoff = n.max(p * d) as f64 * f64::EPSILON * smax;
        let keep: Vec<usize> = order
            .into_iter()
            .filter(|&i| s[i] > cutoff && s[i] > 0.0)
            .collect();
        let u = u.select_columns(&keep);
        let v = v.select_columns(&keep);
        let sv = DVector::from_iterator(keep.len(), keep.iter().map(|&i| s[i]));
        Ok(SpectralFactor {
            eta,
            p,
            d,
            whitener,
            zw,
            u,
            sv,
            v,
            block_eigen: OnceLock::new(),
        })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Numerical rank of the score matrix.
    pub fn rank(&self) -> usize {
        self.sv.len()
    }

    fn pd(&self) -> usize {
        self.p * self.d
    }

    /// Eigendecompositions of the whitened block Gram matrices `Z_jᵀZ_j`.
    pub(crate) fn block_eigen(&self) -> &[SymmetricEigen<f64, nalgebra::Dyn>] {
        self.block_eigen.get_or_init(|| {
            let (n, d) = (self.zw.nrows(), self.d);
            (0..self.p)
                .into_par_iter()
                .map(|j| {
                    let zj = self.zw.view((0, j * d), (n, d));
                    zj.tr_mul(&zj).symmetric_eigen()
                })
                .collect()
        })
    }
}

/// Largest eigenpair of a symmetric matrix.
pub(crate) fn top_eigen(c: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let (i, val) =
        eig.eigenvalues
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
    (val, eig.eigenvectors.column(i).into_owned())
}

/// Moore-Penrose inverse of a symmetric positive semidefinite matrix.
pub(crate) fn psd_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let mut inv = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l > 1e-13 * top && l > 0.0 {
            let v = eig.eigenvectors.column(i);
            inv += v * v.transpose() / l;
        }
    }
    inv
}

/// Orthogonalizes a new component against earlier ones, normalizes its
/// score variance to one and fixes the sign. Returns `None` when nothing
/// of the score survives.
pub(crate) fn finish_component(
    dm: &DesignMatrices,
    mut a: DVector<f64>,
    prev: &[(DVector<f64>, DVector<f64>)],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = dm.n() as f64;
    let mut s = &dm.z * &a;
    let raw = s.norm();
    for _ in 0..2 {
        for (pa, ps) in prev {
            let c = ps.dot(&s) / n;
            s.axpy(-c, ps, 1.0);
            a.axpy(-c, pa, 1.0);
        }
    }
    let norm = s.norm();
    if !(norm > 1e-10 * raw.max(f64::MIN_POSITIVE)) || norm == 0.0 {
        return None;
    }
    let scale = n.sqrt() / norm;
    a *= scale;
    s *= scale;
    let cross = dm.yc.tr_mul(&s);
    let lead = cross
        .iter()
        .fold(0.0f64, |m, &v| if v.abs() > m.abs() { v } else { m });
    if lead < 0.0 {
        a.neg_mut();
        s.neg_mut();
    }
    Some((a, s))
}

/// Upper bound on the number of components: `min(K_max, m, n−1, pD)`.
pub(crate) fn component_cap(dm: &DesignMatrices, k_max: usize) -> usize {
    k_max.min(dm.m()).min(dm.n() - 1).min(dm.p * dm.d())
}

/// One solved component: coefficients, scores, eigenvalue, diagnostics.
pub(crate) type Solved = (DVector<f64>, DVector<f64>, f64, ComponentDiagnostics);

pub(crate) fn assemble(
    dm: &DesignMatrices,
    comps: Vec<Option<Solved>>,
    config: PenaltyConfig,
) -> ComponentSet {
    let k = comps.len();
    let (n, pd) = (dm.n(), dm.z.ncols());
    let mut coeffs = DMatrix::zeros(pd, k);
    let mut scores = DMatrix::zeros(n, k);
    let mut sigma2 = Vec::with_capacity(k);
    let mut diagnostics = Vec::with_capacity(k);
    let mut last = f64::INFINITY;
    for (i, c) in comps.into_iter().enumerate() {
        match c {
            Some((a, s, q, diag)) => {
                coeffs.set_column(i, &a);
                scores.set_column(i, &s);
                last = q.min(last).max(0.0);
                sigma2.push(last);
                diagnostics.push(diag);
            }
            None => {
                last = 0.0;
                sigma2.push(0.0);
                diagnostics.push(ComponentDiagnostics::exact(0.0));
            }
        }
    }
    ComponentSet {
        coeffs,
        sigma2,
        scores,
        config,
        diagnostics,
    }
}
