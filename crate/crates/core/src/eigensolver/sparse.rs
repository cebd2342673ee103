//! Alternating maximization for the smooth-sparse penalty.
//!
//! In whitened coordinates the denominator is
//! `‖Z_w x‖²/n + τ(1−λ)‖x‖² + τλ(Σ_j ‖x_j‖)²`. Because the numerator
//! has rank at most m, the quotient equals `max_u (uᵀYcᵀZ_w x)²/den(x)`
//! over unit `u`. The solver alternates an exact `u` step with an
//! x step that minimizes `den(x) − 2cᵀx`, which maximizes
//! `(cᵀx)²/den(x)` by homogeneity. The x step is convex and solved by
//! block coordinate descent with group soft-thresholding.
//!
//! Orthogonality to earlier scores is imposed inside the x step by an
//! augmented Lagrangian, and a final exact projection removes whatever
//! violation the multiplier iteration leaves behind.

use std::cell::{OnceCell, RefCell};
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};

use super::smooth::SmoothKernel;
use super::{
    assemble, component_cap, finish_component, ComponentDiagnostics, ComponentSet, PenaltyConfig,
    SpectralFactor,
};
use crate::design::DesignMatrices;
use crate::error::{invalid, Result};

const MAX_OUTER: usize = 500;
const OUTER_TOL: f64 = 1e-8;
const INNER_TOL: f64 = 1e-11;
/// Looser tolerance of the coordinate-descent screening before Newton.
const SCREEN_TOL: f64 = 1e-6;
const LOOSE_SCREEN_TOL: f64 = 1e-3;
/// Sweep budget of one multiplier round.
const ROUND_SWEEPS: usize = 100;
const MAX_SWEEPS: usize = 2000;
/// Effort of one inexact x-step.
const CHEAP_SWEEPS: usize = 20;
const CHEAP_NEWTON: usize = 2;
/// Retries of an inexact x-step, each with doubled effort, before
/// switching to exact ones.
const CHEAP_RETRIES: u32 = 2;
const MAX_MULTIPLIER_STEPS: usize = 200;
/// Initial augmented-Lagrangian weight relative to the `1/n` score
/// metric. The weight grows by `RHO_GROWTH` whenever a multiplier round
/// fails to shrink the constraint violation by `RHO_SHRINK`.
const OMEGA: f64 = 10.0;
const RHO_GROWTH: f64 = 10.0;
const RHO_SHRINK: f64 = 0.25;
const MAX_RHO_RAISES: usize = 3;

/// Inverse of the active-set Newton Hessian, applied to a matrix.
type MatSolve<'a> = Box<dyn Fn(&DMatrix<f64>) -> DMatrix<f64> + 'a>;

pub fn fit_components_sparse(
    dm: &DesignMatrices,
    tau: f64,
    lambda: f64,
    eta: f64,
    k_max: usize,
) -> Result<ComponentSet> {
    let factor = SpectralFactor::new(dm, eta)?;
    fit_sparse_with(dm, &factor, tau, lambda, k_max)
}

/// Sparse fit reusing a precomputed factor; `η` is the factor's.
pub fn fit_sparse_with(
    dm: &DesignMatrices,
    factor: &SpectralFactor,
    tau: f64,
    lambda: f64,
    k_max: usize,
) -> Result<ComponentSet> {
    let config = PenaltyConfig::sparse(tau, lambda, factor.eta);
    config.validate()?;
    if k_max == 0 {
        return invalid("at least one component must be requested");
    }
    let kernel = SmoothKernel::new(dm, factor, tau)?;
    let solver = Solver::new(dm, factor, tau, lambda);
    let cap = component_cap(dm, k_max);

    // (a, s) in basis coordinates and the whitened coefficients of each
    // accepted component.
    let mut prev: Vec<(DVector<f64>, DVector<f64>)> = Vec::new();
    let mut prev_x: Vec<DVector<f64>> = Vec::new();
    let mut comps = Vec::with_capacity(cap);
    for _ in 0..cap {
        if prev.len() < comps.len() {
            comps.push(None);
            continue;
        }
        let scores: Vec<&DVector<f64>> = prev.iter().map(|(_, s)| s).collect();
        let dir = kernel.direction(&scores);
        let Some((_, x0)) = dir else {
            comps.push(None);
            continue;
        };
        let constraint = Constraint::new(&prev, &prev_x, dm.n());
        let (x, value, diag) = solver.component(x0, &constraint);
        let a = factor.whitener.to_coeffs(&x);
        match finish_component(dm, a, &prev) {
            Some((a, s)) => {
                prev_x.push(factor.whitener.to_whitened(&a));
                prev.push((a.clone(), s.clone()));
                comps.push(Some((a, s, value, diag)));
            }
            None => comps.push(None),
        }
    }
    Ok(assemble(dm, comps, config))
}

/// Earlier components seen from the current one.
struct Constraint {
    /// n×(k−1) orthonormal basis of earlier scores.
    q: DMatrix<f64>,
    /// Unit-variance earlier scores and their whitened coefficients.
    scores: Vec<DVector<f64>>,
    coeffs: Vec<DVector<f64>>,
}

impl Constraint {
    fn new(prev: &[(DVector<f64>, DVector<f64>)], prev_x: &[DVector<f64>], n: usize) -> Self {
        let scale = 1.0 / (n as f64).sqrt();
        let mut q = DMatrix::zeros(n, prev.len());
        for (c, (_, s)) in prev.iter().enumerate() {
            q.set_column(c, &(s * scale));
        }
        Constraint {
            q,
            scores: prev.iter().map(|(_, s)| s.clone()).collect(),
            coeffs: prev_x.to_vec(),
        }
    }

    fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Cached quantities of one active set, valid within a component.
struct Support {
    active: Vec<usize>,
    /// Columns of `Z_w` on the active blocks.
    za: DMatrix<f64>,
    /// `(W^{1/2} Z_A)ᵀ`
    zv: DMatrix<f64>,
    /// `Qᵀ Z_A`
    cmat: DMatrix<f64>,
    /// `Z_Aᵀ Yc / n`
    ay: DMatrix<f64>,
    /// `zv zvᵀ` for active sets no wider than `n + 1`.
    gram: Option<DMatrix<f64>>,
    /// Per-block `zv_bᵀ zv_b` for wider active sets, when they fit in
    /// memory.
    block_grams: Option<Vec<DMatrix<f64>>>,
}

/// The few most recent supports; coordinate descent and Newton often
/// alternate between neighbouring ones.
type SupportCache = RefCell<Vec<Rc<Support>>>;

const SUPPORT_CACHE_LEN: usize = 4;

/// Augmented-Lagrangian weight with the caches that depend on it.
struct Penalty {
    rho: f64,
    eig: BlockEigens,
    cache: SupportCache,
    raises: usize,
}

impl Penalty {
    fn new(p: usize, rho: f64) -> Self {
        Penalty {
            rho,
            eig: BlockEigens::new(p, rho),
            cache: SupportCache::default(),
            raises: 0,
        }
    }

    fn can_raise(&self) -> bool {
        self.rho > 0.0 && self.raises < MAX_RHO_RAISES
    }

    fn raise(&mut self, p: usize) {
        self.raises += 1;
        self.rho *= RHO_GROWTH;
        self.eig = BlockEigens::new(p, self.rho);
        self.cache.borrow_mut().clear();
    }
}

/// Memory cap, in entries, of the per-block Gram cache.
const MAX_GRAM_ENTRIES: usize = 15_000_000;

struct NewtonOut {
    nu: DVector<f64>,
    settled: bool,
    /// `m×m` matrix `M` with `uᵀMu` the x-step value at `u` on the
    /// current support.
    curvature: DMatrix<f64>,
}

/// Per-block eigendecomposition of `A_j = Z_jᵀ W Z_j + τI`.
struct BlockEigen {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
}

/// Block eigendecompositions computed on first use; most blocks of a
/// sparse fit never leave zero and never need one.
struct BlockEigens {
    cells: Vec<OnceCell<BlockEigen>>,
    rho: f64,
}

impl BlockEigens {
    fn new(p: usize, rho: f64) -> Self {
        BlockEigens {
            cells: (0..p).map(|_| OnceCell::new()).collect(),
            rho,
        }
    }

    fn cached(&self, j: usize) -> Option<&BlockEigen> {
        self.cells[j].get()
    }

    fn get(&self, solver: &Solver<'_>, j: usize, cons: &Constraint) -> &BlockEigen {
        self.cells[j].get_or_init(|| solver.block_eigen(j, cons, self.rho))
    }
}

struct Solver<'a> {
    zw: &'a DMatrix<f64>,
    yc: &'a DMatrix<f64>,
    factor: &'a SpectralFactor,
    n: f64,
    p: usize,
    d: usize,
    tau: f64,
    lambda: f64,
}

/// Iterate of the block coordinate descent.
#[derive(Clone)]
struct State {
    x: DVector<f64>,
    /// `Z_w x`
    r: DVector<f64>,
    /// `W r`
    wr: DVector<f64>,
    norms: Vec<f64>,
}

impl<'a> Solver<'a> {
    fn new(dm: &'a DesignMatrices, factor: &'a SpectralFactor, tau: f64, lambda: f64) -> Self {
        Solver {
            zw: &factor.zw,
            yc: &dm.yc,
            factor,
            n: dm.n() as f64,
            p: factor.p,
            d: factor.d,
            tau,
            lambda,
        }
    }

    fn block(&self, j: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.zw.view((0, j * self.d), (self.zw.nrows(), self.d))
    }

    /// `Z_w x`, skipping zero blocks.
    fn scores(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = self.d;
        let mut out = DVector::zeros(self.zw.nrows());
        for j in 0..self.p {
            let xj = x.rows(j * d, d);
            if xj.iter().any(|v| *v != 0.0) {
                out.gemv(1.0, &self.block(j), &xj, 1.0);
            }
        }
        out
    }

    fn norms(&self, x: &DVector<f64>) -> Vec<f64> {
        x.as_slice()
            .chunks(self.d)
            .map(|b| b.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// Penalized quotient of a whitened coefficient vector.
    fn quotient(&self, x: &DVector<f64>) -> f64 {
        let s = self.scores(x);
        let num = self.yc.tr_mul(&s).norm_squared() / (self.n * self.n);
        let norms = self.norms(x);
        let sq: f64 = norms.iter().map(|v| v * v).sum();
        let lin: f64 = norms.iter().sum();
        let den = s.norm_squared() / self.n
            + self.tau * ((1.0 - self.lambda) * sq + self.lambda * lin * lin);
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    /// Exact projection of the score onto the complement of earlier
    /// scores, carried over to the coefficients.
    fn polish(&self, x: &DVector<f64>, cons: &Constraint) -> DVector<f64> {
        if cons.is_empty() {
            return x.clone();
        }
        let s = self.scores(x);
        let mut out = x.clone();
        for (ps, px) in cons.scores.iter().zip(&cons.coeffs) {
            let c = ps.dot(&s) / self.n;
            out.axpy(-c, px, 1.0);
        }
        out
    }

    fn apply_w(&self, v: &DVector<f64>, cons: &Constraint, rho: f64) -> DVector<f64> {
        let mut out = v / self.n;
        if !cons.is_empty() {
            out += &cons.q * (cons.q.tr_mul(v) * rho);
        }
        out
    }

    fn block_eigen(&self, j: usize, cons: &Constraint, rho: f64) -> BlockEigen {
        if cons.is_empty() {
            let e = &self.factor.block_eigen()[j];
            return BlockEigen {
                values: e.eigenvalues.map(|v| v.max(0.0) / self.n + self.tau),
                vectors: e.eigenvectors.clone(),
            };
        }
        let zj = self.block(j);
        let cj = cons.q.tr_mul(&zj);
        let a = zj.transpose() * zj / self.n
            + cj.transpose() * cj * rho
            + DMatrix::identity(self.d, self.d) * self.tau;
        let e = ((&a + a.transpose()) * 0.5).symmetric_eigen();
        BlockEigen {
            values: e.eigenvalues,
            vectors: e.eigenvectors,
        }
    }

    fn state(&self, x: DVector<f64>, cons: &Constraint, rho: f64) -> State {
        let r = self.scores(&x);
        let wr = self.apply_w(&r, cons, rho);
        let norms = self.norms(&x);
        State { x, r, wr, norms }
    }

    /// Minimizes `x ↦ xᵀ A_j x + 2κ‖x‖ − 2βᵀx` for one block.
    fn block_solution(&self, beta: &DVector<f64>, kappa: f64, eig: &BlockEigen) -> DVector<f64> {
        let bn = beta.norm();
        if bn <= kappa || bn == 0.0 {
            return DVector::zeros(beta.len());
        }
        let bt = eig.vectors.tr_mul(beta);
        let solve = |mu: f64| {
            DVector::from_iterator(
                bt.len(),
                bt.iter().zip(eig.values.iter()).map(|(b, l)| b / (l + mu)),
            )
        };
        if kappa == 0.0 {
            return &eig.vectors * solve(0.0);
        }
        // Root of g(μ) = 1/‖(A+μI)⁻¹β‖ − μ/κ on [0, κλ_max/(‖β‖−κ)];
        // g is concave-like and decreasing, so safeguarded Newton works.
        let lmax = eig.values.max();
        let (mut lo, mut hi) = (0.0, kappa * lmax / (bn - kappa));
        let mut mu = 0.5 * hi;
        for _ in 0..200 {
            let y = solve(mu);
            let yn = y.norm();
            let g = 1.0 / yn - mu / kappa;
            if g > 0.0 {
                lo = mu;
            } else {
                hi = mu;
            }
            // d‖y‖/dμ = −Σ b²/(l+μ)³ / ‖y‖
            let s3: f64 = bt
                .iter()
                .zip(eig.values.iter())
                .map(|(b, l)| b * b / (l + mu).powi(3))
                .sum();
            let dg = s3 / (yn * yn * yn) - 1.0 / kappa;
            let mut next = mu - g / dg;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            let done = (next - mu).abs() <= 1e-15 * mu.max(1e-300) || hi - lo <= 1e-15 * hi;
            mu = next;
            if done {
                break;
            }
        }
        &eig.vectors * solve(mu)
    }

    /// One pass over the active blocks, or over all blocks when `full`;
    /// returns the largest block change. A full pass visits the active
    /// blocks first and takes the gradients of the zero blocks from one
    /// product with `Z_wᵀ`, which stays valid while they remain zero.
    #[allow(clippy::too_many_arguments)]
    fn sweep(
        &self,
        st: &mut State,
        target: &DVector<f64>,
        eig: &BlockEigens,
        cons: &Constraint,
        rho: f64,
        full: bool,
    ) -> f64 {
        let d = self.d;
        let mut total: f64 = st.norms.iter().sum();
        let mut max_change: f64 = 0.0;
        let mut resid = target - &st.wr;
        let mut order: Vec<usize> = (0..self.p).filter(|&j| st.norms[j] > 0.0).collect();
        if full {
            order.extend((0..self.p).filter(|&j| st.norms[j] == 0.0));
        }
        // Z_wᵀ resid at a snapshot, and how far resid has moved since.
        let mut grad: Option<(DVector<f64>, Option<DVector<f64>>)> = None;
        for j in order {
            let zj = self.block(j);
            let xj = st.x.rows(j * d, d).into_owned();
            // β = Z_jᵀ(target − W r) + Z_jᵀ W Z_j x_j
            let mut beta = if full && st.norms[j] == 0.0 {
                let (g, drift) = grad.get_or_insert_with(|| (self.zw.tr_mul(&resid), None));
                let mut b = g.rows(j * d, d).into_owned();
                if let Some(drift) = drift {
                    b -= zj.tr_mul(drift);
                }
                b
            } else {
                zj.tr_mul(&resid)
            };
            let active = st.norms[j] > 0.0;
            if active {
                match eig.cached(j) {
                    // Z_jᵀ W Z_j = A_j − τI from the block eigendecomposition
                    Some(e) => {
                        let mut t = e.vectors.tr_mul(&xj);
                        t.zip_apply(&e.values, |v, l| *v *= l - self.tau);
                        beta.gemv(1.0, &e.vectors, &t, 1.0);
                    }
                    None => beta += zj.tr_mul(&self.apply_w(&(zj * &xj), cons, rho)),
                }
            }
            let others = (total - st.norms[j]).max(0.0);
            let kappa = self.tau * self.lambda * others;
            let (new, dr, dwr) = if beta.norm() <= kappa {
                if !active {
                    continue;
                }
                let zx = zj * &xj;
                let wzx = self.apply_w(&zx, cons, rho);
                (DVector::zeros(d), -zx, -wzx)
            } else {
                let new = self.block_solution(&beta, kappa, eig.get(self, j, cons));
                let dr = zj * (&new - &xj);
                let dwr = self.apply_w(&dr, cons, rho);
                (new, dr, dwr)
            };
            let change = (&new - &xj).norm();
            if change == 0.0 {
                continue;
            }
            max_change = max_change.max(change);
            if let Some((_, drift)) = &mut grad {
                match drift {
                    Some(v) => *v += &dwr,
                    None => *drift = Some(dwr.clone()),
                }
            }
            st.r += &dr;
            st.wr += &dwr;
            resid -= &dwr;
            st.x.rows_mut(j * d, d).copy_from(&new);
            let nn = new.norm();
            total += nn - st.norms[j];
            st.norms[j] = nn;
        }
        max_change
    }

    /// Block coordinate descent on `rᵀWr + pen(x) − 2 targetᵀr`, with
    /// an active-set inner loop, until block changes fall below
    /// `tol·‖x‖` or `max_sweeps` passes are spent.
    #[allow(clippy::too_many_arguments)]
    fn coordinate_descent(
        &self,
        st: &mut State,
        target: &DVector<f64>,
        eig: &BlockEigens,
        cons: &Constraint,
        rho: f64,
        tol: f64,
        max_sweeps: usize,
    ) {
        let mut sweeps = 0;
        while sweeps < max_sweeps {
            // refresh accumulated quantities against drift
            st.r = self.scores(&st.x);
            st.wr = self.apply_w(&st.r, cons, rho);
            let full = self.sweep(st, target, eig, cons, rho, true);
            sweeps += 1;
            let scale = st.x.norm().max(f64::MIN_POSITIVE);
            if full <= tol * scale {
                break;
            }
            while sweeps < max_sweeps {
                let change = self.sweep(st, target, eig, cons, rho, false);
                sweeps += 1;
                if change <= tol * st.x.norm().max(f64::MIN_POSITIVE) {
                    break;
                }
            }
        }
    }

    /// `½ rᵀWr + ½ pen(x) − baseᵀr` for `r = Z_w x`.
    fn half_objective(
        &self,
        x: &DVector<f64>,
        r: &DVector<f64>,
        base: &DVector<f64>,
        cons: &Constraint,
        rho: f64,
    ) -> f64 {
        let wr = self.apply_w(r, cons, rho);
        let norms = self.norms(x);
        let sq: f64 = norms.iter().map(|v| v * v).sum();
        let lin: f64 = norms.iter().sum();
        0.5 * r.dot(&wr) + 0.5 * self.tau * ((1.0 - self.lambda) * sq + self.lambda * lin * lin)
            - base.dot(r)
    }

    /// Newton iterations on the active blocks with `Qᵀ Z_w x = 0`
    /// imposed exactly. The Hessian is block diagonal plus a low-rank
    /// term; it is factored densely for small active sets and through
    /// the Woodbury identity otherwise. A block whose optimal value given
    /// the others is zero leaves the active set, since Newton only
    /// approaches the kink of `‖x_j‖` geometrically. Returns the
    /// constraint multipliers and whether the iteration settled, or
    /// `None` when no block is active or the linear algebra breaks down.
    #[allow(clippy::too_many_arguments)]
    fn newton(
        &self,
        st: &mut State,
        base: &DVector<f64>,
        cons: &Constraint,
        rho: f64,
        max_iter: usize,
        nu_start: &DVector<f64>,
        cache: &SupportCache,
    ) -> Option<NewtonOut> {
        let d = self.d;
        let n = self.zw.nrows();
        let len = st.x.len();
        let ridge = self.tau * (1.0 - self.lambda);
        let a = ridge.max(1e-12 * self.tau);
        let tl = self.tau * self.lambda;
        let mut nu = nu_start.clone();
        let mut solved = false;
        let mut settled = false;
        let mut curvature = None;
        let mut iter = 0;
        'active: loop {
            let active: Vec<usize> = (0..self.p).filter(|&j| st.norms[j] > 0.0).collect();
            if active.is_empty() {
                break;
            }
            let na = active.len() * d;
            let sup = {
                let mut slots = cache.borrow_mut();
                match slots.iter().position(|sup| sup.active == active) {
                    Some(i) => {
                        let sup = slots.remove(i);
                        slots.push(Rc::clone(&sup));
                        sup
                    }
                    None => {
                        let sup = Rc::new(self.support(active.clone(), cons, rho));
                        if slots.len() == SUPPORT_CACHE_LEN {
                            slots.remove(0);
                        }
                        slots.push(Rc::clone(&sup));
                        sup
                    }
                }
            };
            let (za, zv, cmat, ay) = (&sup.za, &sup.zv, &sup.cmat, &sup.ay);
            let kc = cmat.nrows();
            let m = ay.ncols();
            let full_x = |xa: &DVector<f64>| {
                let mut x = DVector::zeros(len);
                for (b, &j) in active.iter().enumerate() {
                    x.rows_mut(j * d, d).copy_from(&xa.rows(b * d, d));
                }
                x
            };
            let mut xa = DVector::zeros(na);
            for (b, &j) in active.iter().enumerate() {
                xa.rows_mut(b * d, d).copy_from(&st.x.rows(j * d, d));
            }
            let mut feasible = cmat.is_empty() || (cmat * &xa).norm() <= 1e-12 * (za * &xa).norm();
            while iter < max_iter {
                iter += 1;
                let norms: Vec<f64> = (0..active.len())
                    .map(|b| xa.rows(b * d, d).norm())
                    .collect();
                let total: f64 = norms.iter().sum();
                let r = za * &xa;
                let wr = self.apply_w(&r, cons, rho);

                let target = base + &cons.q * &nu;
                let resid = za.tr_mul(&(&target - &wr));
                let drop: Vec<usize> = (0..active.len())
                    .filter(|&b| {
                        let zb = zv.rows(b * d, d);
                        let beta = resid.rows(b * d, d) + zb * zb.tr_mul(&xa.rows(b * d, d));
                        norms[b] == 0.0 || beta.norm() <= tl * (total - norms[b])
                    })
                    .collect();
                if !drop.is_empty() && drop.len() < active.len() {
                    for b in drop {
                        xa.rows_mut(b * d, d).fill(0.0);
                    }
                    st.x = full_x(&xa);
                    st.norms = self.norms(&st.x);
                    continue 'active;
                }
                if norms.contains(&0.0) {
                    break;
                }

                let mut grad = za.tr_mul(&(wr - base)) + &xa * ridge;
                let mut g = DVector::zeros(na);
                for (b, nb) in norms.iter().enumerate() {
                    let unit = xa.rows(b * d, d) / *nb;
                    grad.rows_mut(b * d, d).axpy(tl * total, &unit, 1.0);
                    g.rows_mut(b * d, d).copy_from(&unit);
                }
                // B_b = c_b (I − uuᵀ) + a uuᵀ with c_b = a + τλ·total/‖x_b‖
                let cb: Vec<f64> = norms.iter().map(|nb| a + tl * total / nb).collect();
                let hinv: MatSolve<'_> = if let Some(gram) = &sup.gram {
                    let mut h = gram.clone();
                    for (b, &cv) in cb.iter().enumerate() {
                        let u = g.rows(b * d, d);
                        let mut hb = h.view_mut((b * d, b * d), (d, d));
                        hb += u * u.transpose() * (a - cv);
                        for i in 0..d {
                            hb[(i, i)] += cv;
                        }
                    }
                    h.ger(tl, &g, &g, 1.0);
                    let chol = h.cholesky()?;
                    Box::new(move |v: &DMatrix<f64>| chol.solve(v))
                } else {
                    let binv = |m: &DMatrix<f64>| -> DMatrix<f64> {
                        let mut out = m.clone();
                        for (b, &cv) in cb.iter().enumerate() {
                            let u = g.rows(b * d, d);
                            let mut ob = out.rows_mut(b * d, d);
                            let along = u.tr_mul(&ob) * (1.0 / a - 1.0 / cv);
                            ob /= cv;
                            ob += u * along;
                        }
                        out
                    };
                    let mut u = DMatrix::zeros(na, n + 1);
                    u.columns_mut(0, n).copy_from(zv);
                    u.set_column(n, &(&g * tl.sqrt()));
                    let bu = binv(&u);
                    let inner = match &sup.block_grams {
                        Some(grams) => {
                            // Σ_b P_b/c_b + Σ_b (1/a − 1/c_b) v_b v_bᵀ with
                            // v_b = zv_bᵀ u_b, plus the border for g
                            let mut top = DMatrix::zeros(n, n);
                            let mut vw = DMatrix::zeros(n, cb.len());
                            let mut vs = DMatrix::zeros(n, cb.len());
                            for (b, &cv) in cb.iter().enumerate() {
                                top.zip_apply(&grams[b], |x, y| *x += y / cv);
                                let v = zv.rows(b * d, d).tr_mul(&g.rows(b * d, d));
                                vw.set_column(b, &(&v * (1.0 / a - 1.0 / cv)));
                                vs.set_column(b, &v);
                            }
                            top.gemm(1.0, &vw, &vs.transpose(), 1.0);
                            let border = zv.tr_mul(&g) * (tl.sqrt() / a);
                            let mut t = DMatrix::zeros(n + 1, n + 1);
                            t.view_mut((0, 0), (n, n)).copy_from(&top);
                            t.view_mut((0, n), (n, 1)).copy_from(&border);
                            t.view_mut((n, 0), (1, n)).copy_from(&border.transpose());
                            t[(n, n)] = tl * cb.len() as f64 / a;
                            t
                        }
                        None => u.transpose() * &bu,
                    };
                    let cap = (DMatrix::identity(n + 1, n + 1) + inner).cholesky()?;
                    Box::new(move |v: &DMatrix<f64>| {
                        let bv = binv(v);
                        let corr = cap.solve(&(u.transpose() * &bv));
                        bv - &bu * corr
                    })
                };
                let mut rhs = DMatrix::zeros(na, 1 + kc + m);
                rhs.set_column(0, &grad);
                for i in 0..kc {
                    rhs.set_column(1 + i, &cmat.row(i).transpose());
                }
                rhs.columns_mut(1 + kc, m).copy_from(ay);
                let sol = hinv(&rhs);
                let hg = sol.column(0).into_owned();
                let mut ha = sol.columns(1 + kc, m).into_owned();
                let dx = if kc == 0 {
                    -hg
                } else {
                    let hc = sol.columns(1, kc);
                    let schur = (cmat * hc).cholesky()?;
                    ha -= hc * schur.solve(&(cmat * &ha));
                    nu = schur.solve(&(cmat * &hg - cmat * &xa));
                    hc * &nu - hg
                };
                curvature = Some(ay.tr_mul(&ha));
                solved = true;
                if !dx.iter().all(|v| v.is_finite()) {
                    return None;
                }
                let step_norm = dx.norm();
                let f0 = self.half_objective(&full_x(&xa), &r, base, cons, rho);
                let mut alpha = 1.0;
                let mut accepted = false;
                for _ in 0..40 {
                    let cand = &xa + &dx * alpha;
                    if !feasible {
                        // the full step lands on the constraint set
                        xa = cand;
                        accepted = true;
                        break;
                    }
                    let rc = za * &cand;
                    let f1 = self.half_objective(&full_x(&cand), &rc, base, cons, rho);
                    if f1 <= f0 + 1e-14 * f0.abs() {
                        xa = cand;
                        accepted = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                let was_feasible = feasible;
                feasible = true;
                let xn = xa.norm();
                if !accepted
                    || alpha * step_norm <= 1e-13 * xn
                    || (was_feasible && alpha == 1.0 && step_norm <= 1e-9 * xn)
                {
                    settled = true;
                    break;
                }
            }
            st.x = full_x(&xa);
            break;
        }
        st.r = self.scores(&st.x);
        st.wr = self.apply_w(&st.r, cons, rho);
        st.norms = self.norms(&st.x);
        solved.then(|| NewtonOut {
            nu,
            settled,
            curvature: curvature.expect("set with the multipliers"),
        })
    }

    fn support(&self, active: Vec<usize>, cons: &Constraint, rho: f64) -> Support {
        let d = self.d;
        let n = self.zw.nrows();
        let na = active.len() * d;
        let mut za = DMatrix::zeros(n, na);
        for (b, &j) in active.iter().enumerate() {
            za.columns_mut(b * d, d).copy_from(&self.block(j));
        }
        // W^{1/2} = I/√n + c QQᵀ with Q orthonormal
        let sn = 1.0 / self.n.sqrt();
        let c = (1.0 / self.n + rho).sqrt() - sn;
        let mut zv = za.transpose() * sn;
        if !cons.is_empty() {
            zv += (za.transpose() * &cons.q * c) * cons.q.transpose();
        }
        let gram = (na <= n + 1).then(|| &zv * zv.transpose());
        let block_grams = (gram.is_none() && active.len() * n * n <= MAX_GRAM_ENTRIES).then(|| {
            (0..active.len())
                .map(|b| {
                    let zb = zv.rows(b * d, d);
                    zb.transpose() * zb
                })
                .collect()
        });
        let cmat = cons.q.transpose() * &za;
        let ay = za.transpose() * self.yc / self.n;
        Support {
            active,
            za,
            zv,
            cmat,
            ay,
            gram,
            block_grams,
        }
    }

    /// Rescales the iterate to the best multiple for `target`. Any
    /// decrease of the x-step objective from there raises the quotient.
    fn rescale(&self, st: &mut State, target: &DVector<f64>) {
        let sq: f64 = st.norms.iter().map(|v| v * v).sum();
        let lin: f64 = st.norms.iter().sum();
        let den =
            st.r.dot(&st.wr) + self.tau * ((1.0 - self.lambda) * sq + self.lambda * lin * lin);
        let t = target.dot(&st.r) / den;
        if t > 0.0 && t.is_finite() {
            st.x *= t;
            st.r *= t;
            st.wr *= t;
            st.norms.iter_mut().for_each(|v| *v *= t);
        }
    }

    /// Largest ratio of a zero block's gradient norm to its threshold
    /// under the multipliers `nu`; at most one at a solution.
    fn zero_block_ratio(
        &self,
        st: &State,
        base: &DVector<f64>,
        cons: &Constraint,
        rho: f64,
        nu: &DVector<f64>,
    ) -> f64 {
        let d = self.d;
        let target = base + &cons.q * nu;
        let res = self.zw.tr_mul(&(target - self.apply_w(&st.r, cons, rho)));
        let kappa = self.tau * self.lambda * st.norms.iter().sum::<f64>();
        (0..self.p)
            .filter(|&j| st.norms[j] == 0.0)
            .map(|j| res.rows(j * d, d).norm() / kappa)
            .fold(0.0, f64::max)
    }

    /// Minimizes `rᵀWr + pen(x) − 2 baseᵀr` subject to `Qᵀr = 0`.
    /// Coordinate descent on the augmented Lagrangian with the usual
    /// multiplier update drives the support to the optimal one; Newton
    /// on the current support finishes the job once the optimality
    /// conditions of the zero blocks hold. With `effort = Some(level)` a
    /// single inexact round scaled by `2^level` is taken instead, which
    /// is usually enough for ascent of the quotient.
    fn minimize(
        &self,
        st: &mut State,
        base: &DVector<f64>,
        pen: &mut Penalty,
        cons: &Constraint,
        nu: &mut DVector<f64>,
        effort: Option<u32>,
    ) -> Option<DMatrix<f64>> {
        let rho = pen.rho;
        let (eig, cache) = (&pen.eig, &pen.cache);
        let target = base + &cons.q * &*nu;
        self.rescale(st, &target);
        if let Some(level) = effort {
            self.coordinate_descent(
                st,
                &target,
                eig,
                cons,
                rho,
                SCREEN_TOL,
                CHEAP_SWEEPS << level,
            );
            let res = self.newton(st, base, cons, rho, CHEAP_NEWTON << level, nu, cache);
            return match res {
                Some(out) => {
                    *nu = out.nu;
                    Some(out.curvature)
                }
                None => {
                    let viol = cons.q.tr_mul(&st.r);
                    *nu -= &viol * rho;
                    None
                }
            };
        }
        let tol = 1e-11 * st.r.norm().max(f64::MIN_POSITIVE);
        let mut last_viol = f64::INFINITY;
        // Newton is tried from a rough screening first; every failed
        // trial tightens the screening.
        let mut screen = LOOSE_SCREEN_TOL;
        for _ in 0..MAX_MULTIPLIER_STEPS {
            let rho = pen.rho;
            let (eig, cache) = (&pen.eig, &pen.cache);
            let target = base + &cons.q * &*nu;
            self.coordinate_descent(st, &target, eig, cons, rho, screen, ROUND_SWEEPS);
            screen = (screen * 0.1).max(SCREEN_TOL);
            let viol = cons.q.tr_mul(&st.r);
            let next = &*nu - &viol * rho;
            let mut trial = st.clone();
            if let Some(out) = self.newton(&mut trial, base, cons, rho, 50, &next, cache) {
                let feasible = cons.q.tr_mul(&trial.r).norm() <= tol;
                if out.settled
                    && feasible
                    && self.zero_block_ratio(&trial, base, cons, rho, &out.nu) <= 1.0 + 1e-9
                {
                    *st = trial;
                    *nu = out.nu;
                    return Some(out.curvature);
                }
            }
            *nu = next;
            if viol.norm() <= tol {
                // Coordinate descent alone has converged; a final tight
                // pass settles it.
                let target = base + &cons.q * &*nu;
                self.coordinate_descent(st, &target, eig, cons, rho, INNER_TOL, MAX_SWEEPS);
                return None;
            }
            let vn = viol.norm();
            if vn > RHO_SHRINK * last_viol && pen.can_raise() {
                pen.raise(self.p);
                st.wr = self.apply_w(&st.r, cons, pen.rho);
                last_viol = f64::INFINITY;
            } else {
                last_viol = vn;
            }
        }
        None
    }

    /// Solves for one component starting from the whitened direction `x0`.
    fn component(
        &self,
        x0: DVector<f64>,
        cons: &Constraint,
    ) -> (DVector<f64>, f64, ComponentDiagnostics) {
        let rho = if cons.is_empty() {
            0.0
        } else {
            OMEGA * (1.0 + self.tau) / self.n
        };
        let mut pen = Penalty::new(self.p, rho);

        let mut best = self.polish(&x0, cons);
        let mut obj = self.quotient(&best);
        let mut trace = vec![obj];
        let mut st = self.state(x0, cons, rho);
        let mut nu = DVector::zeros(cons.q.ncols());
        let mut converged = false;
        let mut iterations = 0;

        // Cheap x-steps until progress stalls, then exact ones to confirm.
        // The next `u` is the top eigenvector of the local curvature when
        // one is available, which converges much faster than the plain
        // alternation; a proposal that lowers the quotient is discarded.
        // inexact x-steps carry their effort level; `None` is exact
        let mut effort = Some(0);
        let mut u = self.direction_u(&best);
        let mut proposed = false;
        let mut failed_proposals = 0;
        for it in 1..=MAX_OUTER {
            iterations = it;
            let Some(ref uu) = u else { break };
            let base = self.yc * uu / self.n;
            let curvature = self.minimize(&mut st, &base, &mut pen, cons, &mut nu, effort);
            let cand = self.polish(&st.x, cons);
            let new_obj = if st.x.iter().all(|v| *v == 0.0) {
                f64::NEG_INFINITY
            } else {
                self.quotient(&cand)
            };
            if new_obj < obj {
                if proposed {
                    failed_proposals += 1;
                    proposed = false;
                    st = self.state(best.clone(), cons, pen.rho);
                    u = self.direction_u(&best);
                    continue;
                }
                match effort {
                    // retry from where the inexact step stopped
                    Some(level) if level < CHEAP_RETRIES => {
                        effort = Some(level + 1);
                        continue;
                    }
                    Some(_) => {
                        effort = None;
                        st = self.state(best.clone(), cons, pen.rho);
                        continue;
                    }
                    None => {}
                }
                // A step that lowers the quotient is numerical noise at a
                // fixed point; keep the previous iterate.
                converged = obj - new_obj <= 1e-9 * obj;
                break;
            }
            let rel = (new_obj - obj) / obj.max(f64::MIN_POSITIVE);
            trace.push(new_obj);
            obj = new_obj;
            best = cand;
            let power = self.direction_u(&best);
            proposed = false;
            u = match (curvature, power) {
                (Some(m), Some(pu)) if failed_proposals < 2 => {
                    let e = ((&m + m.transpose()) * 0.5).symmetric_eigen();
                    let top = e.eigenvalues.imax();
                    let mut v = e.eigenvectors.column(top).into_owned();
                    if v.dot(&pu) < 0.0 {
                        v.neg_mut();
                    }
                    proposed = (&v - &pu).norm() > 1e-12;
                    Some(if proposed { v } else { pu })
                }
                (_, pu) => pu,
            };
            if rel < OUTER_TOL {
                if effort.is_none() {
                    converged = true;
                    break;
                }
                effort = None;
            }
        }
        let diag = ComponentDiagnostics {
            iterations,
            converged,
            objective_trace: trace,
        };
        (best, obj, diag)
    }

    fn direction_u(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let g = self.yc.tr_mul(&self.scores(x));
        let nrm = g.norm();
        (nrm > 0.0).then(|| g / nrm)
    }
}
