//! Clamped B-spline bases on `[0, 1]`.
//!
//! A [`BasisSpec`] carries the knot vector together with the two Gram
//! matrices every function-space inner product is discretized through:
//! the L² Gram `G[i][j] = ∫ B_i B_j` and the roughness matrix
//! `H[i][j] = ∫ B_i'' B_j''`. Both are integrated exactly span by span
//! with Gauss-Legendre quadrature, so they do not depend on any
//! observation grid.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// B-spline system with its Gram and roughness matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisRepr", into = "BasisRepr")]
pub struct BasisSpec {
    degree: usize,
    dim: usize,
    knots: Vec<f64>,
    gram: DMatrix<f64>,
    roughness: DMatrix<f64>,
}

/// On-disk form: the knot vector is enough to rebuild everything else.
#[derive(Serialize, Deserialize)]
struct BasisRepr {
    degree: usize,
    dim: usize,
    knots: Vec<f64>,
}

impl From<BasisSpec> for BasisRepr {
    fn from(b: BasisSpec) -> Self {
        BasisRepr {
            degree: b.degree,
            dim: b.dim,
            knots: b.knots,
        }
    }
}

impl TryFrom<BasisRepr> for BasisSpec {
    type Error = Error;

    fn try_from(r: BasisRepr) -> Result<Self> {
        BasisSpec::with_knots(r.degree, r.dim, r.knots)
    }
}

/// Builds a clamped basis with `dim` functions of the given degree and
/// equally spaced interior knots.
pub fn make_basis(dim: usize, degree: usize) -> Result<BasisSpec> {
    BasisSpec::new(dim, degree)
}

impl BasisSpec {
    pub fn new(dim: usize, degree: usize) -> Result<Self> {
        if dim < degree + 1 {
            return invalid(format!(
                "basis dimension {dim} is below degree + 1 = {}",
                degree + 1
            ));
        }
        let interior = dim - degree - 1;
        let mut knots = Vec::with_capacity(dim + degree + 1);
        knots.extend(std::iter::repeat_n(0.0, degree + 1));
        for i in 1..=interior {
            knots.push(i as f64 / (interior + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        Self::with_knots(degree, dim, knots)
    }

    fn with_knots(degree: usize, dim: usize, knots: Vec<f64>) -> Result<Self> {
        if dim < degree + 1 {
            return invalid("basis dimension below degree + 1");
        }
        if knots.len() != dim + degree + 1 {
            return invalid(format!(
                "expected {} knots, got {}",
                dim + degree + 1,
                knots.len()
            ));
        }
        if knots.windows(2).any(|w| !(w[0] <= w[1])) {
            return invalid("knots must be nondecreasing");
        }
        let clamped =
            knots[..=degree].iter().all(|&k| k == 0.0) && knots[dim..].iter().all(|&k| k == 1.0);
        if !clamped {
            return invalid("knot vector must be clamped to [0, 1]");
        }
        let mut spec = BasisSpec {
            degree,
            dim,
            knots,
            gram: DMatrix::zeros(dim, dim),
            roughness: DMatrix::zeros(dim, dim),
        };
        spec.integrate_grams();
        Ok(spec)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// `G[i][j] = ∫₀¹ B_i(t) B_j(t) dt`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `H[i][j] = ∫₀¹ B_i''(t) B_j''(t) dt`.
    pub fn roughness(&self) -> &DMatrix<f64> {
        &self.roughness
    }

    /// `G + ηH`, the Gram matrix of the smoothness-weighted norm.
    pub fn penalty_gram(&self, eta: f64) -> DMatrix<f64> {
        &self.gram + &self.roughness * eta
    }

    /// Index `i` of the knot span `[u_i, u_{i+1})` containing `t`; the
    /// right end point belongs to the last non-empty span.
    fn span(&self, t: f64) -> usize {
        let p = self.degree;
        let last = self.dim - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        // knots[p] = 0 <= t < knots[dim] = 1
        let (mut lo, mut hi) = (p, last + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Nonzero basis functions and their derivatives up to `order` at `t`.
    ///
    /// Returns the span index and `ders[k][r]`, the k-th derivative of
    /// `B_{span-p+r}` at `t`.
    fn local_derivs(&self, t: f64, order: usize) -> (usize, Vec<Vec<f64>>) {
        let p = self.degree;
        let u = &self.knots;
        let i = self.span(t);

        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[i + 1 - j];
            right[j] = u[i + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }

        let order = order.min(p);
        let mut ders = vec![vec![0.0; p + 1]; order + 1];
        for (j, d) in ders[0].iter_mut().enumerate() {
            *d = ndu[j][p];
        }
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=order {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize) - 1 <= pk as isize {
                    k - 1
                } else {
                    p - r
                };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r as isize <= pk as isize {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for (k, row) in ders.iter_mut().enumerate().skip(1) {
            for v in row.iter_mut() {
                *v *= factor;
            }
            factor *= (p - k) as f64;
        }
        (i, ders)
    }

    fn integrate_grams(&mut self) {
        let p = self.degree;
        let (nodes, weights) = gauss_legendre(p + 1);
        let mut g = DMatrix::zeros(self.dim, self.dim);
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for span in p..self.dim {
            let (a, b) = (self.knots[span], self.knots[span + 1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, w) in nodes.iter().zip(&weights) {
                let t = mid + half * x;
                let (i, ders) = self.local_derivs(t, 2);
                debug_assert_eq!(i, span);
                let base = i - p;
                for r in 0..=p {
                    for s in 0..=p {
                        g[(base + r, base + s)] += w * half * ders[0][r] * ders[0][s];
                        if ders.len() > 2 {
                            h[(base + r, base + s)] += w * half * ders[2][r] * ders[2][s];
                        }
                    }
                }
            }
        }
        self.gram = g;
        self.roughness = h;
    }

    /// Basis matrix with entry `(i, d) = B_d(grid[i])`.
    pub fn eval_basis(&self, grid: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(grid.len(), self.dim);
        for (row, &t) in grid.iter().enumerate() {
            check_unit(t)?;
            let (i, ders) = self.local_derivs(t, 0);
            for (r, v) in ders[0].iter().enumerate() {
                out[(row, i - self.degree + r)] = *v;
            }
        }
        Ok(out)
    }

    /// Evaluates `Σ_d c_d B_d` on a grid.
    pub fn eval_function(&self, coeffs: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.dim {
            return invalid("coefficient vector length differs from basis dimension");
        }
        grid.iter()
            .map(|&t| {
                check_unit(t)?;
                let (i, ders) = self.local_derivs(t, 0);
                let base = i - self.degree;
                Ok(ders[0]
                    .iter()
                    .enumerate()
                    .map(|(r, b)| b * coeffs[base + r])
                    .sum())
            })
            .collect()
    }

    /// Trapezoidal approximations of `∫₀¹ x(t) B_d(t) dt` from samples of
    /// `x` on `grid`.
    pub fn curve_scores(&self, curve: &[f64], grid: &[f64]) -> Result<DVector<f64>> {
        if curve.len() != grid.len() {
            return invalid(format!(
                "curve has {} values but the grid has {} points",
                curve.len(),
                grid.len()
            ));
        }
        let op = self.score_operator(grid)?;
        Ok(op.tr_mul(&DVector::from_column_slice(curve)))
    }

    /// `diag(w) · B(grid)` with trapezoid weights `w`; multiplying its
    /// transpose by a sampled curve yields the curve's basis scores.
    pub fn score_operator(&self, grid: &[f64]) -> Result<DMatrix<f64>> {
        let w = trapezoid_weights(grid)?;
        let mut b = self.eval_basis(grid)?;
        for (mut row, wi) in b.row_iter_mut().zip(&w) {
            row *= *wi;
        }
        Ok(b)
    }

    /// Greville abscissae, the averages of `degree` consecutive interior
    /// knots; collocation there is always nonsingular.
    pub fn greville(&self) -> Vec<f64> {
        let p = self.degree.max(1);
        (0..self.dim)
            .map(|d| {
                if self.degree == 0 {
                    0.5 * (self.knots[d] + self.knots[d + 1])
                } else {
                    self.knots[d + 1..d + 1 + p].iter().sum::<f64>() / p as f64
                }
            })
            .collect()
    }

    /// Coefficients of the spline interpolating `f` at the Greville points.
    pub fn interpolate(&self, f: impl Fn(f64) -> f64) -> Result<DVector<f64>> {
        let pts = self.greville();
        let colloc = self.eval_basis(&pts)?;
        let rhs = DVector::from_iterator(pts.len(), pts.iter().map(|&t| f(t)));
        colloc
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("singular collocation matrix".into()))
    }
}

fn check_unit(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return invalid(format!("grid point {t} lies outside [0, 1]"));
    }
    Ok(())
}

/// Composite trapezoid weights for a strictly increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.len() < 2 {
        return invalid("a grid needs at least two points");
    }
    if grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("grid must be finite and strictly increasing");
    }
    let n = grid.len();
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let h = 0.5 * (grid[i + 1] - grid[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    Ok(w)
}

/// `n` equally spaced points covering `[0, 1]` including both ends.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 {
                1.0
            } else if n == 1 {
                x
            } else {
                p1
            };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Plain recursive Cox-de Boor, independent of the table-based
    /// evaluation above.
    fn cox_de_boor(knots: &[f64], i: usize, p: usize, t: f64, last: usize) -> f64 {
        if p == 0 {
            let (a, b) = (knots[i], knots[i + 1]);
            return if (a <= t && t < b) || (t == 1.0 && b == 1.0 && a < b && i == last) {
                1.0
            } else {
                0.0
            };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (t - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, t, last);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - t) / d2 * cox_de_boor(knots, i + 1, p - 1, t, last);
        }
        v
    }

    #[test]
    fn rejects_too_small_dimension() {
        assert!(make_basis(3, 3).is_err());
        assert!(make_basis(4, 3).is_ok());
    }

    #[test]
    fn single_span_gram_is_bernstein_mass_matrix() {
        let b = make_basis(4, 3).unwrap();
        assert_abs_diff_eq!(b.gram()[(0, 0)], 1.0 / 7.0, epsilon = 1e-15);
        // ∫ 3t(1-t)^2 · (1-t)^3 = 3 B(2, 6) = 1/14
        assert_abs_diff_eq!(b.gram()[(0, 1)], 1.0 / 14.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.gram()[(1, 1)], 9.0 / 105.0, epsilon = 1e-15);
    }

    #[test]
    fn partition_of_unity_and_clamped_ends() {
        let b = make_basis(30, 3).unwrap();
        let grid = uniform_grid(64);
        let m = b.eval_basis(&grid).unwrap();
        for row in m.row_iter() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
            assert!(row.iter().filter(|v| **v != 0.0).count() <= 4);
        }
        assert_abs_diff_eq!(m[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m[(63, 29)], 1.0, epsilon = 1e-15);
        assert_eq!(m.row(0).iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(m.row(63).iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn evaluation_matches_recursive_definition() {
        for &(dim, deg) in &[(30, 3), (7, 2), (5, 1), (12, 4)] {
            let b = make_basis(dim, deg).unwrap();
            let grid: Vec<f64> = (0..=97).map(|i| i as f64 / 97.0).collect();
            let m = b.eval_basis(&grid).unwrap();
            for (r, &t) in grid.iter().enumerate() {
                for d in 0..dim {
                    let want = cox_de_boor(b.knots(), d, deg, t, dim - 1);
                    assert_abs_diff_eq!(m[(r, d)], want, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn out_of_range_points_are_rejected() {
        let b = make_basis(10, 3).unwrap();
        assert!(b.eval_basis(&[0.5, 1.0 + 1e-9]).is_err());
        assert!(b.eval_basis(&[-1e-12]).is_err());
    }

    #[test]
    fn affine_functions_have_zero_roughness() {
        let b = make_basis(30, 3).unwrap();
        let c = b.interpolate(|t| 2.0 * t + 1.0).unwrap();
        let q = (c.transpose() * b.roughness() * &c)[(0, 0)];
        let scale = b.roughness().amax() * c.norm_squared();
        assert!(q.abs() < 1e-14 * scale, "roughness of affine function {q}");
        // the interpolant reproduces the line
        let grid = uniform_grid(17);
        let vals = b.eval_function(c.as_slice(), &grid).unwrap();
        for (t, v) in grid.iter().zip(vals) {
            assert_abs_diff_eq!(v, 2.0 * t + 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gram_matches_fine_quadrature_of_products() {
        // Oracle: 40-point Gauss rule per span using the recursive evaluator.
        let b = make_basis(11, 3).unwrap();
        let (x, w) = gauss_legendre(40);
        let mut g = DMatrix::<f64>::zeros(11, 11);
        let breaks: Vec<f64> = {
            let mut k = b.knots().to_vec();
            k.dedup();
            k
        };
        for s in breaks.windows(2) {
            let (lo, hi) = (s[0], s[1]);
            for (xi, wi) in x.iter().zip(&w) {
                let t = 0.5 * (lo + hi) + 0.5 * (hi - lo) * xi;
                let vals: Vec<f64> = (0..11)
                    .map(|d| cox_de_boor(b.knots(), d, 3, t, 10))
                    .collect();
                for i in 0..11 {
                    for j in 0..11 {
                        g[(i, j)] += 0.5 * (hi - lo) * wi * vals[i] * vals[j];
                    }
                }
            }
        }
        assert!((&g - b.gram()).abs().max() < 1e-13);
    }

    #[test]
    fn gram_is_positive_definite_and_roughness_semidefinite() {
        for dim in [4, 10, 30, 60] {
            let b = make_basis(dim, 3).unwrap();
            assert!(b.gram().clone().cholesky().is_some());
            let sym = (b.roughness() - b.roughness().transpose()).abs().max();
            assert!(sym < 1e-9);
            let eig = b.roughness().clone().symmetric_eigen();
            let scale = eig.eigenvalues.amax();
            assert!(eig.eigenvalues.iter().all(|&l| l > -1e-10 * scale));
        }
    }

    #[test]
    fn scores_of_constant_curve_integrate_the_basis() {
        let b = make_basis(30, 3).unwrap();
        let grid = uniform_grid(64);
        let zero = b.curve_scores(&vec![0.0; 64], &grid).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));

        let ones = b.curve_scores(&vec![1.0; 64], &grid).unwrap();
        // exact ∫B_d = (u_{d+p+1} - u_d)/(p+1)
        let exact: Vec<f64> = (0..30)
            .map(|d| (b.knots()[d + 4] - b.knots()[d]) / 4.0)
            .collect();
        let total: f64 = ones.iter().sum();
        // partition of unity makes the total exact
        assert!((total - 1.0).abs() <= 1e-12);
        // trapezoid error is O(h) near the clamped ends
        for (s, e) in ones.iter().zip(&exact) {
            assert!((s - e).abs() <= 2.5e-3, "{s} {e}");
        }
    }

    #[test]
    fn scores_of_a_basis_function_approximate_a_gram_column() {
        let b = make_basis(30, 3).unwrap();
        let grid = uniform_grid(64);
        let e1 = {
            let mut c = vec![0.0; 30];
            c[1] = 1.0;
            c
        };
        let curve = b.eval_function(&e1, &grid).unwrap();
        let s = b.curve_scores(&curve, &grid).unwrap();
        let col = b.gram().column(1);
        assert!((s - col).amax() < 2e-3);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let b = make_basis(8, 3).unwrap();
        assert!(b.curve_scores(&[1.0, 2.0], &uniform_grid(3)).is_err());
    }

    #[test]
    fn serde_round_trip_rebuilds_grams() {
        let b = make_basis(13, 3).unwrap();
        let json = serde_json::to_string(&b).unwrap();
        let back: BasisSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gram_reproduces_l2_inner_products(
                a in proptest::collection::vec(-2.0f64..2.0, 9),
                c in proptest::collection::vec(-2.0f64..2.0, 9),
            ) {
                let b = make_basis(9, 3).unwrap();
                let (x, w) = gauss_legendre(12);
                let mut direct = 0.0;
                for s in [0.0, 1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0, 4.0 / 6.0, 5.0 / 6.0, 1.0].windows(2) {
                    let pts: Vec<f64> =
                        x.iter().map(|xi| 0.5 * (s[0] + s[1]) + 0.5 * (s[1] - s[0]) * xi).collect();
                    let fa = b.eval_function(&a, &pts).unwrap();
                    let fc = b.eval_function(&c, &pts).unwrap();
                    for i in 0..pts.len() {
                        direct += 0.5 * (s[1] - s[0]) * w[i] * fa[i] * fc[i];
                    }
                }
                let av = DVector::from_vec(a);
                let cv = DVector::from_vec(c);
                let viagram = (av.transpose() * b.gram() * cv)[(0, 0)];
                prop_assert!((viagram - direct).abs() <= 1e-10);
            }

            #[test]
            fn curve_scores_are_linear(
                x in proptest::collection::vec(-3.0f64..3.0, 20),
                y in proptest::collection::vec(-3.0f64..3.0, 20),
                s in -5.0f64..5.0,
            ) {
                let b = make_basis(8, 3).unwrap();
                let grid = uniform_grid(20);
                let comb: Vec<f64> = x.iter().zip(&y).map(|(a, c)| a + s * c).collect();
                let lhs = b.curve_scores(&comb, &grid).unwrap();
                let rhs = b.curve_scores(&x, &grid).unwrap() + b.curve_scores(&y, &grid).unwrap() * s;
                prop_assert!((lhs - rhs).amax() <= 1e-12);
            }
        }
    }
}
