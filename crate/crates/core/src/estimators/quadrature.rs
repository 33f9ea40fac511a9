//! Projected Gauss-Hermite quadrature.
//!
//! A point `y` is written in whitened coordinates `z = L⁻¹(y − c)` and split
//! into `u = U z` (the span of the whitened mean differences) and the
//! orthogonal remainder. Every component of every mixture built from the
//! same means is a standard normal in `u` times the same standard normal in
//! the remainder, so expectations of functions of the likelihood ratios
//! reduce to tensor Gauss-Hermite rules in `r = rank(U)` dimensions. Each
//! mixture expectation is a weighted sum of per-component rules centred at
//! that component.
//!
//! Integrands that are discontinuous across a hyperplane normal to a basis
//! axis (the Bayes halfspace reward) use a [`Split`]: that axis switches to
//! Gauss-Legendre panels on either side of the cut.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::mixture::{CovarianceModel, MixtureDensity, ProjectionBasis};
use crate::special::logsumexp;

/// Tensor nodes whose product weight falls below this are dropped.
const PRUNE: f64 = 1e-30;
/// Half-width, in standard deviations, of the Legendre panels.
const PANEL_HALF_WIDTH: f64 = 14.0;

/// Gauss-Hermite rule for the physicists' weight `e^{−x²}`.
///
/// Nodes start from the Golub-Welsch eigenvalues of the Jacobi matrix and
/// are polished by Newton steps on the normalized recurrence; weights come
/// from the recurrence derivative, which keeps the far-tail weights
/// accurate in relative terms.
pub fn gauss_hermite_physicists(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jac = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let mut roots: Vec<f64> = jac.symmetric_eigenvalues().iter().cloned().collect();
    roots.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for (i, &z0) in roots.iter().enumerate() {
        let mut z = z0;
        let mut pp = 0.0;
        for _ in 0..20 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let step = p1 / pp;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / (pp * pp);
    }
    // Enforce exact symmetry.
    for i in 0..n / 2 {
        let xs = 0.5 * (x[i] - x[n - 1 - i]);
        let ws = 0.5 * (w[i] + w[n - 1 - i]);
        x[i] = xs;
        x[n - 1 - i] = -xs;
        w[i] = ws;
        w[n - 1 - i] = ws;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

type Rule = Arc<(Vec<f64>, Vec<f64>)>;

/// Rule for `E[g(Z)]`, `Z ~ N(0, 1)`: nodes `√2 x_i`, weights `w_i / √π`.
fn standard_rule(order: usize) -> Rule {
    static CACHE: OnceLock<Mutex<HashMap<usize, Rule>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("rule cache poisoned");
    guard
        .entry(order)
        .or_insert_with(|| {
            let (x, w) = gauss_hermite_physicists(order);
            let s = PI.sqrt();
            Arc::new((
                x.iter().map(|v| v * std::f64::consts::SQRT_2).collect(),
                w.iter().map(|v| v / s).collect(),
            ))
        })
        .clone()
}

fn legendre_rule(order: usize) -> Rule {
    static CACHE: OnceLock<Mutex<HashMap<usize, Rule>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("rule cache poisoned");
    guard
        .entry(order)
        .or_insert_with(|| Arc::new(gauss_legendre(order)))
        .clone()
}

/// One-dimensional rule for `N(a, 1)` in absolute coordinates.
fn axis_rule(order: usize, a: f64, cut: Option<f64>) -> Vec<(f64, f64)> {
    match cut {
        Some(c) if (c - a).abs() < PANEL_HALF_WIDTH => {
            let gl = legendre_rule(order);
            let mut out = Vec::with_capacity(2 * order);
            for (lo, hi) in [(a - PANEL_HALF_WIDTH, c), (c, a + PANEL_HALF_WIDTH)] {
                let half = 0.5 * (hi - lo);
                let mid = 0.5 * (hi + lo);
                for (x, w) in gl.0.iter().zip(&gl.1) {
                    let t = mid + half * x;
                    let wt = w * half * (-0.5 * (t - a) * (t - a)).exp() / (2.0 * PI).sqrt();
                    if wt > PRUNE {
                        out.push((t, wt));
                    }
                }
            }
            out
        }
        _ => {
            let r = standard_rule(order);
            r.0.iter()
                .zip(&r.1)
                .filter(|(_, w)| **w > PRUNE)
                .map(|(x, w)| (a + x, *w))
                .collect()
        }
    }
}

/// Discontinuity of the integrand at `u[axis] = at`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Split {
    pub axis: usize,
    pub at: f64,
}

/// Tensor-product quadrature in reduced coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Quadrature {
    pub order: usize,
}

impl Quadrature {
    pub fn new(order: usize) -> Self {
        Quadrature { order }
    }

    /// Per-axis order actually used at rank `r`; tensor growth forces lower
    /// orders in three or more dimensions.
    pub fn order_for_rank(&self, r: usize) -> usize {
        match r {
            0..=2 => self.order,
            3 => self.order.min(48),
            _ => self.order.min(20),
        }
    }

    /// Nodes and weights for `N(mean, I_r)`.
    pub fn gaussian_nodes(&self, mean: &[f64], split: Option<Split>) -> (Vec<f64>, Vec<f64>) {
        let r = mean.len();
        let order = self.order_for_rank(r);
        let axes: Vec<Vec<(f64, f64)>> = (0..r)
            .map(|k| {
                let cut = split.filter(|s| s.axis == k).map(|s| s.at);
                axis_rule(order, mean[k], cut)
            })
            .collect();
        let mut pts = Vec::new();
        let mut wts = Vec::new();
        let mut cur = vec![0.0; r];
        fn rec(k: usize, w: f64, axes: &[Vec<(f64, f64)>], cur: &mut Vec<f64>, pts: &mut Vec<f64>, wts: &mut Vec<f64>) {
            if k == axes.len() {
                pts.extend_from_slice(cur);
                wts.push(w);
                return;
            }
            for &(x, wx) in &axes[k] {
                let ww = w * wx;
                if ww <= PRUNE {
                    continue;
                }
                cur[k] = x;
                rec(k + 1, ww, axes, cur, pts, wts);
            }
        }
        rec(0, 1.0, &axes, &mut cur, &mut pts, &mut wts);
        (pts, wts)
    }

    /// `E_{N(mean, I)}[f(u)]` for an `m`-valued integrand.
    pub fn expect_gaussian<F>(&self, mean: &[f64], split: Option<Split>, m: usize, mut f: F) -> Vec<f64>
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let r = mean.len();
        let (pts, wts) = self.gaussian_nodes(mean, split);
        let mut acc = vec![0.0; m];
        let mut buf = vec![0.0; m];
        for (i, w) in wts.iter().enumerate() {
            let u = &pts[i * r..(i + 1) * r];
            buf.iter_mut().for_each(|b| *b = 0.0);
            f(u, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += w * b;
            }
        }
        acc
    }

    /// `Σ_k w_k E_{N(a_k, I)}[f(u)]`.
    pub fn expect_mixture<F>(&self, mix: &ReducedMixture, split: Option<Split>, m: usize, mut f: F) -> Vec<f64>
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let mut acc = vec![0.0; m];
        for (w, a) in mix.weights.iter().zip(&mix.means) {
            if *w == 0.0 {
                continue;
            }
            let part = self.expect_gaussian(a, split, m, &mut f);
            for (x, p) in acc.iter_mut().zip(&part) {
                *x += w * p;
            }
        }
        acc
    }

    /// Scalar shorthand for [`Quadrature::expect_gaussian`].
    pub fn expect_gaussian1<F>(&self, mean: &[f64], split: Option<Split>, mut f: F) -> f64
    where
        F: FnMut(&[f64]) -> f64,
    {
        self.expect_gaussian(mean, split, 1, |u, out| out[0] = f(u))[0]
    }

    /// Scalar shorthand for [`Quadrature::expect_mixture`].
    pub fn expect_mixture1<F>(&self, mix: &ReducedMixture, split: Option<Split>, mut f: F) -> f64
    where
        F: FnMut(&[f64]) -> f64,
    {
        self.expect_mixture(mix, split, 1, |u, out| out[0] = f(u))[0]
    }
}

/// Reduced coordinate system for a fixed covariance and point set.
#[derive(Clone, Debug)]
pub struct ReducedSpace {
    pub basis: ProjectionBasis,
    cov: CovarianceModel,
}

impl ReducedSpace {
    /// Centre at `points[0]`; the first axis runs toward the first distinct point.
    pub fn new(cov: &CovarianceModel, points: &[&DVector<f64>]) -> Self {
        let center = points[0].clone();
        ReducedSpace {
            basis: ProjectionBasis::new(cov, &center, &points[1..]),
            cov: cov.clone(),
        }
    }

    /// Space spanned by all means of the given mixtures.
    pub fn for_mixtures(mixtures: &[&MixtureDensity]) -> Self {
        let pts: Vec<&DVector<f64>> = mixtures.iter().flat_map(|m| m.means().iter()).collect();
        Self::new(mixtures[0].cov(), &pts)
    }

    pub fn rank(&self) -> usize {
        self.basis.rank()
    }

    pub fn cov(&self) -> &CovarianceModel {
        &self.cov
    }

    /// `U L⁻¹(y − c)`.
    pub fn coords(&self, y: &DVector<f64>) -> Vec<f64> {
        let z = self.cov.whiten(&(y - &self.basis.center));
        (&self.basis.basis * z).iter().cloned().collect()
    }

    /// `L⁻ᵀ Uᵀ v`: maps a reduced vector `E[g(u)(u − a)]` to `E[g Σ⁻¹(Y − μ)]`.
    pub fn score_map(&self, v: &[f64]) -> DVector<f64> {
        let w = self.basis.basis.transpose() * DVector::from_column_slice(v);
        self.cov.whiten_t(&w)
    }

    /// `c + L Uᵀ u`: the point of the span with reduced coordinates `u`.
    pub fn lift(&self, u: &[f64]) -> DVector<f64> {
        &self.basis.center + self.cov.chol() * (self.basis.basis.transpose() * DVector::from_column_slice(u))
    }

    pub fn reduce(&self, m: &MixtureDensity) -> ReducedMixture {
        let means = m.means().iter().map(|mu| self.coords(mu)).collect();
        ReducedMixture::new(m.weights().to_vec(), means)
    }

    /// Reduced coordinates of a single point.
    pub fn point(&self, y: &DVector<f64>) -> Vec<f64> {
        self.coords(y)
    }
}

/// A mixture seen through a [`ReducedSpace`]. Log densities drop the term
/// shared by every component, so only differences of them are meaningful.
#[derive(Clone, Debug)]
pub struct ReducedMixture {
    pub weights: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
}

impl ReducedMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>) -> Self {
        let log_weights = weights
            .iter()
            .map(|w| if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY })
            .collect();
        ReducedMixture {
            weights,
            log_weights,
            means,
        }
    }

    pub fn two(beta: f64, a: Vec<f64>, b: Vec<f64>) -> Self {
        Self::new(vec![beta, 1.0 - beta], vec![a, b])
    }

    pub fn component_log(&self, k: usize, u: &[f64]) -> f64 {
        -0.5 * sq_dist(u, &self.means[k])
    }

    pub fn log_density(&self, u: &[f64]) -> f64 {
        match self.weights.len() {
            1 => self.component_log(0, u),
            2 => {
                let a = self.log_weights[0] + self.component_log(0, u);
                let b = self.log_weights[1] + self.component_log(1, u);
                crate::special::logaddexp(a, b)
            }
            _ => {
                let t: Vec<f64> = (0..self.weights.len())
                    .map(|k| self.log_weights[k] + self.component_log(k, u))
                    .collect();
                logsumexp(&t)
            }
        }
    }

    /// Posterior component probabilities at `u`.
    pub fn responsibilities(&self, u: &[f64], out: &mut [f64]) {
        let t: Vec<f64> = (0..self.weights.len())
            .map(|k| self.log_weights[k] + self.component_log(k, u))
            .collect();
        let l = logsumexp(&t);
        for (o, x) in out.iter_mut().zip(&t) {
            *o = (x - l).exp();
        }
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_moments() {
        for n in [8usize, 40, 200] {
            let q = Quadrature::new(n);
            let m0 = q.expect_gaussian1(&[0.0], None, |_| 1.0);
            let m2 = q.expect_gaussian1(&[0.0], None, |u| u[0] * u[0]);
            let m4 = q.expect_gaussian1(&[0.0], None, |u| u[0].powi(4));
            assert!((m0 - 1.0).abs() < 1e-13, "n={n} m0={m0}");
            assert!((m2 - 1.0).abs() < 1e-12);
            assert!((m4 - 3.0).abs() < 1e-11);
        }
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(20);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(6)).sum();
        assert!((s - 2.0 / 7.0).abs() < 1e-14);
    }

    #[test]
    fn split_axis_integrates_truncated_mass() {
        let q = Quadrature::new(200);
        let p = q.expect_gaussian1(&[0.0], Some(Split { axis: 0, at: 1.0 }), |u| {
            if u[0] >= 1.0 {
                1.0
            } else {
                0.0
            }
        });
        assert!((p - crate::special::norm_cdf(-1.0)).abs() < 1e-13);
    }

    #[test]
    fn exponential_moment_2d() {
        let q = Quadrature::new(200);
        // E[exp(a·u)] = exp(|a|²/2) under N(0, I).
        let v = q.expect_gaussian1(&[0.0, 0.0], None, |u| (2.0 * u[0] - 1.5 * u[1]).exp());
        assert!((v / (3.125f64).exp() - 1.0).abs() < 1e-12);
    }
}
