//! Equal-covariance Gaussian mixtures.
//!
//! All components share one positive-definite covariance `Σ = L Lᵀ`. Log
//! densities go through log-sum-exp, Mahalanobis quantities through
//! triangular solves against `L`. [`ProjectionBasis`] spans the whitened mean
//! differences: likelihood ratios between mixtures built on the same `Σ`
//! depend on `y` only through that span, which is what lets the quadrature
//! in [`crate::estimators`] run in one to three dimensions.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::special::{logsumexp, norm_cdf, phi_pdf, sigmoid, LN_2PI};

/// Shared covariance with its cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct CovarianceModel {
    sigma: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
    eig_min: f64,
    eig_max: f64,
}

impl CovarianceModel {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        let d = sigma.nrows();
        if d == 0 || sigma.ncols() != d {
            return Err(Error::input("sigma", "covariance must be a non-empty square matrix"));
        }
        if sigma.iter().any(|x| !x.is_finite()) {
            return Err(Error::input("sigma", "covariance has non-finite entries"));
        }
        let scale = sigma.amax().max(f64::MIN_POSITIVE);
        if (&sigma - sigma.transpose()).amax() > 1e-12 * scale {
            return Err(Error::input("sigma", "covariance is not symmetric"));
        }
        let sym = (&sigma + sigma.transpose()) * 0.5;
        let chol = sym
            .clone()
            .cholesky()
            .ok_or_else(|| Error::input("sigma", "covariance is not positive definite"))?
            .l();
        let log_det = 2.0 * chol.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let ev = sym.clone().symmetric_eigenvalues();
        let eig_min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
        let eig_max = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(CovarianceModel {
            sigma: sym,
            chol,
            log_det,
            eig_min,
            eig_max,
        })
    }

    pub fn identity(d: usize) -> Self {
        Self::new(DMatrix::identity(d, d)).expect("identity is positive definite")
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Lower-triangular `L` with `L Lᵀ = Σ`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn eig_min(&self) -> f64 {
        self.eig_min
    }

    pub fn eig_max(&self) -> f64 {
        self.eig_max
    }

    /// Operator norm of `Σ⁻¹`, i.e. `1 / λ_min(Σ)`.
    pub fn inv_op_norm(&self) -> f64 {
        1.0 / self.eig_min
    }

    /// `L⁻¹ v`.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol
            .solve_lower_triangular(v)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `L⁻ᵀ w`.
    pub fn whiten_t(&self, w: &DVector<f64>) -> DVector<f64> {
        self.chol
            .tr_solve_lower_triangular(w)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `Σ⁻¹ v` by two triangular solves.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.whiten_t(&self.whiten(v))
    }

    /// `Σ⁻¹` as a dense matrix.
    pub fn inverse(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            out.set_column(j, &self.solve(&e));
        }
        (&out + out.transpose()) * 0.5
    }

    /// `sqrt(vᵀ Σ⁻¹ v)`.
    pub fn mahalanobis(&self, v: &DVector<f64>) -> f64 {
        self.whiten(v).norm()
    }

    fn check_dim(&self, v: &DVector<f64>, path: &str) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::input(
                path,
                format!("expected length {}, got {}", self.dim(), v.len()),
            ));
        }
        Ok(())
    }

    /// `log N(y; μ, Σ)`.
    pub fn log_normal(&self, y: &DVector<f64>, mu: &DVector<f64>) -> f64 {
        let z = self.whiten(&(y - mu));
        -0.5 * z.norm_squared() - 0.5 * (self.dim() as f64) * LN_2PI - 0.5 * self.log_det
    }
}

/// Mahalanobis separation `‖μ1 − μ2‖_{Σ⁻¹}`.
pub fn separation(cov: &CovarianceModel, mu1: &DVector<f64>, mu2: &DVector<f64>) -> f64 {
    cov.mahalanobis(&(mu1 - mu2))
}

/// Bhattacharyya coefficient of two Gaussians sharing `Σ`: `exp(−δ²/8)`.
pub fn bhattacharyya_equal_cov(cov: &CovarianceModel, mu1: &DVector<f64>, mu2: &DVector<f64>) -> f64 {
    let d = separation(cov, mu1, mu2);
    (-d * d / 8.0).exp()
}

/// Weighted sum of Gaussians sharing one covariance.
#[derive(Clone, Debug)]
pub struct MixtureDensity {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    cov: CovarianceModel,
}

impl MixtureDensity {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, cov: CovarianceModel) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::input(
                "weights",
                "need one weight per mean and at least one component",
            ));
        }
        for (k, w) in weights.iter().enumerate() {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::input(format!("weights[{k}]"), "weights must be nonnegative"));
            }
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::input("weights", format!("weights sum to {s}, not 1")));
        }
        for (k, m) in means.iter().enumerate() {
            cov.check_dim(m, &format!("means[{k}]"))?;
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::input(format!("means[{k}]"), "non-finite mean"));
            }
        }
        Ok(MixtureDensity { weights, means, cov })
    }

    /// `β N(μ_a) + (1 − β) N(μ_b)`.
    pub fn two(beta: f64, mu_a: &DVector<f64>, mu_b: &DVector<f64>, cov: &CovarianceModel) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::input("beta", format!("{beta} is outside [0, 1]")));
        }
        Self::new(vec![beta, 1.0 - beta], vec![mu_a.clone(), mu_b.clone()], cov.clone())
    }

    pub fn single(mu: &DVector<f64>, cov: &CovarianceModel) -> Result<Self> {
        Self::new(vec![1.0], vec![mu.clone()], cov.clone())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn cov(&self) -> &CovarianceModel {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    fn component_terms(&self, y: &DVector<f64>) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| {
                if *w == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    w.ln() + self.cov.log_normal(y, m)
                }
            })
            .collect()
    }

    pub fn log_density(&self, y: &DVector<f64>) -> Result<f64> {
        self.cov.check_dim(y, "y")?;
        Ok(logsumexp(&self.component_terms(y)))
    }

    pub fn responsibilities(&self, y: &DVector<f64>) -> Result<Vec<f64>> {
        self.cov.check_dim(y, "y")?;
        let t = self.component_terms(y);
        let l = logsumexp(&t);
        let mut r: Vec<f64> = t.iter().map(|x| (x - l).exp()).collect();
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|x| *x /= s);
        Ok(r)
    }

    /// Draw `n` labelled points. Sample `i` uses stream `i` of the seed, so
    /// output is identical for any thread count.
    pub fn sample(&self, n: usize, seed: u64) -> (Vec<DVector<f64>>, Vec<usize>) {
        let rng = CounterRng::new(seed);
        let out: Vec<(DVector<f64>, usize)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = rng.stream(i as u64);
                self.draw(&mut r)
            })
            .collect();
        out.into_iter().unzip()
    }

    /// One draw from the mixture with the given generator.
    pub fn draw<R: rand::Rng + ?Sized>(&self, r: &mut R) -> (DVector<f64>, usize) {
        let u: f64 = r.random();
        let mut acc = 0.0;
        let mut label = self.weights.len() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                label = k;
                break;
            }
        }
        while self.weights[label] == 0.0 && label > 0 {
            label -= 1;
        }
        (self.draw_component(label, r), label)
    }

    pub fn draw_component<R: rand::Rng + ?Sized>(&self, k: usize, r: &mut R) -> DVector<f64> {
        let d = self.dim();
        let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(r)));
        &self.means[k] + self.cov.chol() * z
    }
}

/// Learner state `(φ, m_o, m_n)` with `β = sigmoid(φ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerParams {
    pub logit: f64,
    pub m_old: DVector<f64>,
    pub m_new: DVector<f64>,
}

impl LearnerParams {
    pub fn from_beta(beta: f64, m_old: DVector<f64>, m_new: DVector<f64>) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::input("beta", format!("{beta} is not in (0, 1)")));
        }
        Ok(LearnerParams {
            logit: crate::special::logit(beta),
            m_old,
            m_new,
        })
    }

    pub fn beta(&self) -> f64 {
        sigmoid(self.logit)
    }

    pub fn mixture(&self, cov: &CovarianceModel) -> Result<MixtureDensity> {
        MixtureDensity::two(self.beta(), &self.m_old, &self.m_new, cov)
    }
}

/// Two-mode mixtures on disjoint supports, summarized by the quantities the
/// exact KL decomposition needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisjointMixtureSpec {
    pub alpha: f64,
    pub beta: f64,
    pub kl_oo: f64,
    pub kl_nn: f64,
    pub reward_old: f64,
    pub reward_new: f64,
}

impl DisjointMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::input("alpha", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::input("beta", "must lie in [0, 1]"));
        }
        if !(self.kl_oo >= 0.0) || !(self.kl_nn >= 0.0) {
            return Err(Error::input("kl_oo", "component KL terms must be nonnegative"));
        }
        Ok(())
    }
}

/// Orthonormal rows spanning the whitened differences of a point set.
#[derive(Clone, Debug)]
pub struct ProjectionBasis {
    /// `r × d`, rows orthonormal.
    pub basis: DMatrix<f64>,
    pub center: DVector<f64>,
}

impl ProjectionBasis {
    /// Gram-Schmidt over `L⁻¹(p − center)` in the order given, so the first
    /// row points from `center` to the first point that differs from it.
    pub fn new(cov: &CovarianceModel, center: &DVector<f64>, points: &[&DVector<f64>]) -> Self {
        let d = cov.dim();
        let mut rows: Vec<DVector<f64>> = Vec::new();
        let diffs: Vec<DVector<f64>> = points.iter().map(|p| cov.whiten(&(*p - center))).collect();
        let scale = diffs.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for v in &diffs {
            let mut w = v.clone();
            // Two passes keep orthogonality at machine precision.
            for _ in 0..2 {
                for b in &rows {
                    let c = b.dot(&w);
                    w -= b * c;
                }
            }
            let n = w.norm();
            if n > 1e-11 * scale.max(1.0) && rows.len() < d {
                rows.push(w / n);
            }
        }
        let r = rows.len();
        let mut basis = DMatrix::zeros(r, d);
        for (i, b) in rows.iter().enumerate() {
            basis.set_row(i, &b.transpose());
        }
        ProjectionBasis {
            basis,
            center: center.clone(),
        }
    }

    pub fn rank(&self) -> usize {
        self.basis.nrows()
    }
}

/// Region of the Bayes halfspace partition between two modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Old,
    New,
}

/// Statistics of the Bayes partition `A_n = {(μ_n−μ_o)ᵀΣ⁻¹(y − mid) ≥ 0}`.
#[derive(Clone, Debug)]
pub struct BayesPartition {
    pub delta: f64,
    /// Mass of `A_n` under the old mode, `Φ(−δ/2)`.
    pub gamma: f64,
    pub kappa: f64,
    pub direction: DVector<f64>,
    pub midpoint: DVector<f64>,
    /// `E_{p_o}[Σ⁻¹(Y−μ_o) 1{Y ∈ A_n}]`.
    pub trunc_moment: DVector<f64>,
}

impl BayesPartition {
    pub fn classify(&self, y: &DVector<f64>) -> Region {
        if self.direction.dot(&(y - &self.midpoint)) >= 0.0 {
            Region::New
        } else {
            Region::Old
        }
    }
}

pub fn bayes_partition_stats(
    mu_o: &DVector<f64>,
    mu_n: &DVector<f64>,
    cov: &CovarianceModel,
) -> Result<BayesPartition> {
    let diff = mu_n - mu_o;
    let delta = cov.mahalanobis(&diff);
    if delta == 0.0 {
        return Err(Error::Precondition(
            "degenerate partition: old and new means coincide".into(),
        ));
    }
    let gamma = norm_cdf(-delta / 2.0);
    let direction = cov.solve(&diff);
    let trunc_moment = &direction * (phi_pdf(delta / 2.0) / delta);
    Ok(BayesPartition {
        delta,
        gamma,
        kappa: 1.0 - 2.0 * gamma,
        direction,
        midpoint: (mu_o + mu_n) * 0.5,
        trunc_moment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn standard_normal_mode() {
        let m = MixtureDensity::single(&v(&[0.0]), &CovarianceModel::identity(1)).unwrap();
        assert!((m.log_density(&v(&[0.0])).unwrap() + 0.918_938_533_204_672_8).abs() < 1e-14);
    }

    #[test]
    fn symmetric_pair_at_origin() {
        let cov = CovarianceModel::identity(1);
        let m = MixtureDensity::two(0.5, &v(&[-1.3]), &v(&[1.3]), &cov).unwrap();
        let y = v(&[0.0]);
        assert!((m.log_density(&y).unwrap() - cov.log_normal(&y, &v(&[1.3]))).abs() < 1e-14);
        let r = m.responsibilities(&y).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dense_evaluation_oracle_2d() {
        let cov = CovarianceModel::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5])).unwrap();
        let m = MixtureDensity::two(0.3, &v(&[0.0, 1.0]), &v(&[2.0, -1.0]), &cov).unwrap();
        let y = v(&[0.7, 0.2]);
        let inv = cov.sigma().clone().try_inverse().unwrap();
        let det = cov.sigma().determinant();
        let dens = |mu: &DVector<f64>| {
            let e = &y - mu;
            (-0.5 * (e.transpose() * &inv * &e)[0]).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
        };
        let direct = 0.3 * dens(&v(&[0.0, 1.0])) + 0.7 * dens(&v(&[2.0, -1.0]));
        assert!((m.log_density(&y).unwrap() - direct.ln()).abs() < 1e-13);
    }

    #[test]
    fn hand_evaluated_responsibility() {
        let cov = CovarianceModel::identity(1);
        let m = MixtureDensity::two(0.3, &v(&[0.0]), &v(&[2.0]), &cov).unwrap();
        // Both components are at distance 1 from y = 1, so only the weights matter.
        let r = m.responsibilities(&v(&[1.0])).unwrap();
        assert!((r[0] - 0.3).abs() < 1e-15);
        let r2 = m.responsibilities(&v(&[0.5])).unwrap();
        let a = 0.3 * (-0.125f64).exp();
        let b = 0.7 * (-1.125f64).exp();
        assert!((r2[0] - a / (a + b)).abs() < 1e-15);
    }

    #[test]
    fn dominant_mode_responsibility() {
        let cov = CovarianceModel::identity(1);
        let m = MixtureDensity::two(0.5, &v(&[0.0]), &v(&[20.0]), &cov).unwrap();
        assert!(m.responsibilities(&v(&[0.0])).unwrap()[0] > 1.0 - 1e-12);
    }

    #[test]
    fn separation_examples() {
        let cov = CovarianceModel::identity(2);
        assert_eq!(separation(&cov, &v(&[1.0, 1.0]), &v(&[1.0, 1.0])), 0.0);
        assert!((separation(&cov, &v(&[0.0, 0.0]), &v(&[3.0, 4.0])) - 5.0).abs() < 1e-14);
        let cov = CovarianceModel::diagonal(&[4.0, 1.0]).unwrap();
        assert!((separation(&cov, &v(&[0.0, 0.0]), &v(&[2.0, 0.0])) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn non_pd_is_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(CovarianceModel::new(bad), Err(Error::Input { .. })));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(CovarianceModel::new(asym).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_input_error() {
        let m = MixtureDensity::single(&v(&[0.0, 0.0]), &CovarianceModel::identity(2)).unwrap();
        assert!(m.log_density(&v(&[0.0])).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_balanced() {
        let cov = CovarianceModel::identity(1);
        let m = MixtureDensity::two(0.5, &v(&[0.0]), &v(&[3.0]), &cov).unwrap();
        let (a, la) = m.sample(100_000, 11);
        let (b, lb) = m.sample(100_000, 11);
        assert_eq!(la, lb);
        assert_eq!(a, b);
        let frac = la.iter().filter(|&&l| l == 0).count() as f64 / 1e5;
        assert!((frac - 0.5).abs() < 0.01);
        let single = MixtureDensity::single(&v(&[0.0]), &cov).unwrap();
        assert!(single.sample(100, 1).1.iter().all(|&l| l == 0));
    }

    #[test]
    fn partition_tail_limit() {
        let cov = CovarianceModel::identity(1);
        let p = bayes_partition_stats(&v(&[0.0]), &v(&[12.0]), &cov).unwrap();
        assert!(p.gamma < 1e-8 && p.kappa > 1.0 - 1e-7);
        let p = bayes_partition_stats(&v(&[0.0]), &v(&[2.0]), &cov).unwrap();
        assert!((p.trunc_moment[0] - phi_pdf(1.0)).abs() < 1e-15);
        assert!(bayes_partition_stats(&v(&[1.0]), &v(&[1.0]), &cov).is_err());
    }

    #[test]
    fn basis_reconstructs_differences() {
        let cov = CovarianceModel::new(DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.2, 0.0, 0.2, 1.0, 0.1, 0.0, 0.1, 0.7],
        ))
        .unwrap();
        let c = v(&[0.0, 0.0, 0.0]);
        let p1 = v(&[1.0, 2.0, 0.0]);
        let p2 = v(&[-1.0, 0.5, 3.0]);
        let p3 = &p1 * 2.0 - &p2;
        let b = ProjectionBasis::new(&cov, &c, &[&p1, &p2, &p3]);
        assert_eq!(b.rank(), 2);
        let g = &b.basis * b.basis.transpose();
        assert!((g - DMatrix::identity(2, 2)).amax() < 1e-12);
        for p in [&p1, &p2, &p3] {
            let w = cov.whiten(&(p - &c));
            let rec = b.basis.transpose() * (&b.basis * &w);
            assert!((rec - &w).norm() < 1e-10 * w.norm());
        }
    }
}
