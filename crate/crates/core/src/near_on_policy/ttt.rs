//! Entropic reward objective with a KL anchor.
//!
//! `L(β) = J_η(q_β) − λ_ref KL(q_β ‖ q_{β₀})` with `J_η(q) = log E_q[e^{η r}]`
//! and `q_β = β p_o + (1 − β) p_n`. The reward is a two-level step on
//! either disjoint supports or the Bayes halfspace.
//!
//! With `a = e^{η u_o}`, `b = e^{η u_n}`, `γ = Φ(−δ/2)` and `κ = 1 − 2γ`,
//! the halfspace reward gives `J(β) = log(a(γ + κβ) + b(1 − γ − κβ))`;
//! disjoint supports are the `γ = 0` case with a binary-KL anchor.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_prob, ModePair, RewardPartition, StepReward};
use crate::error::{Error, Result};
use crate::estimators::{batch_means, EstimatorConfig, Quadrature, ReducedMixture, ReducedSpace, Split};
use crate::mixture::{BayesPartition, MixtureDensity};
use crate::objectives::{reverse_kl_gradients, TargetSpec};
use crate::special::{binary_kl, norm_cdf, phi_pdf};

#[derive(Clone, Debug)]
pub struct TttConfig {
    pub eta: f64,
    pub lambda_ref: f64,
    pub beta0: f64,
    pub reward: StepReward,
    pub geometry: ModePair,
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::input("eta", "must be positive"));
        }
        if !(self.lambda_ref >= 0.0 && self.lambda_ref.is_finite()) {
            return Err(Error::input("lambda_ref", "must be nonnegative"));
        }
        check_prob("beta0", self.beta0)?;
        self.reward.validate()
    }

    pub fn with_lambda(&self, lambda_ref: f64) -> Self {
        TttConfig {
            lambda_ref,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TttCase {
    /// `β⋆ = 0`.
    CollapseNew,
    /// `β⋆ = 1`.
    CollapseOld,
    /// `β⋆` strictly inside `(0, 1)` and different from `β₀`.
    Interior,
    /// Equal rewards: `β⋆ = β₀` (any `β` when `λ_ref = 0`; `β₀` is reported).
    Reference,
}

/// The one-dimensional objective and its pieces.
#[derive(Clone, Debug)]
pub struct TttModel {
    pub cfg: TttConfig,
    /// `e^{η u_o}`.
    pub a: f64,
    /// `e^{η u_n}`.
    pub b: f64,
    /// Old-mode mass on the new region (0 for disjoint supports).
    pub gamma: f64,
    pub kappa: f64,
    quad: Quadrature,
    a_old: Vec<f64>,
    a_new: Vec<f64>,
}

impl TttModel {
    pub fn new(cfg: &TttConfig, est: &EstimatorConfig) -> Result<Self> {
        cfg.validate()?;
        let g = &cfg.geometry;
        let gamma = match cfg.reward.partition {
            RewardPartition::Disjoint => 0.0,
            RewardPartition::BayesHalfspace => norm_cdf(-g.delta() / 2.0),
        };
        let space = ReducedSpace::new(&g.cov, &[&g.mu_old, &g.mu_new]);
        Ok(TttModel {
            cfg: cfg.clone(),
            a: (cfg.eta * cfg.reward.u_old).exp(),
            b: (cfg.eta * cfg.reward.u_new).exp(),
            gamma,
            kappa: 1.0 - 2.0 * gamma,
            quad: est.quadrature(),
            a_old: space.point(&g.mu_old),
            a_new: space.point(&g.mu_new),
        })
    }

    fn disjoint(&self) -> bool {
        self.cfg.reward.partition == RewardPartition::Disjoint
    }

    /// `E_{q_β}[e^{η r}]`.
    pub fn mgf(&self, beta: f64) -> f64 {
        self.a * (self.gamma + self.kappa * beta) + self.b * (1.0 - self.gamma - self.kappa * beta)
    }

    pub fn j(&self, beta: f64) -> f64 {
        self.mgf(beta).ln()
    }

    pub fn j_prime(&self, beta: f64) -> f64 {
        self.kappa * (self.a - self.b) / self.mgf(beta)
    }

    fn reduced(&self, beta: f64) -> ReducedMixture {
        ReducedMixture::two(beta, self.a_old.clone(), self.a_new.clone())
    }

    /// `KL(q_β ‖ q_{β₀})`.
    pub fn d(&self, beta: f64) -> f64 {
        let b0 = self.cfg.beta0;
        if self.disjoint() {
            return binary_kl(beta, b0);
        }
        let q = self.reduced(beta);
        let q0 = self.reduced(b0);
        self.quad
            .expect_mixture1(&q, None, |u| q.log_density(u) - q0.log_density(u))
    }

    /// `∫ (p_o − p_n) log(q_β / q_{β₀})`.
    pub fn d_prime(&self, beta: f64) -> f64 {
        let b0 = self.cfg.beta0;
        if self.disjoint() {
            let lo = if beta > 0.0 {
                (beta / b0).ln()
            } else {
                f64::NEG_INFINITY
            };
            let hi = if beta < 1.0 {
                ((1.0 - beta) / (1.0 - b0)).ln()
            } else {
                f64::NEG_INFINITY
            };
            return lo - hi;
        }
        let q = self.reduced(beta);
        let q0 = self.reduced(b0);
        let ell = |u: &[f64]| q.log_density(u) - q0.log_density(u);
        self.quad.expect_gaussian1(&self.a_old, None, ell) - self.quad.expect_gaussian1(&self.a_new, None, ell)
    }

    /// `L(β) = J(β) − λ_ref D(β)`.
    pub fn objective(&self, beta: f64) -> f64 {
        self.j(beta) - self.cfg.lambda_ref * self.d(beta)
    }

    /// `L′(β)`.
    pub fn first_order(&self, beta: f64) -> f64 {
        self.j_prime(beta) - self.cfg.lambda_ref * self.d_prime(beta)
    }
}

#[derive(Clone, Debug)]
pub struct TttAnalysis {
    pub model: TttModel,
    /// Largest `λ_ref` with `β⋆ = 0` (0 when the old reward is not lower).
    pub lambda_crit_new: f64,
    /// Largest `λ_ref` with `β⋆ = 1` (0 when the new reward is not lower).
    pub lambda_crit_old: f64,
    pub beta_star: f64,
    pub case: TttCase,
}

/// Bisection of a decreasing function with `f(lo) > 0 > f(hi)`.
fn bisect<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64) -> f64 {
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn ttt_analysis(cfg: &TttConfig, est: &EstimatorConfig) -> Result<TttAnalysis> {
    let model = TttModel::new(cfg, est)?;
    let (a, b, g) = (model.a, model.b, model.gamma);
    let lam = cfg.lambda_ref;
    let b0 = cfg.beta0;
    let (lambda_crit_new, lambda_crit_old) = if model.disjoint() {
        // D′ is infinite at both ends, so no positive anchor allows a boundary optimum.
        (0.0, 0.0)
    } else {
        let new = if b > a {
            model.kappa * (b - a) / ((a * g + b * (1.0 - g)) * (-model.d_prime(0.0)))
        } else {
            0.0
        };
        let old = if a > b {
            model.kappa * (a - b) / ((a * (1.0 - g) + b * g) * model.d_prime(1.0))
        } else {
            0.0
        };
        (new, old)
    };
    let (beta_star, case) = if a == b {
        (b0, TttCase::Reference)
    } else if lam == 0.0 {
        if b > a {
            (0.0, TttCase::CollapseNew)
        } else {
            (1.0, TttCase::CollapseOld)
        }
    } else if b > a && lam <= lambda_crit_new {
        (0.0, TttCase::CollapseNew)
    } else if a > b && lam <= lambda_crit_old {
        (1.0, TttCase::CollapseOld)
    } else {
        let (lo, hi) = if b > a { (0.0, b0) } else { (b0, 1.0) };
        let f = |x: f64| model.first_order(x);
        // Probe just inside the bracket: D′ may be infinite at the ends.
        let (flo, fhi) = (f(lo + 1e-14), f(hi - 1e-14));
        if !(flo > 0.0 && fhi < 0.0) {
            return Err(Error::Consistency(format!(
                "first-order condition does not change sign on ({lo}, {hi}): {flo:e}, {fhi:e}"
            )));
        }
        (bisect(f, lo, hi), TttCase::Interior)
    };
    Ok(TttAnalysis {
        model,
        lambda_crit_new,
        lambda_crit_old,
        beta_star,
        case,
    })
}

/// Grid argmax of the objective on `n` equally spaced points of `[0, 1]`,
/// and the largest second difference (positive values mean non-concavity).
pub fn grid_argmax(model: &TttModel, n: usize) -> (f64, f64) {
    let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let ls: Vec<f64> = xs.iter().map(|x| model.objective(*x)).collect();
    let mut best = 0;
    for i in 1..n {
        if ls[i] > ls[best] {
            best = i;
        }
    }
    let max_d2 = (1..n - 1)
        .map(|i| ls[i + 1] - 2.0 * ls[i] + ls[i - 1])
        .fold(f64::NEG_INFINITY, f64::max);
    (xs[best], max_d2)
}

/// Monte Carlo `J_η(q_β)` with a jackknife error on the log.
pub fn j_monte_carlo(cfg: &TttConfig, beta: f64, n: usize, seed: u64) -> Result<(f64, f64)> {
    cfg.validate()?;
    let g = &cfg.geometry;
    let part = g.partition();
    let eta = cfg.eta;
    let rw = cfg.reward;
    let bm = match rw.partition {
        RewardPartition::Disjoint => batch_means(n, seed, 1, |r, _, out| {
            let u: f64 = rand::Rng::random(r);
            out[0] = (eta * if u < beta { rw.u_old } else { rw.u_new }).exp();
        }),
        RewardPartition::BayesHalfspace => {
            let q = MixtureDensity::two(beta.clamp(0.0, 1.0), &g.mu_old, &g.mu_new, &g.cov)?;
            batch_means(n, seed, 1, |r, _, out| {
                let (y, _) = q.draw(r);
                out[0] = (eta * rw.level(part.classify(&y))).exp();
            })
        }
    };
    Ok(bm.jackknife(|x| x[0].ln()))
}

/// Old-mean gradient of `J_η` at `m_o = μ_o` with its overlap bound.
#[derive(Clone, Debug)]
pub struct TttOldMeanGrad {
    pub grad: DVector<f64>,
    pub bound: f64,
    pub w_old: f64,
    pub w_new: f64,
    /// Gradient of `KL(q ‖ q₀)` in the old mean; zero at the synchronized point.
    pub anchor_grad: DVector<f64>,
}

fn new_region_mass(part: &BayesPartition, center: &DVector<f64>) -> f64 {
    norm_cdf(part.direction.dot(&(center - &part.midpoint)) / part.delta)
}

pub fn ttt_oldmean_gradient(
    beta: f64,
    m_new: &DVector<f64>,
    cfg: &TttConfig,
    est: &EstimatorConfig,
) -> Result<TttOldMeanGrad> {
    cfg.validate()?;
    check_prob("beta", beta)?;
    if cfg.reward.partition != RewardPartition::BayesHalfspace {
        return Err(Error::Precondition(
            "old-mean gradient needs the Bayes halfspace reward".into(),
        ));
    }
    let g = &cfg.geometry;
    if m_new.len() != g.cov.dim() {
        return Err(Error::input("m_new", "wrong dimension"));
    }
    let part = g.partition();
    let a = (cfg.eta * cfg.reward.u_old).exp();
    let b = (cfg.eta * cfg.reward.u_new).exp();
    let pn = new_region_mass(&part, m_new);
    let z = beta * (a * (1.0 - part.gamma) + b * part.gamma) + (1.0 - beta) * (a * (1.0 - pn) + b * pn);
    let (w_old, w_new) = (a / z, b / z);
    let grad = &part.trunc_moment * (beta * (w_new - w_old));
    let r = cfg.reward.bound();
    let delta = part.delta;
    let bound = beta * ((2.0 * cfg.eta * r).exp() - (-2.0 * cfg.eta * r).exp()) * phi_pdf(delta / 2.0) / delta
        * part.direction.norm();
    let spec = TargetSpec::new(cfg.beta0, g.mu_old.clone(), g.mu_new.clone(), g.cov.clone())?;
    let learner = spec.learner(beta, m_new.clone())?;
    let anchor_grad = reverse_kl_gradients(&learner, &spec, est)?.dm_old;
    Ok(TttOldMeanGrad {
        grad,
        bound,
        w_old,
        w_new,
        anchor_grad,
    })
}

/// `J_η(β, m_o, m_n)` by quadrature, splitting the axis at the reward cut.
/// Serves as the finite-difference oracle for the old-mean gradient.
pub fn j_general_quadrature(
    beta: f64,
    m_old: &DVector<f64>,
    m_new: &DVector<f64>,
    cfg: &TttConfig,
    est: &EstimatorConfig,
) -> f64 {
    let g = &cfg.geometry;
    let space = ReducedSpace::new(&g.cov, &[&g.mu_old, &g.mu_new, m_old, m_new]);
    let cut = g.delta() / 2.0;
    let q = ReducedMixture::two(beta, space.point(m_old), space.point(m_new));
    let (uo, un) = (cfg.reward.u_old, cfg.reward.u_new);
    let eta = cfg.eta;
    let split = Some(Split { axis: 0, at: cut });
    est.quadrature()
        .expect_mixture1(&q, split, |u| (eta * if u[0] >= cut { un } else { uo }).exp())
        .ln()
}

/// Draw one standard normal vector; used by the randomized checks.
pub fn random_direction<R: rand::Rng + ?Sized>(d: usize, r: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(r))
}

/// Canonical configuration on `μ_n − μ_o = δ e_1` with identity covariance.
pub fn canonical(eta: f64, lambda_ref: f64, beta0: f64, u: (f64, f64), delta: f64, d: usize) -> Result<TttConfig> {
    Ok(TttConfig {
        eta,
        lambda_ref,
        beta0,
        reward: StepReward {
            u_old: u.0,
            u_new: u.1,
            partition: RewardPartition::BayesHalfspace,
        },
        geometry: ModePair::canonical(delta, d)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::fd;
    use crate::mixture::CovarianceModel;

    fn est() -> EstimatorConfig {
        EstimatorConfig::default()
    }

    #[test]
    fn equal_rewards_keep_reference() {
        let c = canonical(1.0, 0.5, 0.3, (0.7, 0.7), 3.0, 1).unwrap();
        let a = ttt_analysis(&c, &est()).unwrap();
        assert_eq!(a.case, TttCase::Reference);
        assert_eq!(a.beta_star, 0.3);
    }

    #[test]
    fn no_anchor_collapses() {
        let c = canonical(1.0, 0.0, 0.3, (0.0, 1.0), 3.0, 1).unwrap();
        let a = ttt_analysis(&c, &est()).unwrap();
        assert_eq!((a.beta_star, a.case), (0.0, TttCase::CollapseNew));
    }

    #[test]
    fn d_prime_matches_differences_and_vanishes_at_reference() {
        let c = canonical(1.0, 1.0, 0.4, (0.0, 1.0), 2.0, 1).unwrap();
        let m = TttModel::new(&c, &est()).unwrap();
        assert!(m.d_prime(0.4).abs() < 1e-12);
        assert!(m.d(0.4).abs() < 1e-14);
        for x in [0.1, 0.6, 0.85] {
            let h = 1e-5;
            let fdv = (m.d(x + h) - m.d(x - h)) / (2.0 * h);
            assert!((fdv - m.d_prime(x)).abs() < 1e-7, "{x}");
        }
    }

    #[test]
    fn threshold_separates_collapse_from_interior() {
        let c = canonical(1.0, 0.0, 0.5, (0.0, 1.0), 2.0, 1).unwrap();
        let crit = ttt_analysis(&c, &est()).unwrap().lambda_crit_new;
        assert!(crit > 0.0);
        let below = ttt_analysis(&c.with_lambda(0.98 * crit), &est()).unwrap();
        assert_eq!(below.case, TttCase::CollapseNew);
        let above = ttt_analysis(&c.with_lambda(1.05 * crit), &est()).unwrap();
        assert_eq!(above.case, TttCase::Interior);
        assert!(above.beta_star > 0.0 && above.beta_star < 0.5);
        let (arg, d2) = grid_argmax(&above.model, 2001);
        assert!((arg - above.beta_star).abs() < 2e-3);
        assert!(d2 <= 1e-9);
    }

    #[test]
    fn old_side_mirror() {
        let c = canonical(1.0, 0.0, 0.5, (1.0, 0.0), 2.0, 1).unwrap();
        let crit = ttt_analysis(&c, &est()).unwrap().lambda_crit_old;
        let above = ttt_analysis(&c.with_lambda(1.1 * crit), &est()).unwrap();
        assert_eq!(above.case, TttCase::Interior);
        assert!(above.beta_star > 0.5);
        let below = ttt_analysis(&c.with_lambda(0.9 * crit), &est()).unwrap();
        assert_eq!(below.case, TttCase::CollapseOld);
    }

    #[test]
    fn disjoint_anchor_is_always_interior() {
        let mut c = canonical(1.0, 0.2, 0.5, (0.0, 1.0), 2.0, 1).unwrap();
        c.reward.partition = RewardPartition::Disjoint;
        let a = ttt_analysis(&c, &est()).unwrap();
        assert_eq!(a.case, TttCase::Interior);
        let (arg, _) = grid_argmax(&a.model, 2001);
        assert!((arg - a.beta_star).abs() < 1e-3);
    }

    #[test]
    fn closed_form_j_matches_sampling() {
        let c = canonical(1.5, 0.0, 0.5, (-0.3, 0.8), 1.5, 2).unwrap();
        let m = TttModel::new(&c, &est()).unwrap();
        let (v, se) = j_monte_carlo(&c, 0.35, 200_000, 11).unwrap();
        assert!((v - m.j(0.35)).abs() < 4.0 * se, "{v} {} {se}", m.j(0.35));
    }

    #[test]
    fn old_mean_gradient_matches_differences() {
        let mut c = canonical(1.0, 0.0, 0.5, (0.0, 1.0), 3.0, 2).unwrap();
        c.geometry = ModePair::new(
            DVector::from_column_slice(&[0.2, -0.1]),
            DVector::from_column_slice(&[2.1, 1.4]),
            CovarianceModel::new(nalgebra::DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.8])).unwrap(),
        )
        .unwrap();
        let mn = DVector::from_column_slice(&[1.8, 1.9]);
        let beta = 0.37;
        let r = ttt_oldmean_gradient(beta, &mn, &c, &est()).unwrap();
        assert!(r.grad.norm() <= r.bound + 1e-10);
        let mo = c.geometry.mu_old.clone();
        let g = fd::gradient(
            |x| j_general_quadrature(beta, &DVector::from_column_slice(x), &mn, &c, &est()),
            mo.as_slice(),
            1e-4,
        )
        .unwrap();
        let rel = (&g - &r.grad).norm() / r.grad.norm();
        assert!(rel < 1e-4, "{rel} {g} {}", r.grad);
    }

    #[test]
    fn old_mean_gradient_vanishes_for_equal_rewards() {
        let c = canonical(1.0, 0.0, 0.5, (0.4, 0.4), 3.0, 1).unwrap();
        let r = ttt_oldmean_gradient(0.5, &DVector::from_element(1, 3.0), &c, &est()).unwrap();
        assert_eq!(r.grad.norm(), 0.0);
        assert!(r.anchor_grad.norm() < 1e-10);
    }
}
