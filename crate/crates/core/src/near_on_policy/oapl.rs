//! Exponential tilt of a frozen reference and the advantage regression.
//!
//! `q₀ = β₀ p_o + (1 − β₀) p_n`, `q⋆ = q₀ e^{r/τ} / Z`, `V⋆ = τ log Z`,
//! `A⋆ = r − V⋆`. The regression fits `q_{β,m_n}` by
//! `J(β, m_n) = E_{q₀}[(τ log(q_{β,m_n}/q₀) − A⋆)²]`.

use nalgebra::DVector;

use super::{check_prob, ModePair, RewardPartition, StepReward};
use crate::error::{Error, Result};
use crate::estimators::{batch_means, EstimatorConfig, Method, ReducedMixture, ReducedSpace, Split};
use crate::mixture::{BayesPartition, MixtureDensity, Region};
use crate::objectives::TargetSpec;
use crate::rng::CounterRng;
use crate::special::norm_cdf;

#[derive(Clone, Debug)]
pub struct OaplConfig {
    pub tau: f64,
    pub beta0: f64,
    /// `u_old`, `u_new` are the reward levels `r_o`, `r_n`.
    pub reward: StepReward,
    pub geometry: ModePair,
}

impl OaplConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::input("tau", "must be positive"));
        }
        check_prob("beta0", self.beta0)?;
        self.reward.validate()
    }

    pub fn reference(&self) -> MixtureDensity {
        let g = &self.geometry;
        MixtureDensity::two(self.beta0, &g.mu_old, &g.mu_new, &g.cov).expect("validated config")
    }

    pub fn canonical(tau: f64, beta0: f64, r: (f64, f64), delta: f64, d: usize) -> Result<Self> {
        Ok(OaplConfig {
            tau,
            beta0,
            reward: StepReward {
                u_old: r.0,
                u_new: r.1,
                partition: RewardPartition::BayesHalfspace,
            },
            geometry: ModePair::canonical(delta, d)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct OaplTarget {
    pub v_star: f64,
    pub z: f64,
    /// Old-mode mass on the new region (0 for disjoint supports).
    pub gamma: f64,
    /// `(1 − γ) e^{r_o/τ} + γ e^{r_n/τ}`.
    pub i_old: f64,
    /// `γ e^{r_o/τ} + (1 − γ) e^{r_n/τ}`.
    pub i_new: f64,
    /// Tilted old weight under disjoint supports.
    pub beta_star_disjoint: f64,
    /// `E_{q⋆}[β₀ p_o / q₀]`.
    pub expected_old_resp: f64,
    reference: MixtureDensity,
    partition: BayesPartition,
    reward: StepReward,
    tau: f64,
}

impl OaplTarget {
    /// Reward on the Bayes partition.
    pub fn reward_at(&self, y: &DVector<f64>) -> f64 {
        self.reward.level(self.partition.classify(y))
    }

    /// `log q₀(y) + r(y)/τ − log Z`.
    pub fn log_qstar(&self, y: &DVector<f64>) -> Result<f64> {
        Ok(self.reference.log_density(y)? + self.reward_at(y) / self.tau - self.z.ln())
    }

    /// `A⋆(y) = r(y) − V⋆`.
    pub fn advantage(&self, y: &DVector<f64>) -> f64 {
        self.reward_at(y) - self.v_star
    }
}

pub fn oapl_target(cfg: &OaplConfig) -> Result<OaplTarget> {
    cfg.validate()?;
    let g = &cfg.geometry;
    let gamma = match cfg.reward.partition {
        RewardPartition::Disjoint => 0.0,
        RewardPartition::BayesHalfspace => norm_cdf(-g.delta() / 2.0),
    };
    let eo = (cfg.reward.u_old / cfg.tau).exp();
    let en = (cfg.reward.u_new / cfg.tau).exp();
    let b0 = cfg.beta0;
    let i_old = (1.0 - gamma) * eo + gamma * en;
    let i_new = gamma * eo + (1.0 - gamma) * en;
    let z = b0 * i_old + (1.0 - b0) * i_new;
    Ok(OaplTarget {
        v_star: cfg.tau * z.ln(),
        z,
        gamma,
        i_old,
        i_new,
        beta_star_disjoint: b0 * eo / (b0 * eo + (1.0 - b0) * en),
        expected_old_resp: b0 * i_old / z,
        reference: cfg.reference(),
        partition: g.partition(),
        reward: cfg.reward,
        tau: cfg.tau,
    })
}

/// Self-normalized importance-sampling estimate from `q₀` with weights `e^{r/τ}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnisEstimate {
    pub value: f64,
    pub std_err: f64,
}

/// Sampling oracles for the tilted old weight (component labels, disjoint
/// supports) and the expected old responsibility (Bayes-halfspace reward).
pub fn oapl_sampling_oracle(cfg: &OaplConfig, n: usize, seed: u64) -> Result<(SnisEstimate, SnisEstimate)> {
    cfg.validate()?;
    let q0 = cfg.reference();
    let part = cfg.geometry.partition();
    let (ro, rn, tau) = (cfg.reward.u_old, cfg.reward.u_new, cfg.tau);
    // Columns: label weight, label weight × 1{old}, region weight, region weight × r_o⁽⁰⁾.
    let bm = batch_means(n, seed, 4, |r, _, out| {
        let (y, k) = q0.draw(r);
        let wl = (if k == 0 { ro } else { rn } / tau).exp();
        out[0] = wl;
        out[1] = if k == 0 { wl } else { 0.0 };
        let wr = (match part.classify(&y) {
            Region::Old => ro,
            Region::New => rn,
        } / tau)
            .exp();
        let resp = q0.responsibilities(&y).map(|v| v[0]).unwrap_or(f64::NAN);
        out[2] = wr;
        out[3] = wr * resp;
    });
    let (b, bse) = bm.jackknife(|x| x[1] / x[0]);
    let (e, ese) = bm.jackknife(|x| x[3] / x[2]);
    Ok((
        SnisEstimate { value: b, std_err: bse },
        SnisEstimate { value: e, std_err: ese },
    ))
}

/// Regression value, new-mean gradient and the old-mode part of the
/// gradient at the synchronized point.
#[derive(Clone, Debug)]
pub struct OaplRegression {
    pub j_value: f64,
    /// `2τ E_{q₀}[Δ r_n Σ⁻¹(Y − m_n)]`.
    pub grad_m: DVector<f64>,
    /// `2τ β₀ E_{p_o}[A⋆ r_n Σ⁻¹(Y − μ_n)]` at `(β₀, μ_n)`.
    pub oldmode_term: DVector<f64>,
    /// `4τRβ₀ √M √ε`.
    pub oldmode_bound: f64,
    /// `tr(Σ⁻¹) + ‖Σ⁻¹(μ_o − μ_n)‖²`.
    pub m_on: f64,
    /// `E_{p_o}[r_n]` under the reference.
    pub eps_ref: f64,
    /// `½ √((1 − β₀)/β₀) e^{−δ²/8}`.
    pub eps_ref_bound: f64,
}

struct Reduced {
    space: ReducedSpace,
    q0: ReducedMixture,
    q: ReducedMixture,
    a_m: Vec<f64>,
    cut: f64,
}

fn reduced(cfg: &OaplConfig, beta: f64, m_new: &DVector<f64>) -> Reduced {
    let g = &cfg.geometry;
    let space = ReducedSpace::new(&g.cov, &[&g.mu_old, &g.mu_new, m_new]);
    let ao = space.point(&g.mu_old);
    let an = space.point(&g.mu_new);
    let a_m = space.point(m_new);
    Reduced {
        q0: ReducedMixture::two(cfg.beta0, ao.clone(), an),
        q: ReducedMixture::two(beta, ao, a_m.clone()),
        a_m,
        cut: g.delta() / 2.0,
        space,
    }
}

fn check_point(cfg: &OaplConfig, beta: f64, m_new: &DVector<f64>) -> Result<()> {
    cfg.validate()?;
    check_prob("beta", beta)?;
    if m_new.len() != cfg.geometry.cov.dim() || m_new.iter().any(|x| !x.is_finite()) {
        return Err(Error::input("m_new", "wrong dimension or non-finite entries"));
    }
    if cfg.reward.partition != RewardPartition::BayesHalfspace {
        return Err(Error::Precondition(
            "the regression uses the Bayes halfspace reward".into(),
        ));
    }
    Ok(())
}

/// `J(β, m_n)` alone.
pub fn oapl_regression_value(beta: f64, m_new: &DVector<f64>, cfg: &OaplConfig, est: &EstimatorConfig) -> Result<f64> {
    check_point(cfg, beta, m_new)?;
    let t = oapl_target(cfg)?;
    let tau = cfg.tau;
    match est.method {
        Method::ProjectedQuadrature => {
            let rd = reduced(cfg, beta, m_new);
            let (ro, rn, cut) = (cfg.reward.u_old, cfg.reward.u_new, rd.cut);
            Ok(est
                .quadrature()
                .expect_mixture1(&rd.q0, Some(Split { axis: 0, at: cut }), |u| {
                    let r = if u[0] >= cut { rn } else { ro };
                    let delta = tau * (rd.q.log_density(u) - rd.q0.log_density(u)) - (r - t.v_star);
                    delta * delta
                }))
        }
        Method::MonteCarlo => {
            let q0 = cfg.reference();
            let g = &cfg.geometry;
            let q = MixtureDensity::two(beta, &g.mu_old, m_new, &g.cov)?;
            let e = crate::estimators::mc_mean(est.mc_samples, est.seed, 1, |r, _, out| {
                let (y, _) = q0.draw(r);
                let l = q.log_density(&y).unwrap_or(f64::NAN) - q0.log_density(&y).unwrap_or(f64::NAN);
                let delta = tau * l - t.advantage(&y);
                out[0] = delta * delta;
            });
            Ok(e.mean[0])
        }
    }
}

pub fn oapl_regression_grad(
    beta: f64,
    m_new: &DVector<f64>,
    cfg: &OaplConfig,
    est: &EstimatorConfig,
) -> Result<OaplRegression> {
    check_point(cfg, beta, m_new)?;
    let t = oapl_target(cfg)?;
    let tau = cfg.tau;
    let g = &cfg.geometry;
    let (ro, rn) = (cfg.reward.u_old, cfg.reward.u_new);
    let quad = est.quadrature();
    let rd = reduced(cfg, beta, m_new);
    let r = rd.space.rank();
    let cut = rd.cut;
    let split = Some(Split { axis: 0, at: cut });
    let mut resp = [0.0; 2];
    let v = quad.expect_mixture(&rd.q0, split, 1 + r, |u, out| {
        let rew = if u[0] >= cut { rn } else { ro };
        let delta = tau * (rd.q.log_density(u) - rd.q0.log_density(u)) - (rew - t.v_star);
        rd.q.responsibilities(u, &mut resp);
        out[0] = delta * delta;
        for k in 0..r {
            out[1 + k] = delta * resp[1] * (u[k] - rd.a_m[k]);
        }
    });
    let grad_m = rd.space.score_map(&v[1..]) * (2.0 * tau);

    // Old-mode part at the synchronized point (β₀, μ_n).
    let sync = reduced(cfg, cfg.beta0, &g.mu_new);
    let rs = sync.space.rank();
    let an = sync.q0.means[1].clone();
    let ao = sync.q0.means[0].clone();
    let w = quad.expect_gaussian(&ao, split, 1 + rs, |u, out| {
        sync.q0.responsibilities(u, &mut resp);
        let rew = if u[0] >= cut { rn } else { ro };
        out[0] = resp[1];
        for k in 0..rs {
            out[1 + k] = (rew - t.v_star) * resp[1] * (u[k] - an[k]);
        }
    });
    let oldmode_term = sync.space.score_map(&w[1..]) * (2.0 * tau * cfg.beta0);
    let eps_ref = w[0];
    let dmu = &g.mu_old - &g.mu_new;
    let m_on = g.cov.inverse().trace() + g.cov.solve(&dmu).norm_squared();
    let big_r = cfg.reward.bound();
    let oldmode_bound = 4.0 * tau * big_r * cfg.beta0 * m_on.sqrt() * eps_ref.sqrt();
    let eps_ref_bound = 0.5 * ((1.0 - cfg.beta0) / cfg.beta0).sqrt() * (-g.delta().powi(2) / 8.0).exp();
    if !v[0].is_finite() || grad_m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("regression gradient is not finite".into()));
    }
    Ok(OaplRegression {
        j_value: v[0],
        grad_m,
        oldmode_term,
        oldmode_bound,
        m_on,
        eps_ref,
        eps_ref_bound,
    })
}

/// Tilting `q_{β₀}` by `r = τ log(p_α / q_{β₀})` must give back `p_α`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TiltRecovery {
    /// `log Z` by quadrature (0 in exact arithmetic).
    pub log_z: f64,
    pub max_log_err: f64,
    pub max_density_err: f64,
}

pub fn tilt_recovery_check(
    spec: &TargetSpec,
    beta0: f64,
    tau: f64,
    probes: usize,
    seed: u64,
    est: &EstimatorConfig,
) -> Result<TiltRecovery> {
    check_prob("beta0", beta0)?;
    if !(tau > 0.0) {
        return Err(Error::input("tau", "must be positive"));
    }
    let p = spec.p_alpha();
    let q0 = MixtureDensity::two(beta0, &spec.mu_old, &spec.mu_new, &spec.cov)?;
    let space = ReducedSpace::for_mixtures(&[&q0, &p]);
    let rq = space.reduce(&q0);
    let rp = space.reduce(&p);
    // Z = E_{q₀}[e^{r/τ}] with r/τ = log p_α − log q₀.
    let log_z = est
        .quadrature()
        .expect_mixture1(&rq, None, |u| (rp.log_density(u) - rq.log_density(u)).exp())
        .ln();
    let rng = CounterRng::new(seed);
    let mut max_log: f64 = 0.0;
    let mut max_den: f64 = 0.0;
    for i in 0..probes {
        let mut r = rng.stream(i as u64);
        // Probes spread wider than either mode.
        let (y0, _) = q0.draw(&mut r);
        let y = &spec.mu_old + (&y0 - &spec.mu_old) * 1.5;
        let lq0 = q0.log_density(&y)?;
        let lp = p.log_density(&y)?;
        let reward = tau * (lp - lq0);
        let lstar = lq0 + reward / tau - log_z;
        max_log = max_log.max((lstar - lp).abs());
        max_den = max_den.max((lstar.exp() - lp.exp()).abs());
    }
    Ok(TiltRecovery {
        log_z,
        max_log_err: max_log,
        max_density_err: max_den,
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
    fn equal_rewards_leave_reference_unchanged() {
        let c = OaplConfig::canonical(0.7, 0.35, (0.4, 0.4), 3.0, 1).unwrap();
        let t = oapl_target(&c).unwrap();
        assert!((t.beta_star_disjoint - 0.35).abs() < 1e-15);
        assert!((t.expected_old_resp - 0.35).abs() < 1e-15);
    }

    #[test]
    fn disjoint_weight_example() {
        let mut c = OaplConfig::canonical(1.0, 0.5, (0.0, 2f64.ln()), 3.0, 1).unwrap();
        c.reward.partition = RewardPartition::Disjoint;
        let t = oapl_target(&c).unwrap();
        assert!((t.beta_star_disjoint - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.expected_old_resp - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn expected_responsibility_matches_sampling() {
        let c = OaplConfig::canonical(1.0, 0.4, (0.0, 1.0), 3.0, 1).unwrap();
        let t = oapl_target(&c).unwrap();
        let (b, e) = oapl_sampling_oracle(&c, 400_000, 5).unwrap();
        assert!(
            (e.value - t.expected_old_resp).abs() < 4.0 * e.std_err,
            "{e:?} {}",
            t.expected_old_resp
        );
        assert!(
            (b.value - t.beta_star_disjoint).abs() < 4.0 * b.std_err,
            "{b:?} {}",
            t.beta_star_disjoint
        );
    }

    #[test]
    fn constant_reward_at_sync_has_zero_gradient() {
        let c = OaplConfig::canonical(1.0, 0.4, (0.5, 0.5), 3.0, 2).unwrap();
        let g = oapl_regression_grad(0.4, &c.geometry.mu_new.clone(), &c, &est()).unwrap();
        assert!(g.j_value < 1e-24);
        assert!(g.grad_m.norm() < 1e-12);
    }

    #[test]
    fn gradient_matches_differences() {
        let g = ModePair::new(
            DVector::from_column_slice(&[0.3, -0.2]),
            DVector::from_column_slice(&[1.9, 1.1]),
            CovarianceModel::new(nalgebra::DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.2, 1.1])).unwrap(),
        )
        .unwrap();
        let c = OaplConfig {
            tau: 0.8,
            beta0: 0.45,
            reward: StepReward {
                u_old: -0.2,
                u_new: 0.9,
                partition: RewardPartition::BayesHalfspace,
            },
            geometry: g,
        };
        let beta = 0.3;
        let mn = DVector::from_column_slice(&[1.5, 1.6]);
        let r = oapl_regression_grad(beta, &mn, &c, &est()).unwrap();
        let v = oapl_regression_value(beta, &mn, &c, &est()).unwrap();
        assert!((v - r.j_value).abs() < 1e-12);
        let fdg = fd::gradient(
            |x| oapl_regression_value(beta, &DVector::from_column_slice(x), &c, &est()).unwrap(),
            mn.as_slice(),
            1e-4,
        )
        .unwrap();
        let rel = (&fdg - &r.grad_m).norm() / r.grad_m.norm();
        assert!(rel < 1e-4, "{rel}");
    }

    #[test]
    fn old_mode_term_respects_bound() {
        let c = OaplConfig::canonical(1.0, 0.5, (0.0, 1.0), 6.0, 1).unwrap();
        let r = oapl_regression_grad(0.5, &c.geometry.mu_new.clone(), &c, &est()).unwrap();
        assert!(r.oldmode_term.norm() <= r.oldmode_bound);
        assert!(r.eps_ref <= r.eps_ref_bound);
        let loose = 2.0 * r.m_on.sqrt() * 0.5f64.sqrt() * (-36.0f64 / 16.0).exp();
        assert!(r.oldmode_bound <= loose);
    }

    #[test]
    fn tilt_recovers_target() {
        let spec = TargetSpec::canonical(0.3, 2.5, 2).unwrap();
        let t = tilt_recovery_check(&spec, 0.6, 0.7, 1000, 3, &est()).unwrap();
        assert!(t.log_z.abs() < 1e-12);
        assert!(t.max_log_err < 1e-10 && t.max_density_err < 1e-10);
    }
}
