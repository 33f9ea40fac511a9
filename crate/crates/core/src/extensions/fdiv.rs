//! Forgetting under general f-divergences.
//!
//! SFT side: `D_f(p_n ‖ q_β)` is zero at `β = 0` and increases in `β` for
//! every generator. RL side: the old-mean gradient of `D_f(q ‖ p_α)` splits
//! into misassignment terms weighted by the curvature `κ(w) = w f''(w)`
//! evaluated at the density ratio `w = q/p_α`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::estimators::{divergence, EstimatorConfig, FGenerator, ReducedMixture, ReducedSpace};
use crate::mixture::MixtureDensity;
use crate::objectives::TargetSpec;

/// Points of the `β` grid used by [`fdiv_sft_scan`].
pub const SCAN_POINTS: usize = 101;

#[derive(Clone, Debug, PartialEq)]
pub struct FdivScan {
    pub betas: Vec<f64>,
    /// `D_gen(p_n ‖ q_β)` at each grid point.
    pub losses: Vec<f64>,
    /// Every consecutive difference is strictly positive.
    pub monotone: bool,
}

/// `q_β = β p_o + (1 − β) p_n`; the endpoint `β = 0` is the single new mode.
fn sft_model(beta: f64, spec: &TargetSpec) -> Result<MixtureDensity> {
    if beta == 0.0 {
        MixtureDensity::single(&spec.mu_new, &spec.cov)
    } else {
        MixtureDensity::two(beta, &spec.mu_old, &spec.mu_new, &spec.cov)
    }
}

/// `D_gen(p_n ‖ q_β)`, integrated under `p_n` as `D_{gen◇}(q_β ‖ p_n)`.
pub fn fdiv_sft_loss(gen: &FGenerator, beta: f64, spec: &TargetSpec, cfg: &EstimatorConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::input("beta", format!("{beta} is outside [0, 1]")));
    }
    let pn = MixtureDensity::single(&spec.mu_new, &spec.cov)?;
    let q = sft_model(beta, spec)?;
    divergence(&q, &pn, &gen.adjoint(), cfg)
}

/// The same loss integrated under `q_β` directly, without the adjoint.
pub fn fdiv_sft_loss_direct(gen: &FGenerator, beta: f64, spec: &TargetSpec, cfg: &EstimatorConfig) -> Result<f64> {
    let pn = MixtureDensity::single(&spec.mu_new, &spec.cov)?;
    let q = sft_model(beta, spec)?;
    divergence(&pn, &q, gen, cfg)
}

pub fn fdiv_sft_scan(gen: &FGenerator, spec: &TargetSpec, cfg: &EstimatorConfig) -> Result<FdivScan> {
    let betas: Vec<f64> = (0..SCAN_POINTS).map(|i| i as f64 / (SCAN_POINTS - 1) as f64).collect();
    let losses = betas
        .iter()
        .map(|&b| fdiv_sft_loss(gen, b, spec, cfg))
        .collect::<Result<Vec<_>>>()?;
    let monotone = losses.windows(2).all(|w| w[1] > w[0]);
    Ok(FdivScan {
        betas,
        losses,
        monotone,
    })
}

/// Old-mean gradient of `D_gen(q ‖ p_α)` at `m_o = μ_o`.
#[derive(Clone, Debug, PartialEq)]
pub struct FdivDrift {
    pub grad: DVector<f64>,
    /// `E_{p_o}[κ(w)(1 − r_o)]`.
    pub a_f: f64,
    /// `E_{p_o}[κ(w)(1 − s_o)]`.
    pub b_f: f64,
    /// `E_{p_o}[1 − r_o]` and `E_{p_o}[1 − s_o]`.
    pub eps_q: f64,
    pub eps_p: f64,
    /// `β sup κ ‖Σ⁻¹‖₂ (ε_q ‖m_n − μ_o‖ + ε_p ‖μ_n − μ_o‖)`; infinite when
    /// the curvature is unbounded.
    pub bound: f64,
}

pub fn fdiv_oldmean_grad(
    gen: &FGenerator,
    beta: f64,
    m_new: &DVector<f64>,
    spec: &TargetSpec,
    cfg: &EstimatorConfig,
) -> Result<FdivDrift> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::input("beta", format!("{beta} is not in (0, 1)")));
    }
    if m_new.len() != spec.dim() {
        return Err(Error::input("m_new", format!("expected length {}", spec.dim())));
    }
    let space = ReducedSpace::new(&spec.cov, &[&spec.mu_old, &spec.mu_new, m_new]);
    let a_o = space.point(&spec.mu_old);
    let q = ReducedMixture::two(beta, a_o.clone(), space.point(m_new));
    let p = ReducedMixture::two(spec.alpha, a_o.clone(), space.point(&spec.mu_new));
    let mut rq = [0.0; 2];
    let mut rp = [0.0; 2];
    let v = cfg.quadrature().expect_gaussian(&a_o, None, 4, |u, out| {
        let w = (q.log_density(u) - p.log_density(u)).exp();
        let k = gen.kappa(w);
        q.responsibilities(u, &mut rq);
        p.responsibilities(u, &mut rp);
        out[0] = k * rq[1];
        out[1] = k * rp[1];
        out[2] = rq[1];
        out[3] = rp[1];
    });
    let (a_f, b_f, eps_q, eps_p) = (v[0], v[1], v[2], v[3]);
    if !(a_f.is_finite() && b_f.is_finite()) {
        return Err(Error::Numeric(format!(
            "curvature weights for {} are not finite",
            gen.name()
        )));
    }
    let dq = m_new - &spec.mu_old;
    let dp = &spec.mu_new - &spec.mu_old;
    let grad = spec.cov.solve(&(&dq * a_f - &dp * b_f)) * beta;
    let ks = gen.kappa_sup();
    let bound = if ks.is_finite() {
        beta * ks * spec.cov.inv_op_norm() * (eps_q * dq.norm() + eps_p * dp.norm())
    } else {
        f64::INFINITY
    };
    Ok(FdivDrift {
        grad,
        a_f,
        b_f,
        eps_q,
        eps_p,
        bound,
    })
}

/// `D_gen(q ‖ p_α)` as a function of the old learner mean; the FD oracle
/// for [`fdiv_oldmean_grad`].
pub fn fdiv_rl_loss(
    gen: &FGenerator,
    beta: f64,
    m_old: &DVector<f64>,
    m_new: &DVector<f64>,
    spec: &TargetSpec,
    cfg: &EstimatorConfig,
) -> Result<f64> {
    let q = MixtureDensity::two(beta, m_old, m_new, &spec.cov)?;
    divergence(&q, &spec.p_alpha(), gen, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::fd;
    use crate::estimators::FKind;
    use crate::mixture::LearnerParams;
    use crate::objectives::{oldmean_drift, SftProblem};

    fn cfg() -> EstimatorConfig {
        EstimatorConfig {
            quad_order: 120,
            ..Default::default()
        }
    }

    #[test]
    fn kl_scan_matches_forward_kl() {
        let spec = TargetSpec::canonical(0.3, 2.0, 2).unwrap();
        let scan = fdiv_sft_scan(&FGenerator::kl(), &spec, &cfg()).unwrap();
        let sft = SftProblem::new(&spec, &cfg());
        for (b, l) in scan.betas.iter().zip(&scan.losses) {
            assert!((sft.loss(*b) - l).abs() < 1e-8, "beta {b}: {} vs {l}", sft.loss(*b));
        }
        assert!(scan.monotone);
        assert!(scan.losses[0].abs() < 1e-12);
    }

    #[test]
    fn adjoint_route_matches_direct_route() {
        let spec = TargetSpec::canonical(0.5, 1.5, 1).unwrap();
        for g in FGenerator::catalogue() {
            for b in [0.1, 0.5, 0.9] {
                let a = fdiv_sft_loss(&g, b, &spec, &cfg()).unwrap();
                let d = fdiv_sft_loss_direct(&g, b, &spec, &cfg()).unwrap();
                assert!((a - d).abs() < 1e-8 * (1.0 + a.abs()), "{}: {a} vs {d}", g.name());
            }
        }
    }

    #[test]
    fn kl_gradient_is_the_drift_gradient() {
        let spec = TargetSpec::canonical(0.4, 2.5, 2).unwrap();
        let m_new = DVector::from_vec(vec![2.0, 0.4]);
        let r = fdiv_oldmean_grad(&FGenerator::kl(), 0.35, &m_new, &spec, &cfg()).unwrap();
        let learner = LearnerParams::from_beta(0.35, spec.mu_old.clone(), m_new.clone()).unwrap();
        let drift = oldmean_drift(&learner, &spec, &cfg()).unwrap();
        assert!((&r.grad - &drift.grad).amax() < 1e-12);
        assert!((r.a_f - r.eps_q).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_fd_for_all_generators() {
        let spec = TargetSpec::canonical(0.4, 2.0, 2).unwrap();
        let m_new = DVector::from_vec(vec![1.6, -0.3]);
        let beta = 0.45;
        let c = cfg();
        for g in FGenerator::catalogue() {
            let r = fdiv_oldmean_grad(&g, beta, &m_new, &spec, &c).unwrap();
            let num = fd::gradient(
                |x| fdiv_rl_loss(&g, beta, &DVector::from_column_slice(x), &m_new, &spec, &c).unwrap(),
                spec.mu_old.as_slice(),
                1e-4,
            )
            .unwrap();
            let err = (&r.grad - &num).norm() / r.grad.norm().max(1e-8);
            assert!(err < 1e-4, "{}: {} vs {}", g.name(), r.grad, num);
        }
    }

    #[test]
    fn bounded_curvature_bound_holds() {
        let spec = TargetSpec::canonical(0.5, 6.0, 2).unwrap();
        let m_new = DVector::from_vec(vec![5.5, 0.5]);
        for g in [
            FGenerator::kl(),
            FGenerator::new(FKind::Js).unwrap(),
            FGenerator::new(FKind::Triangular).unwrap(),
        ] {
            let r = fdiv_oldmean_grad(&g, 0.5, &m_new, &spec, &cfg()).unwrap();
            assert!(r.bound.is_finite());
            assert!(r.grad.norm() <= r.bound * (1.0 + 1e-12), "{}", g.name());
        }
        let r = fdiv_oldmean_grad(&FGenerator::new(FKind::Pearson).unwrap(), 0.5, &m_new, &spec, &cfg()).unwrap();
        assert!(r.bound.is_infinite());
    }
}
