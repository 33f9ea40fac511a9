//! Expectation and divergence estimators, plus the oracle toolkit.
//!
//! Two routes compute any expectation: projected quadrature (see
//! [`quadrature`]) and Monte Carlo with counter-keyed streams (see
//! [`montecarlo`]). [`fd`] supplies finite-difference gradients and
//! Hessians. [`fgen`] holds the f-divergence generators.

pub mod fd;
pub mod fgen;
pub mod montecarlo;
pub mod quadrature;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::MixtureDensity;

pub use fd::{finite_difference_oracle, DEFAULT_STEP};
pub use fgen::{FGenerator, FKind};
pub use montecarlo::{batch_means, mc_mean, BatchMeans, McEstimate};
pub use quadrature::{Quadrature, ReducedMixture, ReducedSpace, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ProjectedQuadrature,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub method: Method,
    pub quad_order: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub rel_tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            method: Method::ProjectedQuadrature,
            quad_order: 200,
            mc_samples: 100_000,
            seed: 20_240_601,
            rel_tol: 1e-6,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.quad_order < 16 {
            return Err(Error::input("estimator.quad_order", "must be at least 16"));
        }
        if self.mc_samples < 1000 {
            return Err(Error::input("estimator.mc_samples", "must be at least 1000"));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol <= 1e-2) {
            return Err(Error::input("estimator.rel_tol", "must lie in (0, 1e-2]"));
        }
        Ok(())
    }

    pub fn quadrature(&self) -> Quadrature {
        Quadrature::new(self.quad_order)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        EstimatorConfig { seed, ..self.clone() }
    }

    pub fn with_method(&self, method: Method) -> Self {
        EstimatorConfig { method, ..self.clone() }
    }
}

fn same_cov(q: &MixtureDensity, p: &MixtureDensity) -> Result<()> {
    if q.dim() != p.dim() {
        return Err(Error::input("p", "mixtures have different dimensions"));
    }
    if (q.cov().sigma() - p.cov().sigma()).amax() > 1e-12 * q.cov().sigma().amax() {
        return Err(Error::input("p", "mixtures must share one covariance"));
    }
    Ok(())
}

/// `D_gen(q‖p) = ∫ p f(q/p)`, integrated under `p`.
pub fn divergence(q: &MixtureDensity, p: &MixtureDensity, gen: &FGenerator, cfg: &EstimatorConfig) -> Result<f64> {
    same_cov(q, p)?;
    let v = match cfg.method {
        Method::ProjectedQuadrature => {
            let space = ReducedSpace::for_mixtures(&[p, q]);
            let rp = space.reduce(p);
            let rq = space.reduce(q);
            cfg.quadrature()
                .expect_mixture1(&rp, None, |u| gen.f_log(rq.log_density(u) - rp.log_density(u)))
        }
        Method::MonteCarlo => {
            let e = mc_mean(cfg.mc_samples, cfg.seed, 1, |r, _, out| {
                let (y, _) = p.draw(r);
                let l = q.log_density(&y).unwrap_or(f64::NAN) - p.log_density(&y).unwrap_or(f64::NAN);
                out[0] = gen.f_log(l);
            });
            e.mean[0]
        }
    };
    if !v.is_finite() {
        return Err(Error::Numeric(format!("divergence {} is not finite", gen.name())));
    }
    Ok(v)
}

/// Expectation of a vector-valued `h` under a mixture.
///
/// With projected quadrature the integrand is evaluated at points of the
/// span of the mixture means (plus `extra` directions); the caller asserts
/// that `h` depends on `y` only through that span, or affinely on the rest.
/// Monte Carlo returns standard errors, quadrature does not.
pub fn expectation<H>(
    density: &MixtureDensity,
    extra: &[&DVector<f64>],
    m: usize,
    h: H,
    cfg: &EstimatorConfig,
) -> Result<(Vec<f64>, Option<Vec<f64>>)>
where
    H: Fn(&DVector<f64>) -> Vec<f64> + Sync,
{
    match cfg.method {
        Method::ProjectedQuadrature => {
            let mut pts: Vec<&DVector<f64>> = density.means().iter().collect();
            pts.extend_from_slice(extra);
            let space = ReducedSpace::new(density.cov(), &pts);
            let rm = space.reduce(density);
            let mut bad = false;
            let v = cfg.quadrature().expect_mixture(&rm, None, m, |u, out| {
                let val = h(&space.lift(u));
                if val.len() != m {
                    bad = true;
                    return;
                }
                out.copy_from_slice(&val);
            });
            if bad {
                return Err(Error::Method("integrand returned the wrong length".into()));
            }
            Ok((v, None))
        }
        Method::MonteCarlo => {
            let e = mc_mean(cfg.mc_samples, cfg.seed, m, |r, _, out| {
                let (y, _) = density.draw(r);
                let val = h(&y);
                for (o, v) in out.iter_mut().zip(val) {
                    *o = v;
                }
            });
            Ok((e.mean, Some(e.std_err)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::CovarianceModel;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn gaussian_kl_closed_form() {
        let cov = CovarianceModel::identity(2);
        let q = MixtureDensity::single(&v(&[0.0, 0.0]), &cov).unwrap();
        let p = MixtureDensity::single(&v(&[1.0, -2.0]), &cov).unwrap();
        let d = divergence(&q, &p, &FGenerator::kl(), &EstimatorConfig::default()).unwrap();
        assert!((d - 2.5).abs() < 1e-10);
    }

    #[test]
    fn identical_mixtures_have_zero_divergence() {
        let cov = CovarianceModel::identity(1);
        let q = MixtureDensity::two(0.3, &v(&[0.0]), &v(&[2.0]), &cov).unwrap();
        for g in FGenerator::catalogue() {
            let d = divergence(&q, &q, &g, &EstimatorConfig::default()).unwrap();
            assert!(d.abs() < 1e-9, "{}", g.name());
        }
    }

    #[test]
    fn normalization_and_mean() {
        let cov = CovarianceModel::identity(2);
        let m = MixtureDensity::single(&v(&[1.5, -0.5]), &cov).unwrap();
        let cfg = EstimatorConfig::default();
        let (one, _) = expectation(&m, &[], 1, |_| vec![1.0], &cfg).unwrap();
        assert!((one[0] - 1.0).abs() < 1e-14);
        let (mean, _) = expectation(&m, &[], 2, |y| vec![y[0], y[1]], &cfg).unwrap();
        assert!((mean[0] - 1.5).abs() < 1e-12 && (mean[1] + 0.5).abs() < 1e-12);
        let mc = cfg.with_method(Method::MonteCarlo);
        let (mean, se) = expectation(&m, &[], 2, |y| vec![y[0], y[1]], &mc).unwrap();
        let se = se.unwrap();
        assert!((mean[0] - 1.5).abs() < 4.0 * se[0]);
    }

    #[test]
    fn config_validation() {
        let mut c = EstimatorConfig::default();
        assert!(c.validate().is_ok());
        c.quad_order = 8;
        assert!(c.validate().is_err());
        c = EstimatorConfig {
            rel_tol: 0.5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
