//! Replay-mixed behavior sampling for the reverse-KL objective.
//!
//! The behavior `b = (1 − λ) q + λ p_o` draws a fraction `λ` of true old
//! samples. Reweighting by `w = q/b ≤ 1/(1 − λ)` keeps expectations under
//! `q` unbiased, and every minibatch of size `N` carries old-mode samples
//! with probability at least `1 − (1 − λ)^N`.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::estimators::batch_means;
use crate::mixture::{CovarianceModel, LearnerParams, MixtureDensity};

/// Learner `q` together with the replay-mixed behavior it samples from.
#[derive(Clone, Debug)]
pub struct ReplayBehavior {
    pub lambda: f64,
    pub learner: LearnerParams,
    /// `(1 − λ) q + λ p_o`; two components when `m_o = μ_o`.
    pub behavior: MixtureDensity,
    /// Old weight of the behavior, `λ + (1 − λ) β`.
    pub beta_tilde: f64,
    q: MixtureDensity,
}

impl ReplayBehavior {
    pub fn new(lambda: f64, learner: LearnerParams, mu_old: &DVector<f64>, cov: &CovarianceModel) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::input("lambda", format!("{lambda} is not in (0, 1)")));
        }
        let q = learner.mixture(cov)?;
        let beta = learner.beta();
        let beta_tilde = lambda + (1.0 - lambda) * beta;
        let behavior = if learner.m_old == *mu_old {
            MixtureDensity::two(beta_tilde, mu_old, &learner.m_new, cov)?
        } else {
            MixtureDensity::new(
                vec![(1.0 - lambda) * beta, (1.0 - lambda) * (1.0 - beta), lambda],
                vec![learner.m_old.clone(), learner.m_new.clone(), mu_old.clone()],
                cov.clone(),
            )?
        };
        Ok(ReplayBehavior {
            lambda,
            learner,
            behavior,
            beta_tilde,
            q,
        })
    }

    pub fn learner_density(&self) -> &MixtureDensity {
        &self.q
    }

    /// `q(y)/b(y)`, evaluated from log densities.
    pub fn importance_weight(&self, y: &DVector<f64>) -> Result<f64> {
        let lq = self.q.log_density(y)?;
        let lb = self.behavior.log_density(y)?;
        Ok((lq - lb).exp())
    }

    pub fn weight_bound(&self) -> f64 {
        1.0 / (1.0 - self.lambda)
    }
}

/// Importance-weighted mean of `h` under the behavior.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedEstimate {
    pub estimate: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Sample mean of `‖w h‖²`.
    pub second_moment_wh: f64,
    /// Sample mean of `‖h‖²`.
    pub second_moment_h: f64,
    pub max_weight: f64,
}

/// Average `w(Y) h(Y)` over `n` behavior samples: unbiased for `E_q[h]`.
pub fn weighted_estimate<H>(rb: &ReplayBehavior, h: H, m: usize, n: usize, seed: u64) -> Result<WeightedEstimate>
where
    H: Fn(&DVector<f64>) -> Vec<f64> + Sync,
{
    if n < 2 {
        return Err(Error::input("n", "need at least two samples"));
    }
    // Slots: m weighted values, ‖wh‖², ‖h‖², then the weight.
    let bm = batch_means(n, seed, m + 3, |r, _, out| {
        let (y, _) = rb.behavior.draw(r);
        let w = rb.importance_weight(&y).unwrap_or(f64::NAN);
        let hv = h(&y);
        let mut hh = 0.0;
        for k in 0..m {
            out[k] = w * hv[k];
            hh += hv[k] * hv[k];
        }
        out[m] = w * w * hh;
        out[m + 1] = hh;
        out[m + 2] = w;
    });
    let est = bm.estimate();
    // The largest weight is a maximum, not a mean; recompute it directly.
    let max_weight = max_weight(rb, n.min(100_000), seed)?;
    if est.mean.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("weighted estimate is not finite".into()));
    }
    Ok(WeightedEstimate {
        estimate: est.mean[..m].to_vec(),
        std_err: est.std_err[..m].to_vec(),
        second_moment_wh: est.mean[m],
        second_moment_h: est.mean[m + 1],
        max_weight,
    })
}

/// Largest importance weight over `n` behavior samples.
pub fn max_weight(rb: &ReplayBehavior, n: usize, seed: u64) -> Result<f64> {
    use rayon::prelude::*;
    let rng = crate::rng::CounterRng::new(seed);
    let m = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.stream(i);
            let (y, _) = rb.behavior.draw(&mut r);
            rb.importance_weight(&y).unwrap_or(f64::NAN)
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    if m.is_nan() {
        return Err(Error::Numeric("importance weight is not finite".into()));
    }
    Ok(m)
}

/// Minibatch visibility of the old mode under replay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OldSampleStats {
    /// `((1 − λ)(1 − β))^N`.
    pub p_none_exact: f64,
    pub p_none_emp: f64,
    /// Binomial standard error of `p_none_emp` at the exact probability.
    pub p_none_se: f64,
    /// `exp(−λ N / 8)`.
    pub chernoff: f64,
    /// Empirical `Pr(old count ≤ λ N / 2)`.
    pub tail_emp: f64,
    pub tail_se: f64,
}

/// Simulate `trials` minibatches of `n_batch` behavior labels.
pub fn old_sample_statistics(
    lambda: f64,
    beta: f64,
    n_batch: usize,
    trials: usize,
    seed: u64,
) -> Result<OldSampleStats> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::input("lambda", format!("{lambda} is not in [0, 1)")));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::input("beta", format!("{beta} is not in [0, 1]")));
    }
    if n_batch == 0 {
        return Err(Error::input("batch_size", "must be at least 1"));
    }
    if trials < 1000 {
        return Err(Error::input("trials", "must be at least 1000"));
    }
    let beta_tilde = lambda + (1.0 - lambda) * beta;
    let half = lambda * n_batch as f64 / 2.0;
    let bm = batch_means(trials, seed, 2, |r, _, out| {
        let mut old = 0usize;
        for _ in 0..n_batch {
            if r.random::<f64>() < beta_tilde {
                old += 1;
            }
        }
        out[0] = (old == 0) as u8 as f64;
        out[1] = (old as f64 <= half) as u8 as f64;
    });
    let est = bm.estimate();
    let p_none_exact = ((1.0 - lambda) * (1.0 - beta)).powi(n_batch as i32);
    let chernoff = (-lambda * n_batch as f64 / 8.0).exp();
    let t = trials as f64;
    let tail_emp = est.mean[1];
    Ok(OldSampleStats {
        p_none_exact,
        p_none_emp: est.mean[0],
        p_none_se: (p_none_exact * (1.0 - p_none_exact) / t).sqrt(),
        chernoff,
        tail_emp,
        tail_se: (chernoff * (1.0 - chernoff) / t).sqrt(),
    })
}

/// No-old-sample frequency without and with replay at a small `β`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StarvationContrast {
    pub without_replay: f64,
    pub with_replay: f64,
    /// `(1 − λ)^N`, the replay ceiling on the no-old probability.
    pub replay_ceiling: f64,
}

pub fn starvation_contrast(
    lambda: f64,
    beta: f64,
    n_batch: usize,
    trials: usize,
    seed: u64,
) -> Result<StarvationContrast> {
    let a = old_sample_statistics(0.0, beta, n_batch, trials, seed)?;
    let b = old_sample_statistics(lambda, beta, n_batch, trials, crate::rng::derive_seed(seed, "replay"))?;
    Ok(StarvationContrast {
        without_replay: a.p_none_emp,
        with_replay: b.p_none_emp,
        replay_ceiling: (1.0 - lambda).powi(n_batch as i32),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn behavior(lambda: f64, beta: f64) -> ReplayBehavior {
        let cov = CovarianceModel::identity(2);
        let l = LearnerParams::from_beta(beta, v(&[0.0, 0.0]), v(&[3.0, 1.0])).unwrap();
        ReplayBehavior::new(lambda, l, &v(&[0.0, 0.0]), &cov).unwrap()
    }

    #[test]
    fn behavior_is_the_three_way_mixture() {
        let rb = behavior(0.2, 0.3);
        assert!((rb.beta_tilde - (0.2 + 0.8 * 0.3)).abs() < 1e-15);
        let cov = CovarianceModel::identity(2);
        let po = MixtureDensity::single(&v(&[0.0, 0.0]), &cov).unwrap();
        for y in [v(&[0.5, -1.0]), v(&[2.0, 2.0]), v(&[-3.0, 0.1])] {
            let direct =
                0.8 * rb.learner_density().log_density(&y).unwrap().exp() + 0.2 * po.log_density(&y).unwrap().exp();
            let b = rb.behavior.log_density(&y).unwrap().exp();
            assert!((b - direct).abs() <= 1e-12 * direct);
        }
    }

    #[test]
    fn weights_are_bounded() {
        let rb = behavior(0.1, 0.01);
        assert!(max_weight(&rb, 10_000, 5).unwrap() <= rb.weight_bound() + 1e-12);
    }

    #[test]
    fn constant_function_estimates_one() {
        let rb = behavior(0.3, 0.2);
        let e = weighted_estimate(&rb, |_| vec![1.0], 1, 50_000, 11).unwrap();
        assert!((e.estimate[0] - 1.0).abs() < 3.0 * e.std_err[0].max(1e-4));
    }

    #[test]
    fn no_old_probability() {
        let s = old_sample_statistics(0.1, 0.2, 5, 100_000, 3).unwrap();
        assert!((s.p_none_exact - 0.72f64.powi(5)).abs() < 1e-15);
        assert!((s.p_none_emp - s.p_none_exact).abs() < 3.0 * s.p_none_se);
        assert_eq!(old_sample_statistics(0.1, 1.0, 5, 1000, 3).unwrap().p_none_exact, 0.0);
    }
}
