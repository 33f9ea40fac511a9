//! Randomized invariants over the public API.

use forgetlab::estimators::{divergence, fd, mc_mean, FGenerator};
use forgetlab::extensions::fdiv::fdiv_oldmean_grad;
use forgetlab::extensions::kmode::{fit_subset_weights, subset_weights_closed_form};
use forgetlab::flows::{integrate_flow, FlowObjective};
use forgetlab::mixture::bhattacharyya_equal_cov;
use forgetlab::near_on_policy::ttt::{canonical as ttt_canonical, grid_argmax};
use forgetlab::near_on_policy::{oapl_target, ttt_analysis, OaplConfig};
use forgetlab::objectives::{oldmean_drift, SftProblem, TargetSpec};
use forgetlab::replay::{max_weight, starvation_contrast, ReplayBehavior};
use forgetlab::{CovarianceModel, EstimatorConfig, MixtureDensity};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::Rng;

/// Fixed generator seed: several properties compare against sampling
/// error bars, so every run checks the same instances.
fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(20240601),
        ..ProptestConfig::default()
    }
}

fn cfg(order: usize) -> EstimatorConfig {
    EstimatorConfig {
        quad_order: order,
        ..Default::default()
    }
}

fn vec_strategy(d: usize, scale: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-scale..scale, d).prop_map(DVector::from_vec)
}

/// SPD covariance `AAᵀ/d + I/2`.
fn cov_strategy(d: usize) -> impl Strategy<Value = CovarianceModel> {
    prop::collection::vec(-1.0..1.0f64, d * d).prop_map(move |a| {
        let a = DMatrix::from_vec(d, d, a);
        CovarianceModel::new(&a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.5).unwrap()
    })
}

fn weights_strategy(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05..1.0f64, k).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

/// A two-mode pair `(q, p)` sharing a covariance, in d ∈ {1, 2, 3}.
fn pair_strategy() -> impl Strategy<Value = (MixtureDensity, MixtureDensity)> {
    (1usize..=3)
        .prop_flat_map(|d| {
            (
                cov_strategy(d),
                vec_strategy(d, 2.0),
                vec_strategy(d, 2.0),
                vec_strategy(d, 2.0),
                vec_strategy(d, 2.0),
                0.1..0.9f64,
                0.1..0.9f64,
            )
        })
        .prop_map(|(cov, a, b, c, e, w1, w2)| {
            (
                MixtureDensity::two(w1, &a, &b, &cov).unwrap(),
                MixtureDensity::two(w2, &c, &e, &cov).unwrap(),
            )
        })
}

/// Target with a prescribed Mahalanobis separation along a random direction.
fn target_strategy(d: usize, delta: std::ops::Range<f64>) -> impl Strategy<Value = TargetSpec> {
    (
        cov_strategy(d),
        vec_strategy(d, 1.0),
        vec_strategy(d, 1.0),
        delta,
        0.1..0.9f64,
    )
        .prop_filter_map("degenerate direction", |(cov, mu_o, dir, delta, alpha)| {
            let m = cov.mahalanobis(&dir);
            if m < 1e-3 {
                return None;
            }
            let mu_n = &mu_o + dir * (delta / m);
            TargetSpec::new(alpha, mu_o, mu_n, cov).ok()
        })
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn responsibilities_sum_to_one(
        (q, ys) in (1usize..=3, 1usize..=8).prop_flat_map(|(d, k)| (
            (cov_strategy(d), weights_strategy(k), prop::collection::vec(vec_strategy(d, 4.0), k)),
            prop::collection::vec(vec_strategy(d, 30.0), 8),
        )).prop_map(|((cov, w, means), ys)| (MixtureDensity::new(w, means, cov).unwrap(), ys))
    ) {
        for y in &ys {
            let r = q.responsibilities(y).unwrap();
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(r.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn bhattacharyya_depends_on_separation_only(
        (cov, a, b) in (1usize..=5).prop_flat_map(|d| (cov_strategy(d), vec_strategy(d, 3.0), vec_strategy(d, 3.0)))
    ) {
        let m = cov.mahalanobis(&(&a - &b));
        let bc = bhattacharyya_equal_cov(&cov, &a, &b);
        prop_assert!((bc - (-m * m / 8.0).exp()).abs() < 1e-12);
        prop_assert!(bc > 0.0 && bc <= 1.0);
    }

    #[test]
    fn finite_differences_are_second_order(x in -1.5..1.5f64, y in -1.5..1.5f64, h in 1e-5..1e-3f64) {
        let f = |t: &[f64]| t[0].sin() * t[1].exp() + 0.5 * t[0] * t[0] * t[1];
        let want = [x.cos() * y.exp() + x * y, x.sin() * y.exp() + 0.5 * x * x];
        let g = fd::gradient(f, &[x, y], h).unwrap();
        let scale = want[0].abs().max(want[1].abs()).max(1.0);
        for k in 0..2 {
            prop_assert!((g[k] - want[k]).abs() / scale <= 10.0 * h * h + 1e-10);
        }
    }

    #[test]
    fn sft_gradient_drives_beta_down(delta in 0.5..8.0f64, beta in 0.01..0.99f64) {
        let prob = SftProblem::from_delta(delta, 200);
        let v = prob.evaluate(beta).unwrap();
        prop_assert!(v.dphi > 0.0);
        prop_assert!(v.leak <= v.leak_bound + 1e-8);
    }

    #[test]
    fn replay_weight_never_exceeds_bound(
        spec in target_strategy(2, 0.5..6.0),
        lambda in 0.01..0.9f64,
        beta in 0.0..0.9f64,
        seed in any::<u64>(),
    ) {
        let learner = spec.learner(beta.max(1e-6), spec.mu_new.clone()).unwrap();
        let rb = ReplayBehavior::new(lambda, learner, &spec.mu_old, &spec.cov).unwrap();
        let w = max_weight(&rb, 2000, seed).unwrap();
        prop_assert!(w <= rb.weight_bound() + 1e-12);
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn divergences_are_nonnegative((q, p) in pair_strategy()) {
        for g in FGenerator::catalogue() {
            let d = divergence(&q, &p, &g, &cfg(60)).unwrap();
            prop_assert!(d >= -1e-9, "{} = {d}", g.name());
        }
    }

    #[test]
    fn reverse_kl_drift_within_bound(
        spec in (1usize..=3).prop_flat_map(|d| target_strategy(d, 0.5..8.0)),
        beta in 0.05..0.95f64,
        shift in 0.0..1.0f64,
    ) {
        let mut m_new = spec.mu_new.clone();
        m_new[0] += shift;
        let r = oldmean_drift(&spec.learner(beta, m_new).unwrap(), &spec, &cfg(60)).unwrap();
        prop_assert!(r.grad.norm() <= r.bound + 1e-8);
        prop_assert!(r.bound <= r.explicit_bound + 1e-12);
    }

    #[test]
    fn fdiv_drift_within_bound(
        spec in target_strategy(2, 0.5..6.0),
        beta in 0.05..0.95f64,
        shift in vec_strategy(2, 0.5),
    ) {
        let m_new = &spec.mu_new + shift;
        for g in FGenerator::catalogue().into_iter().filter(|g| g.kappa_sup().is_finite()) {
            let r = fdiv_oldmean_grad(&g, beta, &m_new, &spec, &cfg(60)).unwrap();
            prop_assert!(r.grad.norm() <= r.bound + 1e-8, "{}", g.name());
        }
    }

    #[test]
    fn ttt_objective_is_concave(
        eta in 0.3..2.0f64,
        lambda in 0.05..3.0f64,
        beta0 in 0.1..0.9f64,
        u in (-1.0..1.0f64, -1.0..1.0f64).prop_filter("distinct rewards", |(a, b)| (a - b).abs() > 0.05),
        delta in 0.5..5.0f64,
    ) {
        let c = ttt_canonical(eta, lambda, beta0, u, delta, 1).unwrap();
        let a = ttt_analysis(&c, &cfg(120)).unwrap();
        let (_, d2) = grid_argmax(&a.model, 2001);
        prop_assert!(d2 <= 1e-9, "{d2}");
    }

    #[test]
    fn tilt_keeps_old_mass(
        tau in 0.2..3.0f64,
        r in (-2.0..2.0f64, -2.0..2.0f64),
        delta in 0.5..6.0f64,
    ) {
        for i in 1..=19 {
            let c = OaplConfig::canonical(tau, 0.05 * i as f64, r, delta, 1).unwrap();
            let t = oapl_target(&c).unwrap();
            prop_assert!(t.expected_old_resp > 0.0 && t.expected_old_resp < 1.0);
        }
    }
}

proptest! {
    #![proptest_config(config(10))]

    #[test]
    fn kmode_fit_matches_closed_form(
        (target, subset) in (3usize..=4).prop_flat_map(|k| (
            weights_strategy(k),
            prop::collection::vec(vec_strategy(2, 4.0), k),
            prop::collection::vec(any::<bool>(), k),
        )).prop_filter_map("empty subset", |(w, means, pick)| {
            let subset: Vec<usize> = pick.iter().enumerate().filter(|(_, p)| **p).map(|(i, _)| i).collect();
            if subset.is_empty() {
                return None;
            }
            let t = MixtureDensity::new(w, means, CovarianceModel::identity(2)).ok()?;
            Some((t, subset))
        })
    ) {
        let c = EstimatorConfig { quad_order: 60, mc_samples: 200_000, ..Default::default() };
        let fit = fit_subset_weights(&target, &subset, &c).unwrap();
        let closed = subset_weights_closed_form(&target, &subset);
        for (a, b) in fit.beta.iter().zip(&closed) {
            prop_assert!((a - b).abs() <= 1e-6, "{:?} vs {:?}", fit.beta, closed);
        }
    }

    #[test]
    fn flows_dissipate_energy(
        spec in target_strategy(1, 1.0..5.0),
        beta in 0.1..0.9f64,
        shift in -0.5..0.5f64,
    ) {
        let sft = integrate_flow(FlowObjective::SftLogit, &spec.learner(beta, spec.mu_new.clone()).unwrap(), &spec, 0.2, 20.0, &cfg(80)).unwrap();
        prop_assert!(sft.max_loss_increase() <= 1e-9);
        let init = spec.learner(beta, &spec.mu_new + DVector::from_element(1, shift)).unwrap();
        let rkl = integrate_flow(FlowObjective::ReverseKl, &init, &spec, 0.2, 10.0, &cfg(60)).unwrap();
        prop_assert!(rkl.max_loss_increase() <= 1e-9);
        prop_assert_eq!(rkl.uphill_steps, 0);
    }
}

proptest! {
    #![proptest_config(config(50))]

    /// Sampling under the midpoint `m = (p + q)/2` with weight `p/m` keeps
    /// the integrands bounded even when the modes barely overlap.
    #[test]
    fn quadrature_and_sampling_agree((q, p) in pair_strategy(), seed in any::<u64>()) {
        let gens: Vec<FGenerator> = ["kl", "js", "hellinger", "triangular"]
            .iter()
            .map(|n| FGenerator::parse(n).unwrap())
            .collect();
        let e = mc_mean(50_000, seed, gens.len(), |r, _, out| {
            let y = if r.random::<bool>() { q.draw(r).0 } else { p.draw(r).0 };
            let (lq, lp) = (q.log_density(&y).unwrap(), p.log_density(&y).unwrap());
            let lm = (0.5 * lq.exp() + 0.5 * lp.exp()).ln();
            for (o, g) in out.iter_mut().zip(&gens) {
                *o = (lp - lm).exp() * g.f_log(lq - lp);
            }
        });
        for (k, g) in gens.iter().enumerate() {
            let quad = divergence(&q, &p, g, &cfg(60)).unwrap();
            prop_assert!((quad - e.mean[k]).abs() <= 4.0 * e.std_err[k] + 1e-12,
                "{}: {quad} vs {} ± {}", g.name(), e.mean[k], e.std_err[k]);
        }
    }
}

#[test]
fn kl_generator_curvature_is_one() {
    let kl = FGenerator::kl();
    for i in 0..=200 {
        let t = 10f64.powf(-6.0 + 0.06 * i as f64);
        assert!((kl.kappa(t) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn replay_prevents_starvation() {
    let s = starvation_contrast(0.1, 1e-3, 32, 100_000, 5).unwrap();
    assert!(s.without_replay >= 0.95, "{}", s.without_replay);
    assert!(s.with_replay <= 0.9f64.powi(32) + 0.005, "{}", s.with_replay);
}

#[test]
fn sampling_is_independent_of_worker_count() {
    let q = MixtureDensity::two(
        0.3,
        &DVector::from_vec(vec![0.0, 1.0]),
        &DVector::from_vec(vec![2.0, -1.0]),
        &CovarianceModel::identity(2),
    )
    .unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (ys, ks) = q.sample(5000, 77);
            let e = mc_mean(100_000, 77, 2, |r, _, out| {
                let (y, _) = q.draw(r);
                out.copy_from_slice(y.as_slice());
            });
            (ys, ks, e.mean, e.std_err)
        })
    };
    assert_eq!(run(1), run(4));
}
