//! Verification suites. Every check compares a closed form or a bound with
//! an independent oracle (brute-force sums, quadrature, sampling, finite
//! differences, flow integration) and reports one measured number against
//! one tolerance. Each check names the claim it exercises; `meta.coverage`
//! fails if a claim in [`CLAIMS`] has no check.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::report::{CheckRecord, CheckReport, Status, REPORT_VERSION};
use crate::error::{Error, Result};
use crate::estimators::fd;
use crate::estimators::quadrature::gauss_legendre;
use crate::estimators::{divergence, mc_mean, EstimatorConfig, FGenerator, Quadrature, ReducedSpace};
use crate::extensions::fdiv::{fdiv_oldmean_grad, fdiv_rl_loss, fdiv_sft_scan};
use crate::extensions::kmode::{fit_subset_weights, kmode_analysis, subset_weights_closed_form};
use crate::extensions::logconcave::{logconcave_checks, reverse_kl as lc_reverse_kl, LocationFamily1D};
use crate::flows::{
    check_rate_envelopes, integrate_flow_with, local_pl_certificate, FlowObjective, FlowOptions, PlOptions,
};
use crate::mixture::{
    bayes_partition_stats, bhattacharyya_equal_cov, CovarianceModel, DisjointMixtureSpec, LearnerParams,
    MixtureDensity, Region,
};
use crate::near_on_policy::oapl::oapl_regression_value;
use crate::near_on_policy::sdft::{fit_geometric, sdft_curvature, separation_profile};
use crate::near_on_policy::ttt::{
    canonical as ttt_canonical, grid_argmax, j_general_quadrature, j_monte_carlo, TttModel,
};
use crate::near_on_policy::{
    oapl_regression_grad, oapl_sampling_oracle, oapl_target, sdft_run, sdft_step, tilt_recovery_check, ttt_analysis,
    ttt_oldmean_gradient, ModePair, OaplConfig, RewardPartition, SdftConfig, SdftState, StepReward, TttCase, TttConfig,
};
use crate::objectives::{
    disjoint_decomposition, oldmean_drift, posterior_leakage, replay_grid_argmin, replay_population_minimizer,
    reverse_kl_gradients, reverse_kl_loss, ReplayMode, SftProblem, TargetSpec,
};
use crate::replay::{max_weight, old_sample_statistics, weighted_estimate, ReplayBehavior};
use crate::rng::{derive_seed, CounterRng};
use crate::special::{logit, norm_cdf};

/// Claims the full suite must cover.
pub const CLAIMS: &[&str] = &[
    "disjoint.decomposition",
    "mixture.model",
    "overlap.bc_closed_form",
    "overlap.leakage_bound",
    "sft.mass_forgetting",
    "replay.forward_kl",
    "rkl.stationary",
    "rkl.oldmean_drift",
    "rkl.local_pl_rate",
    "replay.reverse_kl_sampling",
    "gaussian.stein_identity",
    "gaussian.truncated_moment",
    "sdft.dynamics",
    "sdft.separation",
    "ttt.disjoint_support",
    "ttt.gaussian",
    "ttt.exact_beta_star",
    "oapl.disjoint",
    "oapl.gaussian",
    "tilt.construction",
    "fdiv.adjoint_identity",
    "fdiv.main",
    "fdiv.curvature",
    "kmode.translates_independent",
    "kmode.pairwise_bound",
    "kmode.theorem",
    "logconcave.ibp",
    "logconcave.bc_bound",
    "logconcave.fisher",
    "logconcave.theorem_a",
    "logconcave.theorem_b",
    "logconcave.theorem_c",
];

/// Claim key of the coverage check itself.
pub const COVERAGE_CLAIM: &str = "suite.coverage";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Core,
    NearOnPolicy,
    Extensions,
}

impl Suite {
    pub const NAMES: [&'static str; 4] = ["all", "core", "near_on_policy", "extensions"];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "core" => Ok(Suite::Core),
            "near_on_policy" => Ok(Suite::NearOnPolicy),
            "extensions" => Ok(Suite::Extensions),
            _ => Err(Error::input(
                "suite",
                format!("unknown suite `{s}` (expected one of {})", Self::NAMES.join(", ")),
            )),
        }
    }

    fn contains(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

/// Deliberate faults for negative-control runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Flip the sign of the forward-KL logit gradient.
    SftGradientSign,
}

impl Mutation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sft-gradient-sign" => Ok(Mutation::SftGradientSign),
            _ => Err(Error::input(
                "mutate",
                format!("unknown mutation `{s}` (expected sft-gradient-sign)"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CheckContext {
    pub seed: u64,
    pub sft_sign: f64,
}

impl CheckContext {
    pub fn new(seed: u64, mutation: Option<Mutation>) -> Self {
        CheckContext {
            seed,
            sft_sign: match mutation {
                Some(Mutation::SftGradientSign) => -1.0,
                None => 1.0,
            },
        }
    }

    fn seed(&self, tag: &str) -> u64 {
        derive_seed(self.seed, tag)
    }
}

/// Result of one check. `measured` and `tolerance` are reported as is; the
/// comparison direction is part of each check.
#[derive(Clone, Copy, Debug)]
pub struct Outcome {
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
}

/// `measured ≤ tolerance`, with NaN failing.
fn at_most(measured: f64, tolerance: f64) -> Outcome {
    Outcome {
        passed: measured <= tolerance,
        measured,
        tolerance,
    }
}

/// `measured > tolerance`.
fn above(measured: f64, tolerance: f64) -> Outcome {
    Outcome {
        passed: measured > tolerance,
        measured,
        tolerance,
    }
}

type CheckFn = fn(&CheckContext) -> Result<Outcome>;

pub struct Check {
    pub name: &'static str,
    pub claim: &'static str,
    pub suite: Suite,
    run: CheckFn,
}

macro_rules! checks {
    ($($suite:ident $name:literal $claim:literal $f:path;)*) => {
        vec![$(Check { name: $name, claim: $claim, suite: Suite::$suite, run: $f },)*]
    };
}

pub fn registry() -> Vec<Check> {
    checks! {
        Core "disjoint.kl_decomposition" "disjoint.decomposition" disjoint_kl_decomposition;
        Core "mixture.normalization" "mixture.model" mixture_normalization;
        Core "overlap.bc_quadrature" "overlap.bc_closed_form" overlap_bc_quadrature;
        Core "overlap.leakage_grid" "overlap.leakage_bound" overlap_leakage_grid;
        Core "sft.hitting_time" "sft.mass_forgetting" sft_hitting_time;
        Core "sft.flow_hitting_time" "sft.mass_forgetting" sft_flow_hitting_time;
        Core "sft.loss_increasing" "sft.mass_forgetting" sft_loss_increasing;
        Core "sft.logit_gradient_fd" "sft.mass_forgetting" sft_logit_gradient_fd;
        Core "replay.forward_kl_minimizers" "replay.forward_kl" replay_forward_kl_minimizers;
        Core "rkl.stationary_point" "rkl.stationary" rkl_stationary_point;
        Core "rkl.drift_decomposition_fd" "rkl.oldmean_drift" rkl_drift_decomposition_fd;
        Core "rkl.drift_bound" "rkl.oldmean_drift" rkl_drift_bound;
        Core "rkl.drift_separated" "rkl.oldmean_drift" rkl_drift_separated;
        Core "rkl.pl_certificate" "rkl.local_pl_rate" rkl_pl_certificate;
        Core "rkl.pl_envelope" "rkl.local_pl_rate" rkl_pl_envelope;
        Core "replay.weight_bound" "replay.reverse_kl_sampling" replay_weight_bound;
        Core "replay.unbiased" "replay.reverse_kl_sampling" replay_unbiased;
        Core "replay.no_old_probability" "replay.reverse_kl_sampling" replay_no_old_probability;
        Core "replay.chernoff_tail" "replay.reverse_kl_sampling" replay_chernoff_tail;
        Core "gaussian.stein_identity" "gaussian.stein_identity" gaussian_stein_identity;
        Core "gaussian.truncated_moment" "gaussian.truncated_moment" gaussian_truncated_moment;
        NearOnPolicy "sdft.contraction" "sdft.dynamics" sdft_contraction;
        NearOnPolicy "sdft.old_gradient_summable" "sdft.dynamics" sdft_old_gradient_summable;
        NearOnPolicy "sdft.limit" "sdft.dynamics" sdft_limit;
        NearOnPolicy "sdft.fixed_point" "sdft.dynamics" sdft_fixed_point;
        NearOnPolicy "sdft.separation" "sdft.separation" sdft_separation;
        NearOnPolicy "ttt.disjoint_interior" "ttt.disjoint_support" ttt_disjoint_interior;
        NearOnPolicy "ttt.j_monte_carlo" "ttt.gaussian" ttt_j_monte_carlo;
        NearOnPolicy "ttt.case_labels" "ttt.exact_beta_star" ttt_case_labels;
        NearOnPolicy "ttt.oldmean_gradient_fd" "ttt.gaussian" ttt_oldmean_gradient_fd;
        NearOnPolicy "ttt.oldmean_gradient_bound" "ttt.gaussian" ttt_oldmean_gradient_bound;
        NearOnPolicy "oapl.disjoint_weight" "oapl.disjoint" oapl_disjoint_weight;
        NearOnPolicy "oapl.old_responsibility" "oapl.gaussian" oapl_old_responsibility;
        NearOnPolicy "oapl.regression_gradient_fd" "oapl.gaussian" oapl_regression_gradient_fd;
        NearOnPolicy "oapl.oldmode_bound" "oapl.gaussian" oapl_oldmode_bound;
        NearOnPolicy "tilt.recovers_target" "tilt.construction" tilt_recovers_target;
        Extensions "fdiv.adjoint_identity" "fdiv.adjoint_identity" fdiv_adjoint_identity;
        Extensions "fdiv.sft_monotone" "fdiv.main" fdiv_sft_monotone;
        Extensions "fdiv.drift_fd" "fdiv.main" fdiv_drift_fd;
        Extensions "fdiv.drift_bound" "fdiv.main" fdiv_drift_bound;
        Extensions "fdiv.kappa_suprema" "fdiv.curvature" fdiv_kappa_suprema;
        Extensions "kmode.gram_positive_definite" "kmode.translates_independent" kmode_gram_positive_definite;
        Extensions "kmode.pairwise_bound" "kmode.pairwise_bound" kmode_pairwise_bound;
        Extensions "kmode.closed_form_minimizer" "kmode.theorem" kmode_closed_form_minimizer;
        Extensions "kmode.drift_decomposition_fd" "kmode.theorem" kmode_drift_decomposition_fd;
        Extensions "logconcave.ibp_identity" "logconcave.ibp" logconcave_ibp_identity;
        Extensions "logconcave.bc_bound" "logconcave.bc_bound" logconcave_bc_bound;
        Extensions "logconcave.fisher_identity" "logconcave.fisher" logconcave_fisher_identity;
        Extensions "logconcave.sft_monotone" "logconcave.theorem_a" logconcave_sft_monotone;
        Extensions "logconcave.drift_bound" "logconcave.theorem_b" logconcave_drift_bound;
        Extensions "logconcave.stationary" "logconcave.theorem_c" logconcave_stationary;
    }
}

/// Run every check of `suite` in parallel. The full suite ends with the
/// coverage check.
pub fn run_suite(suite: Suite, ctx: &CheckContext) -> CheckReport {
    let selected: Vec<Check> = registry().into_iter().filter(|c| suite.contains(c.suite)).collect();
    let mut checks: Vec<CheckRecord> = selected
        .par_iter()
        .map(|c| {
            let start = Instant::now();
            let res = (c.run)(ctx);
            let runtime_ms = start.elapsed().as_millis() as u64;
            let (status, measured, tolerance) = match res {
                Ok(o) => (
                    if o.passed { Status::Pass } else { Status::Fail },
                    o.measured,
                    o.tolerance,
                ),
                Err(_) => (Status::Error, f64::NAN, f64::NAN),
            };
            CheckRecord {
                name: c.name.to_string(),
                paper_ref: c.claim.to_string(),
                status,
                measured,
                tolerance,
                runtime_ms,
            }
        })
        .collect();
    if suite == Suite::All {
        let covered: BTreeSet<&str> = checks.iter().map(|c| c.paper_ref.as_str()).collect();
        let missing = CLAIMS.iter().filter(|k| !covered.contains(*k)).count();
        checks.push(CheckRecord {
            name: "meta.coverage".into(),
            paper_ref: COVERAGE_CLAIM.into(),
            status: if missing == 0 { Status::Pass } else { Status::Fail },
            measured: missing as f64,
            tolerance: 0.0,
            runtime_ms: 0,
        });
    }
    CheckReport {
        version: REPORT_VERSION.into(),
        seed: ctx.seed,
        checks,
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn est() -> EstimatorConfig {
    EstimatorConfig::default()
}

fn est_order(order: usize) -> EstimatorConfig {
    EstimatorConfig {
        quad_order: order,
        ..Default::default()
    }
}

fn cov2(a: f64, b: f64, c: f64) -> CovarianceModel {
    CovarianceModel::new(DMatrix::from_row_slice(2, 2, &[a, b, b, c])).expect("positive definite")
}

/// Random SPD matrix `AAᵀ/d + I/2`.
fn random_cov<R: Rng>(r: &mut R, d: usize) -> CovarianceModel {
    let a = DMatrix::from_fn(d, d, |_, _| r.sample::<f64, _>(StandardNormal));
    let s = &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.5;
    CovarianceModel::new(s).expect("positive definite")
}

fn random_vec<R: Rng>(r: &mut R, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| scale * r.sample::<f64, _>(StandardNormal))
}

/// `∇_y log q(y) = Σ_k r_k(y) Σ⁻¹(μ_k − y)`.
fn score(q: &MixtureDensity, y: &DVector<f64>) -> Result<DVector<f64>> {
    let r = q.responsibilities(y)?;
    let mut s = DVector::zeros(y.len());
    for (rk, mk) in r.iter().zip(q.means()) {
        s += (mk - y) * *rk;
    }
    Ok(q.cov().solve(&s))
}

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

// ---------------------------------------------------------------------------
// Core: disjoint supports, mixtures, overlap

fn kl_discrete(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

fn random_simplex<R: Rng>(r: &mut R, n: usize) -> Vec<f64> {
    let x: Vec<f64> = (0..n).map(|_| r.random::<f64>() + 0.05).collect();
    let s: f64 = x.iter().sum();
    x.iter().map(|a| a / s).collect()
}

/// Discrete mixtures with disjoint supports: direct sums against the
/// decomposition.
fn disjoint_kl_decomposition(ctx: &CheckContext) -> Result<Outcome> {
    let mut r = CounterRng::new(ctx.seed("disjoint")).stream(0);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (po, pn, qo, qn) = (
            random_simplex(&mut r, 4),
            random_simplex(&mut r, 5),
            random_simplex(&mut r, 4),
            random_simplex(&mut r, 5),
        );
        let alpha = 0.05 + 0.9 * r.random::<f64>();
        let beta = 0.05 + 0.9 * r.random::<f64>();
        let join = |w: f64, a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().map(|x| w * x).chain(b.iter().map(|x| (1.0 - w) * x)).collect()
        };
        let p = join(alpha, &po, &pn);
        let q = join(beta, &qo, &qn);
        let spec = |kl_oo, kl_nn| DisjointMixtureSpec {
            alpha,
            beta,
            kl_oo,
            kl_nn,
            reward_old: 0.0,
            reward_new: 0.0,
        };
        let (fwd, _) = disjoint_decomposition(&spec(kl_discrete(&po, &qo), kl_discrete(&pn, &qn)))?;
        let (_, rev) = disjoint_decomposition(&spec(kl_discrete(&qo, &po), kl_discrete(&qn, &pn)))?;
        worst = worst
            .max((fwd - kl_discrete(&p, &q)).abs())
            .max((rev - kl_discrete(&q, &p)).abs());
    }
    Ok(at_most(worst, 1e-12))
}

/// Trapezoid normalization on a fine 1D grid and hand-computed
/// responsibilities.
fn mixture_normalization(_: &CheckContext) -> Result<Outcome> {
    let cov = CovarianceModel::diagonal(&[0.7])?;
    let q = MixtureDensity::new(vec![0.2, 0.5, 0.3], vec![v(&[-2.0]), v(&[0.5]), v(&[3.0])], cov)?;
    let (lo, hi, n) = (-14.0, 15.0, 40_001);
    let h = (hi - lo) / (n - 1) as f64;
    let mut mass = 0.0;
    for i in 0..n {
        let y = lo + h * i as f64;
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        mass += w * h * q.log_density(&v(&[y]))?.exp();
    }
    let mut resp_err: f64 = 0.0;
    for y in [-3.0, 0.0, 1.2, 4.0] {
        let r = q.responsibilities(&v(&[y]))?;
        let dens: Vec<f64> = q
            .weights()
            .iter()
            .zip(q.means())
            .map(|(w, m)| w * (-(y - m[0]).powi(2) / (2.0 * 0.7)).exp())
            .collect();
        let tot: f64 = dens.iter().sum();
        for (a, b) in r.iter().zip(&dens) {
            resp_err = resp_err.max((a - b / tot).abs());
        }
    }
    Ok(at_most((mass - 1.0).abs().max(resp_err), 1e-10))
}

/// `∫ √(N(μ₁) N(μ₂))` by quadrature in whitened coordinates.
fn bc_by_quadrature(cov: &CovarianceModel, m1: &DVector<f64>, m2: &DVector<f64>) -> f64 {
    let space = ReducedSpace::new(cov, &[m1, m2]);
    let (a1, a2) = (space.point(m1), space.point(m2));
    let sq = |u: &[f64], a: &[f64]| u.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    Quadrature::new(200).expect_gaussian1(&a1, None, |u| (0.25 * (sq(u, &a1) - sq(u, &a2))).exp())
}

fn overlap_bc_quadrature(ctx: &CheckContext) -> Result<Outcome> {
    let mut r = CounterRng::new(ctx.seed("bc")).stream(0);
    let mut worst: f64 = 0.0;
    for d in [1, 2, 5] {
        let cov = random_cov(&mut r, d);
        for delta in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let mu1 = random_vec(&mut r, d, 1.0);
            let dir = random_vec(&mut r, d, 1.0);
            let mu2 = &mu1 + &dir * (delta / cov.mahalanobis(&dir));
            let want = (-delta * delta / 8.0).exp();
            worst = worst
                .max((bc_by_quadrature(&cov, &mu1, &mu2) - want).abs())
                .max((bhattacharyya_equal_cov(&cov, &mu1, &mu2) - want).abs());
        }
    }
    Ok(at_most(worst, 1e-8))
}

/// Largest ratio of a leakage expectation to its overlap bound over a
/// 5 × 5 grid of weights and separations.
fn overlap_leakage_grid(_: &CheckContext) -> Result<Outcome> {
    let cov = cov2(1.0, 0.3, 0.8);
    let dir = v(&[1.0, -0.5]);
    let unit = &dir / cov.mahalanobis(&dir);
    let mu_f = v(&[0.2, 0.1]);
    let mut worst: f64 = 0.0;
    for w in [0.05, 0.25, 0.5, 0.75, 0.95] {
        for delta in [0.5, 1.0, 2.0, 4.0, 6.0] {
            let mu_g = &mu_f + &unit * delta;
            let l = posterior_leakage(w, &mu_f, &mu_g, &cov, &est())?;
            worst = worst.max(l.into_f / l.into_f_bound).max(l.out_of_f / l.out_of_f_bound);
        }
    }
    Ok(at_most(worst, 1.0))
}

// ---------------------------------------------------------------------------
// Core: forward KL on new-only data

const SFT_DELTAS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
const SFT_STARTS: [f64; 3] = [0.1, 0.5, 0.9];
const SFT_FLOOR: f64 = 1e-3;

/// Time for `dφ/dt = −g(φ)` to move from `logit β₀` down to `logit 10⁻³`:
/// `∫ dφ / g(φ)` by composite Gauss-Legendre. Infinite if `g ≤ 0` anywhere
/// on the path.
fn hitting_time(prob: &SftProblem, beta0: f64) -> f64 {
    let (a, b) = (logit(SFT_FLOOR), logit(beta0));
    let (x, w) = gauss_legendre(16);
    let panels = 200;
    let h = (b - a) / panels as f64;
    let mut t = 0.0;
    for p in 0..panels {
        let c = a + h * (p as f64 + 0.5);
        for (xi, wi) in x.iter().zip(&w) {
            let g = prob.logit_grad(c + 0.5 * h * xi);
            if !(g > 0.0) {
                return f64::INFINITY;
            }
            t += 0.5 * h * wi / g;
        }
    }
    t
}

fn sft_problem(delta: f64, ctx: &CheckContext) -> SftProblem {
    SftProblem::from_delta(delta, 200).with_gradient_sign(ctx.sft_sign)
}

/// The logit flow is strictly descending on the whole path, so `β` reaches
/// `10⁻³` in finite time from every start. Reports the longest time.
fn sft_hitting_time(ctx: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for delta in SFT_DELTAS {
        let prob = sft_problem(delta, ctx);
        for b0 in SFT_STARTS {
            worst = worst.max(hitting_time(&prob, b0));
        }
    }
    Ok(at_most(worst, 1e6))
}

/// RK4 flows with a `β < 10⁻³` stop agree with the hitting-time integral
/// (relative error) and keep `β` strictly decreasing. The slow `δ = 1` case
/// is covered by the integral alone.
fn sft_flow_hitting_time(ctx: &CheckContext) -> Result<Outcome> {
    let cases: Vec<(f64, f64)> = [2.0, 4.0, 8.0]
        .iter()
        .flat_map(|&d| SFT_STARTS.iter().map(move |&b| (d, b)))
        .collect();
    let errs = cases
        .par_iter()
        .map(|&(delta, b0)| -> Result<f64> {
            let prob = sft_problem(delta, ctx);
            let t_quad = hitting_time(&prob, b0);
            let spec = TargetSpec::canonical(0.5, delta, 1)?;
            let horizon = if t_quad.is_finite() { 1.5 * t_quad } else { 100.0 };
            let mut opts = FlowOptions::new(0.5, horizon);
            opts.stop_beta = Some(SFT_FLOOR);
            opts.sft_gradient_sign = ctx.sft_sign;
            let init = spec.learner(b0, spec.mu_new.clone())?;
            let traj = integrate_flow_with(FlowObjective::SftLogit, &init, &spec, &opts, &est())?;
            let betas = traj.betas();
            let monotone = betas.windows(2).all(|w| w[1] < w[0]);
            if !monotone || traj.final_state().beta() >= SFT_FLOOR || !t_quad.is_finite() {
                return Ok(f64::INFINITY);
            }
            Ok((traj.final_time() - t_quad).abs() / t_quad)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(at_most(errs.into_iter().fold(0.0, f64::max), 1e-2))
}

/// Smallest consecutive difference of the loss on the 101-point grid.
fn sft_loss_increasing(ctx: &CheckContext) -> Result<Outcome> {
    let mut worst = f64::INFINITY;
    for delta in SFT_DELTAS {
        let prob = sft_problem(delta, ctx);
        let l: Vec<f64> = (0..=100).map(|i| prob.loss(i as f64 / 100.0)).collect();
        for w in l.windows(2) {
            worst = worst.min(w[1] - w[0]);
        }
    }
    Ok(above(worst, 0.0))
}

fn sft_logit_gradient_fd(ctx: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for delta in SFT_DELTAS {
        let prob = sft_problem(delta, ctx);
        for b in [0.05, 0.1, 0.3, 0.5, 0.7, 0.9, 0.95] {
            let phi = logit(b);
            let num = fd::gradient(|x| prob.loss_logit(x[0]), &[phi], 1e-4)?[0];
            worst = worst.max((num - prob.logit_grad(phi)).abs());
        }
    }
    Ok(at_most(worst, 1e-5))
}

// ---------------------------------------------------------------------------
// Core: replay and reverse KL

fn replay_forward_kl_minimizers(_: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for spec in [TargetSpec::canonical(0.5, 3.0, 1)?, TargetSpec::canonical(0.3, 2.0, 2)?] {
        for lambda in [0.1, 0.3] {
            for (mode, want) in [(ReplayMode::Denominator, 0.0), (ReplayMode::Numerator, lambda)] {
                let (closed, _) = replay_population_minimizer(lambda, mode)?;
                let grid = replay_grid_argmin(lambda, mode, &spec, &est());
                worst = worst.max((grid - want).abs()).max((closed - want).abs());
            }
        }
    }
    Ok(at_most(worst, 0.01))
}

fn rkl_stationary_point(_: &CheckContext) -> Result<Outcome> {
    let specs = [
        TargetSpec::canonical(0.4, 3.0, 1)?,
        TargetSpec::new(0.3, v(&[0.0, 1.0]), v(&[2.0, -1.0]), cov2(1.0, 0.2, 2.0))?,
    ];
    let mut worst: f64 = 0.0;
    for spec in &specs {
        let g = reverse_kl_gradients(&spec.optimum(), spec, &est())?;
        worst = worst.max(g.dbeta.abs()).max(g.dm_new.amax());
    }
    Ok(at_most(worst, 1e-8))
}

struct DriftInstance {
    spec: TargetSpec,
    learner: LearnerParams,
}

/// Random targets in d ∈ {1, 2} with separations in [0.5, 4] and a
/// perturbed new mean.
fn drift_instances(ctx: &CheckContext, n: usize) -> Result<Vec<DriftInstance>> {
    let rng = CounterRng::new(ctx.seed("drift"));
    (0..n)
        .map(|i| {
            let mut r = rng.stream(i as u64);
            let d = 1 + i % 2;
            let cov = random_cov(&mut r, d);
            let mu_o = random_vec(&mut r, d, 1.0);
            let dir = random_vec(&mut r, d, 1.0);
            let delta = 0.5 + 3.5 * r.random::<f64>();
            let mu_n = &mu_o + &dir * (delta / cov.mahalanobis(&dir));
            let alpha = 0.2 + 0.6 * r.random::<f64>();
            let beta = 0.2 + 0.6 * r.random::<f64>();
            let m_new = &mu_n + random_vec(&mut r, d, 0.4);
            let spec = TargetSpec::new(alpha, mu_o, mu_n, cov)?;
            let learner = spec.learner(beta, m_new)?;
            Ok(DriftInstance { spec, learner })
        })
        .collect()
}

/// Decomposed old-mean gradient against central differences of the loss.
fn rkl_drift_decomposition_fd(ctx: &CheckContext) -> Result<Outcome> {
    let worst = drift_instances(ctx, 20)?
        .par_iter()
        .map(|inst| -> Result<f64> {
            let rep = oldmean_drift(&inst.learner, &inst.spec, &est())?;
            let num = fd::gradient(
                |x| {
                    let mut l = inst.learner.clone();
                    l.m_old = v(x);
                    reverse_kl_loss(&l, &inst.spec, &est()).unwrap_or(f64::NAN)
                },
                inst.spec.mu_old.as_slice(),
                1e-4,
            )?;
            Ok(rel_err(&rep.grad, &num))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(at_most(worst, 1e-4))
}

/// `‖∇‖ / bound` and `ε / ε-bound` over the random instances and a sweep
/// of separations.
fn rkl_drift_bound(ctx: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut reps = Vec::new();
    for inst in drift_instances(ctx, 20)? {
        reps.push(oldmean_drift(&inst.learner, &inst.spec, &est())?);
    }
    for delta in [0.5, 1.0, 2.0, 4.0, 6.0, 8.0] {
        let spec = TargetSpec::canonical(0.4, delta, 2)?;
        let m_new = &spec.mu_new + v(&[-0.3, 0.2]);
        reps.push(oldmean_drift(&spec.learner(0.6, m_new)?, &spec, &est())?);
    }
    for r in reps {
        worst = worst
            .max(r.grad.norm() / r.bound.max(1e-300))
            .max(r.bound / r.explicit_bound.max(1e-300))
            .max(r.eps_q / r.eps_q_bound)
            .max(r.eps_p / r.eps_p_bound);
    }
    Ok(at_most(worst, 1.0 + 1e-9))
}

/// Drift norm relative to the mean separation at δ = 8.
fn rkl_drift_separated(_: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for d in [1, 2] {
        let spec = TargetSpec::canonical(0.5, 8.0, d)?;
        for (beta, shift) in [(0.5, 0.0), (0.3, 0.5), (0.7, -0.5)] {
            let mut m_new = spec.mu_new.clone();
            m_new[0] += shift;
            let r = oldmean_drift(&spec.learner(beta, m_new)?, &spec, &est())?;
            worst = worst.max(r.grad.norm() / (&spec.mu_new - &spec.mu_old).norm());
        }
    }
    Ok(at_most(worst, 1e-3))
}

fn pl_targets() -> Result<Vec<(TargetSpec, EstimatorConfig, PlOptions)>> {
    let d1 = PlOptions {
        probe_quad_order: 64,
        ..PlOptions::default()
    };
    Ok(vec![
        (TargetSpec::canonical(0.5, 3.0, 1)?, est_order(80), d1.clone()),
        (TargetSpec::canonical(0.4, 3.0, 2)?, est_order(64), d1),
    ])
}

/// Smallest PL ratio `‖∇L‖² / (μ⋆ L)` over the ball probes; the
/// quadratic-growth slack must be nonnegative as well.
fn rkl_pl_certificate(_: &CheckContext) -> Result<Outcome> {
    let mut worst = f64::INFINITY;
    for (spec, cfg, opts) in pl_targets()? {
        let c = local_pl_certificate(&spec, &cfg, &opts)?;
        if !(c.mu_star > 0.0 && c.min_growth_slack >= -1e-6 && c.hessian_rel_diff < 1e-3) {
            return Ok(above(f64::NAN, 1.0));
        }
        worst = worst.min(c.min_pl_ratio);
    }
    Ok(Outcome {
        passed: worst >= 1.0,
        measured: worst,
        tolerance: 1.0,
    })
}

/// Largest `log L(t) − log L(0) + μ⋆ t` over 10 near-optimum flows per
/// target; the envelope allows `log 1.05`.
fn rkl_pl_envelope(ctx: &CheckContext) -> Result<Outcome> {
    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    for (i, (spec, cfg, opts)) in pl_targets()?.into_iter().enumerate() {
        let c = local_pl_certificate(&spec, &cfg, &opts)?;
        let env = check_rate_envelopes(&spec, &c, 10, derive_seed(ctx.seed("envelope"), &i.to_string()), &cfg)?;
        ok &= env.loss_ok && env.param_ok && env.stayed_in_ball;
        worst = env.runs.iter().map(|r| r.max_log_excess).fold(worst, f64::max);
    }
    let tol = 1.05f64.ln();
    Ok(Outcome {
        passed: ok && worst <= tol,
        measured: worst,
        tolerance: tol,
    })
}

fn replay_behaviors() -> Result<Vec<ReplayBehavior>> {
    let spec = TargetSpec::new(0.5, v(&[0.0, 0.0]), v(&[2.5, 0.5]), cov2(1.0, 0.0, 0.5))?;
    let mut out = Vec::new();
    for (lambda, beta) in [(0.1, 0.05), (0.3, 0.0), (0.5, 0.4)] {
        let learner = if beta == 0.0 {
            LearnerParams {
                logit: f64::NEG_INFINITY,
                m_old: spec.mu_old.clone(),
                m_new: v(&[2.0, 0.8]),
            }
        } else {
            spec.learner(beta, v(&[2.0, 0.8]))?
        };
        out.push(ReplayBehavior::new(lambda, learner, &spec.mu_old, &spec.cov)?);
    }
    Ok(out)
}

/// Largest `w / (1/(1 − λ))` over 10⁶ behavior draws per setting.
fn replay_weight_bound(ctx: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (i, rb) in replay_behaviors()?.iter().enumerate() {
        let m = max_weight(rb, 1_000_000, derive_seed(ctx.seed("weights"), &i.to_string()))?;
        worst = worst.max(m / rb.weight_bound());
    }
    Ok(at_most(worst, 1.0))
}

/// Ten test functions with closed-form Gaussian-mixture moments.
fn replay_unbiased(ctx: &CheckContext) -> Result<Outcome> {
    let a = [0.4, -0.3];
    let c = 1.0;
    let mut worst: f64 = 0.0;
    for (i, rb) in replay_behaviors()?.iter().enumerate() {
        let q = rb.learner_density();
        let cov = q.cov().sigma().clone();
        let av = v(&a);
        let asa = (av.transpose() * &cov * &av)[(0, 0)];
        let mut truth = [0.0; 10];
        for (w, m) in q.weights().iter().zip(q.means()) {
            let am = av.dot(m);
            let comp = [
                1.0,
                m[0],
                m[1],
                cov[(0, 0)] + m[0] * m[0],
                cov[(0, 1)] + m[0] * m[1],
                cov.trace() + m.norm_squared(),
                (am + 0.5 * asa).exp(),
                am.cos() * (-0.5 * asa).exp(),
                am.sin() * (-0.5 * asa).exp(),
                norm_cdf((m[0] - c) / cov[(0, 0)].sqrt()),
            ];
            for k in 0..10 {
                truth[k] += w * comp[k];
            }
        }
        let h = |y: &DVector<f64>| {
            let ay = a[0] * y[0] + a[1] * y[1];
            vec![
                1.0,
                y[0],
                y[1],
                y[0] * y[0],
                y[0] * y[1],
                y.norm_squared(),
                ay.exp(),
                ay.cos(),
                ay.sin(),
                if y[0] > c { 1.0 } else { 0.0 },
            ]
        };
        let e = weighted_estimate(rb, h, 10, 400_000, derive_seed(ctx.seed("unbiased"), &i.to_string()))?;
        for ((est, se), want) in e.estimate.iter().zip(&e.std_err).zip(&truth) {
            let z = if *se > 0.0 {
                (est - want).abs() / se
            } else if (est - want).abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(z);
        }
    }
    Ok(at_most(worst, 4.0))
}

/// Empirical no-old-sample frequency against `((1 − λ)(1 − β))^N`, in
/// binomial standard errors.
fn replay_no_old_probability(ctx: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (i, (lambda, beta, n)) in [(0.1, 0.05, 10), (0.2, 0.0, 10), (0.05, 0.02, 20), (0.3, 0.1, 4)]
        .into_iter()
        .enumerate()
    {
        let s = old_sample_statistics(
            lambda,
            beta,
            n,
            100_000,
            derive_seed(ctx.seed("p_none"), &i.to_string()),
        )?;
        let exact = ((1.0 - lambda) * (1.0 - beta)).powi(n as i32);
        if (s.p_none_exact - exact).abs() > 1e-15 {
            return Ok(at_most(f64::INFINITY, 3.0));
        }
        worst = worst.max((s.p_none_emp - exact).abs() / s.p_none_se);
    }
    Ok(at_most(worst, 3.0))
}

/// `Pr(old count ≤ λN/2)` against `exp(−λN/8)` at λ = 0.2, N = 50.
fn replay_chernoff_tail(ctx: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (i, beta) in [0.0, 0.01, 0.05].into_iter().enumerate() {
        let s = old_sample_statistics(
            0.2,
            beta,
            50,
            100_000,
            derive_seed(ctx.seed("chernoff"), &i.to_string()),
        )?;
        worst = worst.max(s.tail_emp / s.chernoff);
    }
    Ok(at_most(worst, 1.0))
}

/// `(1 − β) E_{N(m_n)}[Σ⁻¹(Y − m_n) ℓ]` (quadrature, score form) against
/// `(1 − β) E_{N(m_n)}[∇ℓ]` (sampling, gradient form), in combined
/// standard errors.
fn gaussian_stein_identity(ctx: &CheckContext) -> Result<Outcome> {
    let spec = TargetSpec::new(0.4, v(&[0.0, 0.0]), v(&[2.0, 1.0]), cov2(1.0, 0.3, 0.8))?;
    let learner = spec.learner(0.55, v(&[1.6, 1.4]))?;
    let q = learner.mixture(&spec.cov)?;
    let p = spec.p_alpha();
    let g = reverse_kl_gradients(&learner, &spec, &est())?;
    let b = learner.beta();
    let comp = MixtureDensity::single(&learner.m_new, &spec.cov)?;
    let e = mc_mean(400_000, ctx.seed("stein"), 2, |r, _, out| {
        let y = comp.draw_component(0, r);
        let s = match (score(&q, &y), score(&p, &y)) {
            (Ok(a), Ok(c)) => (a - c) * (1.0 - b),
            _ => DVector::from_element(2, f64::NAN),
        };
        out.copy_from_slice(s.as_slice());
    });
    let mut worst: f64 = 0.0;
    for k in 0..2 {
        worst = worst.max((e.mean[k] - g.dm_new[k]).abs() / e.std_err[k]);
    }
    Ok(at_most(worst, 4.0))
}

/// `E_{p_o}[Σ⁻¹(Y − μ_o) 1{Y ∈ A_n}] = (φ(δ/2)/δ) Σ⁻¹(μ_n − μ_o)` by sampling.
fn gaussian_truncated_moment(ctx: &CheckContext) -> Result<Outcome> {
    let cov = cov2(1.2, -0.4, 0.9);
    let (mu_o, mu_n) = (v(&[0.5, -0.2]), v(&[1.7, 0.9]));
    let part = bayes_partition_stats(&mu_o, &mu_n, &cov)?;
    let po = MixtureDensity::single(&mu_o, &cov)?;
    let e = mc_mean(1_000_000, ctx.seed("truncated"), 3, |r, _, out| {
        let y = po.draw_component(0, r);
        let inside = part.classify(&y) == Region::New;
        let s = cov.solve(&(&y - &mu_o));
        out[0] = if inside { s[0] } else { 0.0 };
        out[1] = if inside { s[1] } else { 0.0 };
        out[2] = if inside { 1.0 } else { 0.0 };
    });
    let mut worst: f64 = 0.0;
    for k in 0..2 {
        worst = worst.max((e.mean[k] - part.trunc_moment[k]).abs() / e.std_err[k]);
    }
    worst = worst.max((e.mean[2] - part.gamma).abs() / e.std_err[2]);
    Ok(at_most(worst, 4.0))
}

// ---------------------------------------------------------------------------
// Near-on-policy: distillation

struct SdftSetup {
    cfg: SdftConfig,
    run: crate::near_on_policy::sdft::SdftRun,
    mu_est: f64,
}

/// Two-dimensional run started off the anchor with `γ = 0.5 / M₀`.
fn sdft_setup() -> Result<SdftSetup> {
    let est = est_order(120);
    let mut cfg = SdftConfig {
        alpha_c: 0.5,
        nu_c: v(&[4.0, 0.0]),
        step_gamma: 1.0,
        ema_zeta: 0.3,
        demo_lambda: 0.3,
        mu_old: v(&[0.0, 0.0]),
        cov: CovarianceModel::identity(2),
    };
    let init = SdftState::new(0.4, v(&[3.4, 0.5]), 0.3, v(&[3.0, 0.8]))?;
    cfg.step_gamma = 0.5 / sdft_curvature(std::slice::from_ref(&init), &cfg, 1, &est)?.m_est;
    let run = sdft_run(&init, &cfg, 600, None, &est)?;
    let mu_est = sdft_curvature(&run.states, &cfg, 20, &est)?.mu_est;
    Ok(SdftSetup { cfg, run, mu_est })
}

/// Largest contraction ratio minus the allowance `1 − γμ/2`; passes up to
/// 0.02.
fn sdft_contraction(_: &CheckContext) -> Result<Outcome> {
    let s = sdft_setup()?;
    let allowed = 1.0 - s.cfg.step_gamma * s.mu_est / 2.0;
    let max_ratio = s
        .run
        .contraction_ratios
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if s.run.contraction_ratios.is_empty() || !(s.mu_est > 0.0) {
        return Ok(at_most(f64::NAN, 0.02));
    }
    Ok(at_most(max_ratio - allowed, 0.02))
}

/// Summed old-mean gradient norms against the geometric majorant's sum.
fn sdft_old_gradient_summable(_: &CheckContext) -> Result<Outcome> {
    let s = sdft_setup()?;
    let Some(fit) = fit_geometric(&s.run.old_grad_norms, 1e-14) else {
        return Ok(at_most(f64::INFINITY, 0.0));
    };
    let ok = fit.dominated && fit.kappa < 1.0 && s.run.old_grad_sum.is_finite();
    Ok(Outcome {
        passed: ok && s.run.old_grad_sum <= fit.sum_bound,
        measured: s.run.old_grad_sum,
        tolerance: fit.sum_bound,
    })
}

/// Distance of the final student from the limit (the anchor).
fn sdft_limit(_: &CheckContext) -> Result<Outcome> {
    Ok(at_most(sdft_setup()?.run.limit_error, 1e-3))
}

/// Without demonstrator pull, a matched student and teacher do not move.
fn sdft_fixed_point(_: &CheckContext) -> Result<Outcome> {
    let est = est_order(120);
    let mut worst: f64 = 0.0;
    for (d, nu) in [(1, vec![4.2]), (2, vec![3.5, -0.4])] {
        let cfg = SdftConfig {
            alpha_c: 0.5,
            nu_c: DVector::from_element(d, 4.0),
            step_gamma: 0.2,
            ema_zeta: 0.5,
            demo_lambda: 0.0,
            mu_old: DVector::zeros(d),
            cov: CovarianceModel::identity(d),
        };
        let mut s = SdftState::matched(0.3, v(&nu))?;
        let start = s.clone();
        for _ in 0..20 {
            s = sdft_step(&s, &cfg, &est)?.state;
        }
        worst = worst
            .max((s.student() - start.student()).amax())
            .max((s.teacher() - start.teacher()).amax());
    }
    Ok(at_most(worst, 1e-10))
}

fn separation_ratio(delta: f64) -> Result<f64> {
    let est = est_order(120);
    let mut cfg = SdftConfig {
        alpha_c: 0.5,
        nu_c: v(&[delta]),
        step_gamma: 1.0,
        ema_zeta: 0.5,
        demo_lambda: 0.5,
        mu_old: v(&[0.0]),
        cov: CovarianceModel::identity(1),
    };
    let init = SdftState::new(0.45, v(&[delta - 0.3]), 0.4, v(&[delta - 0.5]))?;
    cfg.step_gamma = 0.5 / sdft_curvature(std::slice::from_ref(&init), &cfg, 1, &est)?.m_est;
    let run = sdft_run(&init, &cfg, 200, None, &est)?;
    Ok(separation_profile(&run, &cfg).ratio_max)
}

/// `C_sep` is fitted as the largest ratio at δ ∈ {6, 8}; the held-out
/// separations must stay within it. Reports the largest held-out ratio.
fn sdft_separation(_: &CheckContext) -> Result<Outcome> {
    let fit = [6.0, 8.0]
        .iter()
        .map(|&d| separation_ratio(d))
        .collect::<Result<Vec<_>>>()?;
    let c_sep = fit.into_iter().fold(0.0, f64::max);
    let held = [6.5, 7.0, 7.5]
        .iter()
        .map(|&d| separation_ratio(d))
        .collect::<Result<Vec<_>>>()?;
    Ok(at_most(held.into_iter().fold(0.0, f64::max), c_sep))
}

// ---------------------------------------------------------------------------
// Near-on-policy: entropic reward objective

fn label_of(beta: f64) -> TttCase {
    if beta <= 0.0 {
        TttCase::CollapseNew
    } else if beta >= 1.0 {
        TttCase::CollapseOld
    } else {
        TttCase::Interior
    }
}

/// With disjoint reward regions every positive anchor keeps the optimum
/// interior; grid argmax distance to the bisected optimum. Small anchors
/// put the optimum within a grid step of an end, so the grid label is not
/// compared.
fn ttt_disjoint_interior(_: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (u, beta0) in [((0.0, 1.0), 0.5), ((1.0, 0.0), 0.3), ((-0.5, 0.7), 0.6)] {
        for lambda in [0.05, 0.3, 1.0, 4.0] {
            let mut c = ttt_canonical(1.0, lambda, beta0, u, 3.0, 1)?;
            c.reward.partition = RewardPartition::Disjoint;
            let a = ttt_analysis(&c, &est())?;
            let (arg, _) = grid_argmax(&a.model, 2001);
            if a.case != TttCase::Interior || !(a.beta_star > 0.0 && a.beta_star < 1.0) {
                return Ok(at_most(f64::INFINITY, 1e-3));
            }
            worst = worst.max((arg - a.beta_star).abs());
        }
    }
    Ok(at_most(worst, 1e-3))
}

fn ttt_j_monte_carlo(ctx: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let configs = [
        ttt_canonical(1.5, 0.0, 0.5, (-0.3, 0.8), 1.5, 2)?,
        ttt_canonical(0.7, 0.0, 0.5, (1.0, 0.2), 3.0, 1)?,
    ];
    for (i, c) in configs.iter().enumerate() {
        let m = TttModel::new(c, &est())?;
        for (j, beta) in [0.1, 0.35, 0.7].into_iter().enumerate() {
            let (val, se) = j_monte_carlo(c, beta, 200_000, derive_seed(ctx.seed("ttt_mc"), &format!("{i}/{j}")))?;
            worst = worst.max((val - m.j(beta)).abs() / se);
        }
    }
    Ok(at_most(worst, 4.0))
}

/// Scan `λ_ref` across both critical values for new- and old-favoured
/// rewards. Counts scan points whose case label or optimum disagrees with
/// the 2001-point grid argmax.
fn ttt_case_labels(_: &CheckContext) -> Result<Outcome> {
    let mut mismatches = 0usize;
    for (u, beta0, delta) in [
        ((0.0, 1.0), 0.5, 2.0),
        ((1.0, 0.0), 0.5, 2.0),
        ((0.2, 0.9), 0.3, 1.0),
        ((0.8, -0.1), 0.7, 3.0),
    ] {
        let base = ttt_canonical(1.0, 0.0, beta0, u, delta, 1)?;
        let a0 = ttt_analysis(&base, &est())?;
        let crit = a0.lambda_crit_new.max(a0.lambda_crit_old);
        for s in [0.0, 0.25, 0.5, 0.9, 1.0, 1.1, 2.0, 5.0] {
            let a = ttt_analysis(&base.with_lambda(s * crit), &est())?;
            let (arg, _) = grid_argmax(&a.model, 2001);
            if label_of(arg) != a.case || (arg - a.beta_star).abs() > 1e-3 {
                mismatches += 1;
            }
        }
        for l in [a0.lambda_crit_new, a0.lambda_crit_old] {
            let a = ttt_analysis(&base.with_lambda(l), &est())?;
            let (arg, _) = grid_argmax(&a.model, 2001);
            if label_of(arg) != a.case {
                mismatches += 1;
            }
        }
    }
    Ok(at_most(mismatches as f64, 0.0))
}

fn ttt_general_configs() -> Result<Vec<(TttConfig, f64, DVector<f64>)>> {
    let mut c1 = ttt_canonical(1.0, 0.0, 0.5, (0.0, 1.0), 3.0, 2)?;
    c1.geometry = ModePair::new(v(&[0.2, -0.1]), v(&[2.1, 1.4]), cov2(1.2, 0.3, 0.8))?;
    let c2 = ttt_canonical(0.6, 0.2, 0.4, (1.0, -0.5), 2.0, 1)?;
    let c3 = ttt_canonical(1.3, 0.0, 0.5, (-0.2, 0.4), 4.0, 2)?;
    Ok(vec![
        (c1, 0.37, v(&[1.8, 1.9])),
        (c2, 0.6, v(&[1.7])),
        (c3, 0.25, v(&[4.2, -0.3])),
    ])
}

fn ttt_oldmean_gradient_fd(_: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (c, beta, mn) in ttt_general_configs()? {
        let r = ttt_oldmean_gradient(beta, &mn, &c, &est())?;
        let num = fd::gradient(
            |x| j_general_quadrature(beta, &v(x), &mn, &c, &est()),
            c.geometry.mu_old.as_slice(),
            1e-4,
        )?;
        worst = worst.max(rel_err(&r.grad, &num));
    }
    Ok(at_most(worst, 1e-4))
}

fn ttt_oldmean_gradient_bound(_: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut cases = ttt_general_configs()?;
    for delta in [1.0, 2.0, 4.0, 6.0, 8.0] {
        cases.push((
            ttt_canonical(1.0, 0.0, 0.5, (0.0, 1.0), delta, 2)?,
            0.5,
            v(&[delta + 0.2, 0.3]),
        ));
    }
    for (c, beta, mn) in cases {
        let r = ttt_oldmean_gradient(beta, &mn, &c, &est())?;
        worst = worst.max(r.grad.norm() / r.bound.max(1e-300));
    }
    Ok(at_most(worst, 1.0 + 1e-9))
}

// ---------------------------------------------------------------------------
// Near-on-policy: tilt and advantage regression

/// Tilted old weight under disjoint supports against component-label
/// sampling, in standard errors.
fn oapl_disjoint_weight(ctx: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (i, (tau, beta0, r)) in [
        (1.0, 0.5, (0.0, 2f64.ln())),
        (0.5, 0.3, (0.4, -0.2)),
        (2.0, 0.7, (-1.0, 1.0)),
    ]
    .into_iter()
    .enumerate()
    {
        let mut c = OaplConfig::canonical(tau, beta0, r, 3.0, 1)?;
        c.reward.partition = RewardPartition::Disjoint;
        let t = oapl_target(&c)?;
        let (b, _) = oapl_sampling_oracle(&c, 400_000, derive_seed(ctx.seed("oapl_disjoint"), &i.to_string()))?;
        worst = worst.max((b.value - t.beta_star_disjoint).abs() / b.std_err);
    }
    Ok(at_most(worst, 4.0))
}

fn oapl_old_responsibility(ctx: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (i, (tau, beta0, r, delta, d)) in [
        (1.0, 0.4, (0.0, 1.0), 3.0, 1),
        (0.6, 0.5, (0.8, 0.1), 1.5, 2),
        (1.5, 0.3, (-0.4, 0.6), 2.5, 1),
    ]
    .into_iter()
    .enumerate()
    {
        let c = OaplConfig::canonical(tau, beta0, r, delta, d)?;
        let t = oapl_target(&c)?;
        let (_, e) = oapl_sampling_oracle(&c, 400_000, derive_seed(ctx.seed("oapl_resp"), &i.to_string()))?;
        worst = worst.max((e.value - t.expected_old_resp).abs() / e.std_err);
    }
    Ok(at_most(worst, 4.0))
}

fn oapl_configs() -> Result<Vec<(OaplConfig, f64, DVector<f64>)>> {
    let g = ModePair::new(v(&[0.3, -0.2]), v(&[1.9, 1.1]), cov2(0.9, 0.2, 1.1))?;
    let c1 = OaplConfig {
        tau: 0.8,
        beta0: 0.45,
        reward: StepReward {
            u_old: -0.2,
            u_new: 0.9,
            partition: RewardPartition::BayesHalfspace,
        },
        geometry: g,
    };
    let c2 = OaplConfig::canonical(1.0, 0.5, (0.0, 1.0), 2.0, 1)?;
    let c3 = OaplConfig::canonical(0.5, 0.3, (0.7, 0.2), 3.0, 2)?;
    Ok(vec![
        (c1, 0.3, v(&[1.5, 1.6])),
        (c2, 0.6, v(&[1.6])),
        (c3, 0.45, v(&[2.6, 0.4])),
    ])
}

fn oapl_regression_gradient_fd(_: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (c, beta, mn) in oapl_configs()? {
        let r = oapl_regression_grad(beta, &mn, &c, &est())?;
        let num = fd::gradient(
            |x| oapl_regression_value(beta, &v(x), &c, &est()).unwrap_or(f64::NAN),
            mn.as_slice(),
            1e-4,
        )?;
        worst = worst.max(rel_err(&r.grad_m, &num));
    }
    Ok(at_most(worst, 1e-4))
}

/// Old-mode part of the regression gradient at the synchronized point
/// relative to its overlap bound.
fn oapl_oldmode_bound(_: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for delta in [1.0, 2.0, 4.0, 6.0, 8.0] {
        for (tau, beta0, r) in [(1.0, 0.5, (0.0, 1.0)), (0.5, 0.3, (0.6, -0.4))] {
            let c = OaplConfig::canonical(tau, beta0, r, delta, 2)?;
            let g = oapl_regression_grad(beta0, &c.geometry.mu_new.clone(), &c, &est())?;
            worst = worst
                .max(g.oldmode_term.norm() / g.oldmode_bound.max(1e-300))
                .max(g.eps_ref / g.eps_ref_bound);
        }
    }
    Ok(at_most(worst, 1.0))
}

/// Pointwise density error of the tilted reference at 10³ probes.
fn tilt_recovers_target(ctx: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (i, (alpha, delta, d, beta0, tau)) in [
        (0.3, 2.5, 2, 0.6, 0.7),
        (0.5, 4.0, 1, 0.2, 1.3),
        (0.7, 1.0, 2, 0.5, 0.4),
    ]
    .into_iter()
    .enumerate()
    {
        let spec = TargetSpec::canonical(alpha, delta, d)?;
        let t = tilt_recovery_check(
            &spec,
            beta0,
            tau,
            1000,
            derive_seed(ctx.seed("tilt"), &i.to_string()),
            &est(),
        )?;
        worst = worst.max(t.max_density_err).max(t.max_log_err);
    }
    Ok(at_most(worst, 1e-10))
}

// ---------------------------------------------------------------------------
// Extensions: f-divergences

fn random_pair(r: &mut impl Rng, d: usize) -> Result<(MixtureDensity, MixtureDensity)> {
    let cov = random_cov(r, d);
    let a = random_vec(r, d, 1.0);
    let b = &a + random_vec(r, d, 1.2);
    let c = &a + random_vec(r, d, 0.8);
    let p = MixtureDensity::two(0.2 + 0.6 * r.random::<f64>(), &a, &b, &cov)?;
    let q = MixtureDensity::two(0.2 + 0.6 * r.random::<f64>(), &c, &b, &cov)?;
    Ok((p, q))
}

/// `D_f(P‖Q)` against `D_{f◇}(Q‖P)` on random mixture pairs, relative.
fn fdiv_adjoint_identity(ctx: &CheckContext) -> Result<Outcome> {
    let rng = CounterRng::new(ctx.seed("adjoint"));
    let cfg = est_order(120);
    let mut worst: f64 = 0.0;
    for i in 0..6 {
        let (p, q) = random_pair(&mut rng.stream(i), 1 + (i as usize) % 2)?;
        for g in FGenerator::catalogue() {
            let a = divergence(&q, &p, &g, &cfg)?;
            let b = divergence(&p, &q, &g.adjoint(), &cfg)?;
            worst = worst.max((a - b).abs() / (1.0 + a.abs()));
        }
    }
    Ok(at_most(worst, 1e-8))
}

/// Smallest consecutive loss difference over all generators and three
/// separations.
fn fdiv_sft_monotone(_: &CheckContext) -> Result<Outcome> {
    let cfg = est_order(120);
    let mut worst = f64::INFINITY;
    for (alpha, delta, d) in [(0.5, 1.0, 1), (0.3, 2.5, 2), (0.5, 4.0, 1)] {
        let spec = TargetSpec::canonical(alpha, delta, d)?;
        for g in FGenerator::catalogue() {
            let s = fdiv_sft_scan(&g, &spec, &cfg)?;
            if s.losses[0].abs() > 1e-12 {
                return Ok(above(f64::NAN, 0.0));
            }
            for w in s.losses.windows(2) {
                worst = worst.min(w[1] - w[0]);
            }
        }
    }
    Ok(above(worst, 0.0))
}

fn fdiv_drift_fd(_: &CheckContext) -> Result<Outcome> {
    let cfg = est_order(120);
    let cases = [
        (TargetSpec::canonical(0.4, 2.0, 2)?, 0.45, v(&[1.6, -0.3])),
        (
            TargetSpec::new(0.6, v(&[0.5]), v(&[-1.5]), CovarianceModel::diagonal(&[0.8])?)?,
            0.3,
            v(&[-1.2]),
        ),
    ];
    let mut worst: f64 = 0.0;
    for (spec, beta, mn) in &cases {
        for g in FGenerator::catalogue() {
            let r = fdiv_oldmean_grad(&g, *beta, mn, spec, &cfg)?;
            let num = fd::gradient(
                |x| fdiv_rl_loss(&g, *beta, &v(x), mn, spec, &cfg).unwrap_or(f64::NAN),
                spec.mu_old.as_slice(),
                1e-4,
            )?;
            worst = worst.max(rel_err(&r.grad, &num));
        }
    }
    Ok(at_most(worst, 1e-4))
}

/// Bounded-curvature generators: `‖∇‖ / bound` across separations.
fn fdiv_drift_bound(_: &CheckContext) -> Result<Outcome> {
    let cfg = est_order(120);
    let mut worst: f64 = 0.0;
    for delta in [1.0, 2.0, 4.0, 6.0] {
        let spec = TargetSpec::canonical(0.5, delta, 2)?;
        let mn = &spec.mu_new + v(&[0.3, -0.2]);
        for g in FGenerator::catalogue()
            .into_iter()
            .filter(|g| g.kappa_sup().is_finite())
        {
            let r = fdiv_oldmean_grad(&g, 0.4, &mn, &spec, &cfg)?;
            worst = worst.max(r.grad.norm() / r.bound.max(1e-300));
        }
    }
    Ok(at_most(worst, 1.0 + 1e-9))
}

/// Grid suprema of `κ(t) = t f''(t)` against the declared constants: the
/// grid maximum must not exceed the constant and must come within 10⁻³.
fn fdiv_kappa_suprema(_: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (name, sup) in [("js", 1.0), ("triangular", 32.0 / 27.0)] {
        let g = FGenerator::parse(name)?;
        if (g.kappa_sup() - sup).abs() > 1e-15 {
            return Ok(at_most(f64::INFINITY, 1e-3));
        }
        let grid_max = (0..=24_000)
            .map(|i| 10f64.powf(-12.0 + i as f64 * 1e-3))
            .map(|t| g.kappa(t))
            .fold(0.0, f64::max);
        if grid_max > sup * (1.0 + 1e-12) {
            return Ok(at_most(f64::INFINITY, 1e-3));
        }
        worst = worst.max((sup - grid_max) / sup);
    }
    Ok(at_most(worst, 1e-3))
}

// ---------------------------------------------------------------------------
// Extensions: K modes

/// Gram matrix `⟨N(μ_i), N(μ_j)⟩ = N(μ_i; μ_j, 2Σ)` in closed form against
/// quadrature; the smallest eigenvalue must be positive (distinct translates
/// are linearly independent). Reports the largest relative entry error.
fn kmode_gram_positive_definite(_: &CheckContext) -> Result<Outcome> {
    let sets: Vec<(CovarianceModel, Vec<DVector<f64>>)> = vec![
        (
            cov2(1.0, 0.3, 0.7),
            vec![v(&[0.0, 0.0]), v(&[1.0, 0.2]), v(&[0.3, 1.1])],
        ),
        (
            CovarianceModel::new(DMatrix::from_row_slice(
                3,
                3,
                &[1.0, 0.2, 0.0, 0.2, 0.9, 0.1, 0.0, 0.1, 1.3],
            ))?,
            vec![
                v(&[0.0, 0.0, 0.0]),
                v(&[0.6, 0.0, 0.0]),
                v(&[0.0, 0.7, 0.2]),
                v(&[0.4, 0.4, 0.9]),
            ],
        ),
    ];
    let mut worst: f64 = 0.0;
    for (cov, means) in sets {
        let d = cov.dim();
        let refs: Vec<&DVector<f64>> = means.iter().collect();
        let space = ReducedSpace::new(&cov, &refs);
        if space.rank() != d {
            return Err(Error::Precondition("gram check needs full-rank means".into()));
        }
        let k = means.len();
        let norm = (-(d as f64) * 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * cov.log_det()).exp();
        let quad = Quadrature::new(64);
        let mut gram = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                let diff = &means[i] - &means[j];
                let m = cov.mahalanobis(&diff);
                let closed = norm * 2f64.powf(-(d as f64) / 2.0) * (-m * m / 4.0).exp();
                let (ai, aj) = (space.point(&means[i]), space.point(&means[j]));
                let quadv = norm
                    * quad.expect_gaussian1(&ai, None, |u| {
                        (-0.5 * u.iter().zip(&aj).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).exp()
                    });
                worst = worst.max((closed - quadv).abs() / closed);
                gram[(i, j)] = closed;
            }
        }
        let lmin = gram.symmetric_eigen().eigenvalues.min();
        if !(lmin > 0.0) {
            return Ok(at_most(f64::INFINITY, 1e-8));
        }
    }
    Ok(at_most(worst, 1e-8))
}

fn three_modes(scale: f64) -> Result<MixtureDensity> {
    MixtureDensity::new(
        vec![0.2, 0.3, 0.5],
        vec![v(&[0.0, 0.0]), v(&[scale, 0.0]), v(&[0.3 * scale, 0.9 * scale])],
        CovarianceModel::identity(2),
    )
}

fn kmode_cfg() -> EstimatorConfig {
    EstimatorConfig {
        quad_order: 80,
        mc_samples: 400_000,
        ..Default::default()
    }
}

fn kmode_models() -> Result<Vec<(MixtureDensity, MixtureDensity, Vec<usize>)>> {
    let t = three_modes(2.0)?;
    let m1 = MixtureDensity::new(
        vec![0.3, 0.3, 0.4],
        vec![v(&[0.0, 0.0]), v(&[1.5, 0.4]), v(&[0.9, 2.2])],
        CovarianceModel::identity(2),
    )?;
    let t2 = three_modes(4.0)?;
    let m2 = MixtureDensity::new(
        vec![0.5, 0.25, 0.25],
        vec![v(&[0.0, 0.0]), v(&[3.6, 0.5]), v(&[1.0, 3.9])],
        CovarianceModel::identity(2),
    )?;
    Ok(vec![(t, m1, vec![0, 1]), (t2, m2, vec![1])])
}

/// Pairwise misassignment estimates against their bounds, `max ε / bound`.
fn kmode_pairwise_bound(_: &CheckContext) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for (t, m, subset) in kmode_models()? {
        let r = kmode_analysis(&t, &subset, 0, &m, &kmode_cfg())?;
        ok &= r.bounds_ok;
        for (e, b) in [(&r.eps_q, &r.eps_q_bound), (&r.eps_p, &r.eps_p_bound)] {
            for i in 0..e.nrows() {
                for j in 0..e.ncols() {
                    if i != j && b[(i, j)] > 0.0 {
                        worst = worst.max(e[(i, j)] / b[(i, j)]);
                    }
                }
            }
        }
    }
    Ok(Outcome {
        passed: ok && worst <= 1.0,
        measured: worst,
        tolerance: 1.0,
    })
}

/// Simplex-constrained fit of the subset weights against the closed form.
fn kmode_closed_form_minimizer(_: &CheckContext) -> Result<Outcome> {
    let cfg = kmode_cfg();
    let four = MixtureDensity::new(
        vec![0.1, 0.4, 0.3, 0.2],
        vec![v(&[0.0, 0.0]), v(&[3.0, 0.0]), v(&[0.0, 3.0]), v(&[3.0, 3.0])],
        CovarianceModel::identity(2),
    )?;
    let cases = vec![
        (three_modes(2.5)?, vec![0, 1]),
        (three_modes(2.5)?, vec![0, 1, 2]),
        (three_modes(5.0)?, vec![2]),
        (four.clone(), vec![1, 3]),
        (four, vec![0, 2, 3]),
    ];
    let mut worst: f64 = 0.0;
    for (t, subset) in cases {
        let fit = fit_subset_weights(&t, &subset, &cfg)?;
        let closed = subset_weights_closed_form(&t, &subset);
        for (a, b) in fit.beta.iter().zip(&closed) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(at_most(worst, 1e-6))
}

/// Old-mode gradient decomposition (sampled responsibilities) against
/// central differences of the quadrature reverse KL, in propagated
/// standard errors.
fn kmode_drift_decomposition_fd(_: &CheckContext) -> Result<Outcome> {
    let cfg = kmode_cfg();
    let kl = FGenerator::kl();
    let mut worst: f64 = 0.0;
    for (t, model, subset) in kmode_models()?.into_iter().take(1) {
        let r = kmode_analysis(&t, &subset, 0, &model, &cfg)?;
        let num = fd::gradient(
            |x| {
                let mut means = model.means().to_vec();
                means[0] = v(x);
                MixtureDensity::new(model.weights().to_vec(), means, model.cov().clone())
                    .and_then(|q| divergence(&q, &t, &kl, &cfg))
                    .unwrap_or(f64::NAN)
            },
            model.means()[0].as_slice(),
            1e-4,
        )?;
        let k = 0;
        let mut se = 0.0;
        for j in 1..t.n_components() {
            se += (&model.means()[j] - &model.means()[k]).norm() * r.eps_q_se[(k, j)]
                + (&t.means()[j] - &t.means()[k]).norm() * r.eps_p_se[(k, j)];
        }
        se *= model.weights()[k] * t.cov().inv_op_norm();
        worst = worst.max((&r.old_grad - &num).amax() / se);
    }
    Ok(at_most(worst, 4.0))
}

// ---------------------------------------------------------------------------
// Extensions: log-concave location families

const LC_SEPARATIONS: [f64; 3] = [2.0, 4.0, 6.0];

fn lc_reports() -> Result<Vec<crate::extensions::logconcave::LogconcaveReport>> {
    let fam = LocationFamily1D::log_cosh(0.5)?;
    LC_SEPARATIONS
        .iter()
        .map(|&sep| logconcave_checks(&fam, 0.0, sep, 0.5, 0.4, sep - 0.5, 1e-4))
        .collect()
}

/// Difference-quotient drift against the integration-by-parts form.
fn logconcave_ibp_identity(_: &CheckContext) -> Result<Outcome> {
    let worst = lc_reports()?
        .iter()
        .map(|r| (r.drift_grad - r.drift_grad_ibp).abs())
        .fold(0.0, f64::max);
    Ok(at_most(worst, 1e-7))
}

fn logconcave_bc_bound(_: &CheckContext) -> Result<Outcome> {
    let worst = lc_reports()?.iter().map(|r| r.bc / r.bc_bound).fold(0.0, f64::max);
    Ok(at_most(worst, 1.0))
}

fn logconcave_fisher_identity(_: &CheckContext) -> Result<Outcome> {
    let worst = lc_reports()?.iter().map(|r| r.fisher_residual).fold(0.0, f64::max);
    Ok(at_most(worst, 1e-6))
}

fn logconcave_sft_monotone(_: &CheckContext) -> Result<Outcome> {
    let mut worst = f64::INFINITY;
    for r in lc_reports()? {
        if r.sft_losses[0].abs() > 1e-12 {
            return Ok(above(f64::NAN, 0.0));
        }
        for w in r.sft_losses.windows(2) {
            worst = worst.min(w[1] - w[0]);
        }
    }
    Ok(above(worst, 0.0))
}

fn logconcave_drift_bound(_: &CheckContext) -> Result<Outcome> {
    let worst = lc_reports()?
        .iter()
        .map(|r| r.drift_grad.abs() / r.drift_bound.max(1e-300))
        .fold(0.0, f64::max);
    Ok(at_most(worst, 1.0))
}

/// Loss and difference gradient in `(β, m_n)` at `(α, μ_n)`.
fn logconcave_stationary(_: &CheckContext) -> Result<Outcome> {
    let fam = LocationFamily1D::log_cosh(0.5)?;
    let mut worst: f64 = 0.0;
    for (alpha, sep) in [(0.5, 2.0), (0.3, 4.0)] {
        let (mo, mn) = (0.0, sep);
        let f = |x: &[f64]| lc_reverse_kl(&fam, mo, x[1], x[0], mo, mn, alpha);
        let g = fd::gradient(f, &[alpha, mn], 1e-4)?;
        worst = worst.max(g.amax()).max(f(&[alpha, mn]).abs());
    }
    Ok(at_most(worst, 1e-6))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_claims_known() {
        let reg = registry();
        let names: BTreeSet<&str> = reg.iter().map(|c| c.name).collect();
        assert_eq!(names.len(), reg.len());
        for c in &reg {
            assert!(CLAIMS.contains(&c.claim), "{}", c.claim);
        }
        for k in CLAIMS {
            assert!(reg.iter().any(|c| c.claim == *k), "{k}");
        }
    }

    #[test]
    fn parsing() {
        assert_eq!(Suite::parse("near_on_policy").unwrap(), Suite::NearOnPolicy);
        assert!(Suite::parse("everything").is_err());
        assert_eq!(Mutation::parse("sft-gradient-sign").unwrap(), Mutation::SftGradientSign);
    }

    #[test]
    fn hitting_time_matches_separated_limit() {
        // Far apart the logit gradient is β, so T = ∫ (1 + e^{−φ}) dφ.
        let prob = SftProblem::from_delta(12.0, 200);
        let t = hitting_time(&prob, 0.5);
        let want = logit(0.5) - logit(SFT_FLOOR) + (1.0 / SFT_FLOOR - 1.0 / 0.5);
        assert!((t - want).abs() / want < 1e-6, "{t} vs {want}");
    }
}
