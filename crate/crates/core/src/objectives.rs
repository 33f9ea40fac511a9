//! Forward and reverse KL objectives of the two-mode learner, with their
//! gradients, misassignment probabilities and overlap bounds.
//!
//! The learner is `q = β N(m_o, Σ) + (1 − β) N(m_n, Σ)` and the target is
//! `p_α = α N(μ_o, Σ) + (1 − α) N(μ_n, Σ)`. Every expectation below depends
//! on `y` only through log ratios of these mixtures, so it is integrated in
//! the reduced space of the means (see [`crate::estimators::quadrature`]).
//! With [`Method::MonteCarlo`] the same integrals are sampled in the full
//! space instead.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::estimators::{mc_mean, EstimatorConfig, Method, Quadrature, ReducedMixture, ReducedSpace, Split};
use crate::mixture::{CovarianceModel, DisjointMixtureSpec, LearnerParams, MixtureDensity};
use crate::special::{binary_kl, logit, sigmoid, softplus};

/// Target `p_α` with its two true component means.
#[derive(Clone, Debug)]
pub struct TargetSpec {
    pub alpha: f64,
    pub mu_old: DVector<f64>,
    pub mu_new: DVector<f64>,
    pub cov: CovarianceModel,
}

impl TargetSpec {
    pub fn new(alpha: f64, mu_old: DVector<f64>, mu_new: DVector<f64>, cov: CovarianceModel) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::input("alpha", format!("{alpha} is not in (0, 1)")));
        }
        let d = cov.dim();
        if mu_old.len() != d || mu_new.len() != d {
            return Err(Error::input("mu_old", format!("means must have length {d}")));
        }
        if mu_old.iter().chain(mu_new.iter()).any(|x| !x.is_finite()) {
            return Err(Error::input("mu_old", "means must be finite"));
        }
        if mu_old == mu_new {
            return Err(Error::input("mu_new", "old and new means coincide"));
        }
        Ok(TargetSpec {
            alpha,
            mu_old,
            mu_new,
            cov,
        })
    }

    /// Target on the line `μ_n = μ_o + δ e_1` with `Σ = I_d`.
    pub fn canonical(alpha: f64, delta: f64, d: usize) -> Result<Self> {
        let mut mu_new = DVector::zeros(d);
        mu_new[0] = delta;
        Self::new(alpha, DVector::zeros(d), mu_new, CovarianceModel::identity(d))
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }

    /// Mahalanobis separation of the two true means.
    pub fn delta(&self) -> f64 {
        self.cov.mahalanobis(&(&self.mu_new - &self.mu_old))
    }

    pub fn p_alpha(&self) -> MixtureDensity {
        MixtureDensity::two(self.alpha, &self.mu_old, &self.mu_new, &self.cov).expect("validated target")
    }

    /// The same means with a different old weight.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::new(alpha, self.mu_old.clone(), self.mu_new.clone(), self.cov.clone())
    }

    /// The global reverse-KL optimum `(α, μ_o, μ_n)`.
    pub fn optimum(&self) -> LearnerParams {
        LearnerParams::from_beta(self.alpha, self.mu_old.clone(), self.mu_new.clone()).expect("alpha in (0, 1)")
    }

    /// Learner with `m_o = μ_o`.
    pub fn learner(&self, beta: f64, m_new: DVector<f64>) -> Result<LearnerParams> {
        if m_new.len() != self.dim() {
            return Err(Error::input("m_new", format!("must have length {}", self.dim())));
        }
        LearnerParams::from_beta(beta, self.mu_old.clone(), m_new)
    }
}

/// Exact forward `KL(p‖q)` and reverse `KL(q‖p)` for mixtures on disjoint
/// supports. `kl_oo` and `kl_nn` are the component divergences in the
/// direction being evaluated.
pub fn disjoint_decomposition(spec: &DisjointMixtureSpec) -> Result<(f64, f64)> {
    spec.validate()?;
    let (a, b) = (spec.alpha, spec.beta);
    let comp = |w: f64, kl: f64| if w == 0.0 { 0.0 } else { w * kl };
    let forward = binary_kl(a, b) + comp(a, spec.kl_oo) + comp(1.0 - a, spec.kl_nn);
    let reverse = binary_kl(b, a) + comp(b, spec.kl_oo) + comp(1.0 - b, spec.kl_nn);
    Ok((forward, reverse))
}

// ---------------------------------------------------------------------------
// Forward KL on new-only data

/// Loss, logit gradient and leakage of the new-only forward KL at one `β`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SftValue {
    pub loss: f64,
    pub dphi: f64,
    /// `E_{p_n}[r_o]`.
    pub leak: f64,
    pub leak_bound: f64,
}

/// `L(β) = KL(p_n ‖ β p_o + (1 − β) p_n)` with the true means fixed.
///
/// Under `p_n` the log ratio `X = log p_o/p_n` is `−δZ − δ²/2` with
/// `Z ~ N(0, 1)`, so every quantity is a one-dimensional integral over `Z`.
/// The responsibility `sigmoid(φ + X)` switches at `Z = (φ − δ²/2)/δ`; the
/// rule is split there.
#[derive(Clone, Debug)]
pub struct SftProblem {
    delta: f64,
    quad: Quadrature,
    sign: f64,
}

impl SftProblem {
    pub fn new(spec: &TargetSpec, cfg: &EstimatorConfig) -> Self {
        Self::from_delta(spec.delta(), cfg.quad_order)
    }

    pub fn from_delta(delta: f64, quad_order: usize) -> Self {
        SftProblem {
            delta,
            quad: Quadrature::new(quad_order),
            sign: 1.0,
        }
    }

    /// Multiply the returned logit gradient by `sign`. A value of `-1` is the
    /// mutation used as a negative control by the check suite.
    pub fn with_gradient_sign(mut self, sign: f64) -> Self {
        self.sign = sign;
        self
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    fn split(&self, phi: f64) -> Split {
        Split {
            axis: 0,
            at: (phi - 0.5 * self.delta * self.delta) / self.delta,
        }
    }

    fn log_ratio(&self, z: f64) -> f64 {
        -self.delta * z - 0.5 * self.delta * self.delta
    }

    /// `E_{p_n}[r_o]` at logit `φ`.
    pub fn leak_logit(&self, phi: f64) -> f64 {
        self.quad
            .expect_gaussian1(&[0.0], Some(self.split(phi)), |z| sigmoid(phi + self.log_ratio(z[0])))
    }

    /// Loss at `β ∈ [0, 1]`; the endpoints are the limits `0` and `δ²/2`.
    pub fn loss(&self, beta: f64) -> f64 {
        if beta <= 0.0 {
            return 0.0;
        }
        if beta >= 1.0 {
            return 0.5 * self.delta * self.delta;
        }
        self.loss_logit(logit(beta))
    }

    /// `−log(1 − β) − E[softplus(φ + X)]`.
    pub fn loss_logit(&self, phi: f64) -> f64 {
        let beta = sigmoid(phi);
        let e = self
            .quad
            .expect_gaussian1(&[0.0], Some(self.split(phi)), |z| softplus(phi + self.log_ratio(z[0])));
        -(-beta).ln_1p() - e
    }

    /// `dL/dφ = β − E_{p_n}[r_o]`, times the configured sign.
    pub fn logit_grad(&self, phi: f64) -> f64 {
        self.sign * (sigmoid(phi) - self.leak_logit(phi))
    }

    pub fn leak_bound(&self, beta: f64) -> f64 {
        0.5 * (beta / (1.0 - beta)).sqrt() * (-self.delta * self.delta / 8.0).exp()
    }

    pub fn evaluate(&self, beta: f64) -> Result<SftValue> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Precondition(format!(
                "beta = {beta} is on the boundary of [0, 1]"
            )));
        }
        let phi = logit(beta);
        let leak = self.leak_logit(phi);
        Ok(SftValue {
            loss: self.loss_logit(phi),
            dphi: self.sign * (beta - leak),
            leak,
            leak_bound: self.leak_bound(beta),
        })
    }
}

/// Forward KL on new-only data, its logit gradient and the leakage term.
pub fn sft_loss_and_logit_grad(beta: f64, spec: &TargetSpec, cfg: &EstimatorConfig) -> Result<SftValue> {
    match cfg.method {
        Method::ProjectedQuadrature => SftProblem::new(spec, cfg).evaluate(beta),
        Method::MonteCarlo => {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::Precondition(format!(
                    "beta = {beta} is on the boundary of [0, 1]"
                )));
            }
            let q = MixtureDensity::two(beta, &spec.mu_old, &spec.mu_new, &spec.cov)?;
            let pn = MixtureDensity::single(&spec.mu_new, &spec.cov)?;
            let e = mc_mean(cfg.mc_samples, cfg.seed, 2, |r, _, out| {
                let y = pn.draw_component(0, r);
                let lq = q.log_density(&y).unwrap_or(f64::NAN);
                let lp = pn.log_density(&y).unwrap_or(f64::NAN);
                out[0] = lp - lq;
                out[1] = q.responsibilities(&y).map(|v| v[0]).unwrap_or(f64::NAN);
            });
            let leak = e.mean[1];
            Ok(SftValue {
                loss: e.mean[0],
                dphi: beta - leak,
                leak,
                leak_bound: 0.5 * (beta / (1.0 - beta)).sqrt() * (-spec.delta().powi(2) / 8.0).exp(),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Posterior leakage between two components

/// Cross-mode responsibilities of the mixture `w f + (1 − w) g` for two
/// Gaussian components `f`, `g`, with their overlap bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Leakage {
    /// `E_g[r_f]`.
    pub into_f: f64,
    pub into_f_bound: f64,
    /// `E_f[1 − r_f]`.
    pub out_of_f: f64,
    pub out_of_f_bound: f64,
    pub bc: f64,
}

pub fn posterior_leakage(
    w: f64,
    mu_f: &DVector<f64>,
    mu_g: &DVector<f64>,
    cov: &CovarianceModel,
    cfg: &EstimatorConfig,
) -> Result<Leakage> {
    if !(w > 0.0 && w < 1.0) {
        return Err(Error::input("w", format!("{w} is not in (0, 1)")));
    }
    let bc = crate::mixture::bhattacharyya_equal_cov(cov, mu_f, mu_g);
    let (into_f, out_of_f) = match cfg.method {
        Method::ProjectedQuadrature => {
            let space = ReducedSpace::new(cov, &[mu_f, mu_g]);
            let mix = ReducedMixture::two(w, space.point(mu_f), space.point(mu_g));
            let quad = cfg.quadrature();
            let mut buf = [0.0; 2];
            let mut resp = |u: &[f64], k: usize| {
                mix.responsibilities(u, &mut buf);
                buf[k]
            };
            let a = quad.expect_gaussian1(&mix.means[1].clone(), None, |u| resp(u, 0));
            let b = quad.expect_gaussian1(&mix.means[0].clone(), None, |u| resp(u, 1));
            (a, b)
        }
        Method::MonteCarlo => {
            let m = MixtureDensity::two(w, mu_f, mu_g, cov)?;
            let e = mc_mean(cfg.mc_samples, cfg.seed, 2, |r, _, out| {
                let yg = m.draw_component(1, r);
                let yf = m.draw_component(0, r);
                out[0] = m.responsibilities(&yg).map(|v| v[0]).unwrap_or(f64::NAN);
                out[1] = m.responsibilities(&yf).map(|v| v[1]).unwrap_or(f64::NAN);
            });
            (e.mean[0], e.mean[1])
        }
    };
    Ok(Leakage {
        into_f,
        into_f_bound: 0.5 * (w / (1.0 - w)).sqrt() * bc,
        out_of_f,
        out_of_f_bound: 0.5 * ((1.0 - w) / w).sqrt() * bc,
        bc,
    })
}

// ---------------------------------------------------------------------------
// Reverse KL to the retaining target

/// Learner and target seen through one reduced space centred at `μ_o`.
pub(crate) struct ReducedPair {
    pub space: ReducedSpace,
    pub q: ReducedMixture,
    pub p: ReducedMixture,
}

impl ReducedPair {
    pub fn new(learner: &LearnerParams, spec: &TargetSpec) -> Self {
        let space = ReducedSpace::new(&spec.cov, &[&spec.mu_old, &spec.mu_new, &learner.m_new, &learner.m_old]);
        let q = ReducedMixture::two(learner.beta(), space.point(&learner.m_old), space.point(&learner.m_new));
        let p = ReducedMixture::two(spec.alpha, space.point(&spec.mu_old), space.point(&spec.mu_new));
        ReducedPair { space, q, p }
    }

    pub fn log_ratio(&self, u: &[f64]) -> f64 {
        self.q.log_density(u) - self.p.log_density(u)
    }
}

fn check_learner(learner: &LearnerParams, spec: &TargetSpec) -> Result<()> {
    let d = spec.dim();
    if learner.m_old.len() != d || learner.m_new.len() != d {
        return Err(Error::input("learner", format!("means must have length {d}")));
    }
    if !learner.logit.is_finite() || learner.m_old.iter().chain(learner.m_new.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("learner parameters are not finite".into()));
    }
    Ok(())
}

/// Draw `y ~ N(center, Σ)` in the full space.
fn draw_gaussian<R: rand::Rng + ?Sized>(center: &DVector<f64>, cov: &CovarianceModel, r: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(center.len(), |_, _| StandardNormal.sample(r));
    center + cov.chol() * z
}

/// `KL(q_θ ‖ p_α)`.
pub fn reverse_kl_loss(learner: &LearnerParams, spec: &TargetSpec, cfg: &EstimatorConfig) -> Result<f64> {
    check_learner(learner, spec)?;
    let v = match cfg.method {
        Method::ProjectedQuadrature => {
            let pair = ReducedPair::new(learner, spec);
            cfg.quadrature().expect_mixture1(&pair.q, None, |u| pair.log_ratio(u))
        }
        Method::MonteCarlo => {
            let q = learner.mixture(&spec.cov)?;
            let p = spec.p_alpha();
            mc_mean(cfg.mc_samples, cfg.seed, 1, |r, _, out| {
                let (y, _) = q.draw(r);
                out[0] = q.log_density(&y).unwrap_or(f64::NAN) - p.log_density(&y).unwrap_or(f64::NAN);
            })
            .mean[0]
        }
    };
    if !v.is_finite() {
        return Err(Error::Numeric("reverse KL is not finite".into()));
    }
    Ok(v)
}

/// Gradient of `KL(q_θ ‖ p_α)` in `(β, m_o, m_n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReverseKlGrad {
    pub dbeta: f64,
    pub dm_old: DVector<f64>,
    pub dm_new: DVector<f64>,
}

impl ReverseKlGrad {
    /// Chain rule to the logit: `∂_φ = β(1 − β) ∂_β`.
    pub fn dphi(&self, beta: f64) -> f64 {
        beta * (1.0 - beta) * self.dbeta
    }
}

/// With `ℓ = log(q/p_α)`:
/// `∂_β = ∫ (N(m_o) − N(m_n)) ℓ`,
/// `∇_{m_o} = β ∫ N(m_o) Σ⁻¹(y − m_o) ℓ`,
/// `∇_{m_n} = (1 − β) ∫ N(m_n) Σ⁻¹(y − m_n) ℓ`.
pub fn reverse_kl_gradients(
    learner: &LearnerParams,
    spec: &TargetSpec,
    cfg: &EstimatorConfig,
) -> Result<ReverseKlGrad> {
    check_learner(learner, spec)?;
    let beta = learner.beta();
    let (e_o, e_n, s_o, s_n) = match cfg.method {
        Method::ProjectedQuadrature => {
            let pair = ReducedPair::new(learner, spec);
            let r = pair.space.rank();
            let quad = cfg.quadrature();
            let moments = |a: &[f64]| {
                let v = quad.expect_gaussian(a, None, 1 + r, |u, out| {
                    let l = pair.log_ratio(u);
                    out[0] = l;
                    for k in 0..r {
                        out[1 + k] = (u[k] - a[k]) * l;
                    }
                });
                (v[0], pair.space.score_map(&v[1..]))
            };
            let (e_o, s_o) = moments(&pair.q.means[0]);
            let (e_n, s_n) = moments(&pair.q.means[1]);
            (e_o, e_n, s_o, s_n)
        }
        Method::MonteCarlo => {
            let q = learner.mixture(&spec.cov)?;
            let p = spec.p_alpha();
            let d = spec.dim();
            let cov = &spec.cov;
            let e = mc_mean(cfg.mc_samples, cfg.seed, 2 + 2 * d, |r, _, out| {
                for (k, m) in [&learner.m_old, &learner.m_new].into_iter().enumerate() {
                    let y = draw_gaussian(m, cov, r);
                    let l = q.log_density(&y).unwrap_or(f64::NAN) - p.log_density(&y).unwrap_or(f64::NAN);
                    let s = cov.solve(&(&y - m));
                    out[k] = l;
                    for i in 0..d {
                        out[2 + k * d + i] = s[i] * l;
                    }
                }
            });
            let s_o = DVector::from_column_slice(&e.mean[2..2 + d]);
            let s_n = DVector::from_column_slice(&e.mean[2 + d..2 + 2 * d]);
            (e.mean[0], e.mean[1], s_o, s_n)
        }
    };
    let g = ReverseKlGrad {
        dbeta: e_o - e_n,
        dm_old: s_o * beta,
        dm_new: s_n * (1.0 - beta),
    };
    if !g.dbeta.is_finite() || g.dm_old.iter().chain(g.dm_new.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("reverse KL gradient is not finite".into()));
    }
    Ok(g)
}

/// Old-mean gradient at `m_o = μ_o` and its misassignment decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftReport {
    /// `β Σ⁻¹(ε_q (m_n − μ_o) − ε_p (μ_n − μ_o))`.
    pub grad: DVector<f64>,
    /// `E_{p_o}[1 − r_o]` under the learner.
    pub eps_q: f64,
    /// `E_{p_o}[1 − s_o]` under the target.
    pub eps_p: f64,
    /// `β ‖Σ⁻¹‖₂ (ε_q ‖m_n − μ_o‖ + ε_p ‖μ_n − μ_o‖)` with the measured `ε`.
    pub bound: f64,
    pub eps_q_bound: f64,
    pub eps_p_bound: f64,
    /// `bound` with each `ε` replaced by its overlap bound.
    pub explicit_bound: f64,
}

pub fn oldmean_drift(learner: &LearnerParams, spec: &TargetSpec, cfg: &EstimatorConfig) -> Result<DriftReport> {
    check_learner(learner, spec)?;
    let scale = spec.mu_old.amax().max(1.0);
    if (&learner.m_old - &spec.mu_old).amax() > 1e-12 * scale {
        return Err(Error::Precondition(
            "old learner mean must equal the true old mean".into(),
        ));
    }
    let beta = learner.beta();
    let alpha = spec.alpha;
    let (eps_q, eps_p) = match cfg.method {
        Method::ProjectedQuadrature => {
            let pair = ReducedPair::new(learner, spec);
            let quad = cfg.quadrature();
            let mut bq = [0.0; 2];
            let mut bp = [0.0; 2];
            let v = quad.expect_gaussian(&pair.q.means[0].clone(), None, 2, |u, out| {
                pair.q.responsibilities(u, &mut bq);
                pair.p.responsibilities(u, &mut bp);
                out[0] = bq[1];
                out[1] = bp[1];
            });
            (v[0], v[1])
        }
        Method::MonteCarlo => {
            let q = learner.mixture(&spec.cov)?;
            let p = spec.p_alpha();
            let e = mc_mean(cfg.mc_samples, cfg.seed, 2, |r, _, out| {
                let y = draw_gaussian(&spec.mu_old, &spec.cov, r);
                out[0] = q.responsibilities(&y).map(|v| v[1]).unwrap_or(f64::NAN);
                out[1] = p.responsibilities(&y).map(|v| v[1]).unwrap_or(f64::NAN);
            });
            (e.mean[0], e.mean[1])
        }
    };
    let dq = &learner.m_new - &spec.mu_old;
    let dp = &spec.mu_new - &spec.mu_old;
    let grad = spec.cov.solve(&(&dq * eps_q - &dp * eps_p)) * beta;
    let inv = spec.cov.inv_op_norm();
    let bound = beta * inv * (eps_q * dq.norm() + eps_p * dp.norm());
    let eps_q_bound = 0.5 * ((1.0 - beta) / beta).sqrt() * (-spec.cov.mahalanobis(&dq).powi(2) / 8.0).exp();
    let eps_p_bound = 0.5 * ((1.0 - alpha) / alpha).sqrt() * (-spec.delta().powi(2) / 8.0).exp();
    let explicit_bound = beta * inv * (eps_q_bound * dq.norm() + eps_p_bound * dp.norm());
    Ok(DriftReport {
        grad,
        eps_q,
        eps_p,
        bound,
        eps_q_bound,
        eps_p_bound,
        explicit_bound,
    })
}

// ---------------------------------------------------------------------------
// Replay under forward KL

/// Where replayed old samples enter the forward KL.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// Deployed model `λ p_o + (1 − λ) q_β`, trained on `p_n`.
    Denominator,
    /// Model `q_β` trained on `λ p_o + (1 − λ) p_n`.
    Numerator,
}

/// Population minimizer `β⋆` and the deployed old mass.
pub fn replay_population_minimizer(lambda: f64, mode: ReplayMode) -> Result<(f64, f64)> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::input("lambda", format!("{lambda} is not in (0, 1)")));
    }
    Ok(match mode {
        ReplayMode::Denominator => (0.0, lambda),
        ReplayMode::Numerator => (lambda, lambda),
    })
}

/// Forward KL minimized under each replay mode, at `β ∈ [0, 1]`.
pub fn replay_forward_kl(beta: f64, lambda: f64, mode: ReplayMode, spec: &TargetSpec, cfg: &EstimatorConfig) -> f64 {
    let delta = spec.delta();
    match mode {
        ReplayMode::Denominator => SftProblem::from_delta(delta, cfg.quad_order).loss(lambda + (1.0 - lambda) * beta),
        ReplayMode::Numerator => {
            let data = ReducedMixture::two(lambda, vec![0.0], vec![delta]);
            let model = ReducedMixture::two(beta, vec![0.0], vec![delta]);
            cfg.quadrature()
                .expect_mixture1(&data, None, |u| data.log_density(u) - model.log_density(u))
        }
    }
}

/// Grid argmin of [`replay_forward_kl`] over `β ∈ {0, 0.01, …, 1}`.
pub fn replay_grid_argmin(lambda: f64, mode: ReplayMode, spec: &TargetSpec, cfg: &EstimatorConfig) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=100 {
        let b = i as f64 / 100.0;
        let v = replay_forward_kl(b, lambda, mode, spec, cfg);
        if v < best.0 {
            best = (v, b);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::fd;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn disjoint_examples() {
        let s = |a, b| DisjointMixtureSpec {
            alpha: a,
            beta: b,
            kl_oo: 0.0,
            kl_nn: 0.0,
            reward_old: 0.0,
            reward_new: 0.0,
        };
        assert_eq!(disjoint_decomposition(&s(0.3, 0.3)).unwrap(), (0.0, 0.0));
        assert_eq!(disjoint_decomposition(&s(0.5, 0.0)).unwrap().0, f64::INFINITY);
        let f = disjoint_decomposition(&s(0.6, 0.4)).unwrap().0;
        assert!((f - (0.6 * 1.5f64.ln() + 0.4 * (2.0f64 / 3.0).ln())).abs() < 1e-15);
        assert!((f - 0.081_093_021_621_632_9).abs() < 1e-12);
    }

    #[test]
    fn sft_gradient_matches_differences() {
        let spec = TargetSpec::canonical(0.3, 4.0, 1).unwrap();
        let cfg = EstimatorConfig::default();
        let prob = SftProblem::new(&spec, &cfg);
        let g = fd::gradient(|x: &[f64]| prob.loss_logit(x[0]), &[0.0], 1e-4).unwrap();
        let val = prob.evaluate(0.5).unwrap();
        assert!((g[0] - val.dphi).abs() < 1e-8, "{} {}", g[0], val.dphi);
    }

    #[test]
    fn sft_small_leak_at_large_separation() {
        let spec = TargetSpec::canonical(0.3, 6.0, 1).unwrap();
        let v = sft_loss_and_logit_grad(0.5, &spec, &EstimatorConfig::default()).unwrap();
        assert!(v.leak <= 0.5 * (-4.5f64).exp());
        assert!((v.dphi - 0.5).abs() < 0.0056);
        assert!(sft_loss_and_logit_grad(0.0, &spec, &EstimatorConfig::default()).is_err());
    }

    #[test]
    fn sft_quadrature_agrees_with_monte_carlo() {
        let spec = TargetSpec::canonical(0.3, 2.0, 2).unwrap();
        let cfg = EstimatorConfig::default();
        let a = sft_loss_and_logit_grad(0.4, &spec, &cfg).unwrap();
        let b = sft_loss_and_logit_grad(0.4, &spec, &cfg.with_method(Method::MonteCarlo)).unwrap();
        assert!((a.leak - b.leak).abs() < 5e-3);
        assert!((a.loss - b.loss).abs() < 5e-3);
    }

    #[test]
    fn reverse_kl_vanishes_at_target() {
        let spec = TargetSpec::new(
            0.4,
            v(&[0.0, 1.0]),
            v(&[2.0, -1.0]),
            CovarianceModel::diagonal(&[1.0, 2.0]).unwrap(),
        )
        .unwrap();
        let cfg = EstimatorConfig::default();
        let opt = spec.optimum();
        assert!(reverse_kl_loss(&opt, &spec, &cfg).unwrap().abs() < 1e-12);
        let g = reverse_kl_gradients(&opt, &spec, &cfg).unwrap();
        assert!(g.dbeta.abs() < 1e-12 && g.dm_new.amax() < 1e-12 && g.dm_old.amax() < 1e-12);
    }

    #[test]
    fn reverse_kl_gradient_matches_differences() {
        let cov = CovarianceModel::new(nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8])).unwrap();
        let spec = TargetSpec::new(0.35, v(&[0.0, 0.0]), v(&[2.5, 1.0]), cov).unwrap();
        let cfg = EstimatorConfig::default();
        let base = LearnerParams::from_beta(0.6, v(&[0.2, -0.1]), v(&[2.0, 1.4])).unwrap();
        let g = reverse_kl_gradients(&base, &spec, &cfg).unwrap();
        let f = |x: &[f64]| {
            let l = LearnerParams {
                logit: logit(x[0]),
                m_old: v(&x[1..3]),
                m_new: v(&x[3..5]),
            };
            reverse_kl_loss(&l, &spec, &cfg).unwrap()
        };
        let x0 = [0.6, 0.2, -0.1, 2.0, 1.4];
        let fdg = fd::gradient(f, &x0, 1e-4).unwrap();
        let an = [g.dbeta, g.dm_old[0], g.dm_old[1], g.dm_new[0], g.dm_new[1]];
        for i in 0..5 {
            assert!(
                (fdg[i] - an[i]).abs() < 1e-6 * (1.0 + an[i].abs()),
                "{i}: {} vs {}",
                fdg[i],
                an[i]
            );
        }
    }

    #[test]
    fn drift_decomposition_matches_direct_gradient() {
        let spec = TargetSpec::canonical(0.4, 2.0, 2).unwrap();
        let cfg = EstimatorConfig::default();
        let l = spec.learner(0.55, v(&[1.6, 0.7])).unwrap();
        let rep = oldmean_drift(&l, &spec, &cfg).unwrap();
        let g = reverse_kl_gradients(&l, &spec, &cfg).unwrap();
        assert!((&rep.grad - &g.dm_old).amax() < 1e-10);
        assert!(rep.grad.norm() <= rep.bound + 1e-12);
        assert!(rep.eps_q <= rep.eps_q_bound && rep.eps_p <= rep.eps_p_bound);
    }

    #[test]
    fn drift_requires_correct_old_mean() {
        let spec = TargetSpec::canonical(0.4, 2.0, 1).unwrap();
        let l = LearnerParams::from_beta(0.5, v(&[0.1]), v(&[2.0])).unwrap();
        assert!(matches!(
            oldmean_drift(&l, &spec, &EstimatorConfig::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn replay_minimizers() {
        assert_eq!(
            replay_population_minimizer(0.2, ReplayMode::Denominator).unwrap(),
            (0.0, 0.2)
        );
        assert_eq!(
            replay_population_minimizer(0.2, ReplayMode::Numerator).unwrap(),
            (0.2, 0.2)
        );
        let spec = TargetSpec::canonical(0.5, 3.0, 1).unwrap();
        let cfg = EstimatorConfig::default();
        assert!((replay_grid_argmin(0.2, ReplayMode::Numerator, &spec, &cfg) - 0.2).abs() < 1e-12);
        assert_eq!(replay_grid_argmin(0.2, ReplayMode::Denominator, &spec, &cfg), 0.0);
    }

    #[test]
    fn leakage_respects_overlap_bounds() {
        let cov = CovarianceModel::identity(1);
        let l = posterior_leakage(0.3, &v(&[0.0]), &v(&[2.0]), &cov, &EstimatorConfig::default()).unwrap();
        assert!(l.into_f <= l.into_f_bound && l.out_of_f <= l.out_of_f_bound);
        assert!((l.bc - (-0.5f64).exp()).abs() < 1e-15);
    }
}
