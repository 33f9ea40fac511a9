//! Student/teacher distillation with an EMA teacher and a demonstration anchor.
//!
//! The student `(β, m)` takes one explicit gradient step on
//! `KL(q_{β,m} ‖ p_{α,ν})` toward the current teacher `(α, ν)`, in raw `β`
//! (no logit). The teacher then moves to
//! `(1 − ζ) ν̃ + ζ((1 − λ) m̃_next + λ ν̃_c)`.
//! Both mixtures keep their old component at the fixed `μ_o`.

use nalgebra::{DMatrix, DVector};

use super::check_prob;
use crate::error::{Error, Result};
use crate::estimators::{fd, EstimatorConfig};
use crate::mixture::CovarianceModel;
use crate::objectives::{oldmean_drift, reverse_kl_gradients, TargetSpec};
use crate::special::sym_eig_range;

/// Probabilities are kept in `[CLAMP, 1 − CLAMP]`.
pub const CLAMP: f64 = 1e-12;

/// Contraction ratios are only recorded above this lag.
pub const RATIO_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct SdftState {
    pub alpha_t: f64,
    pub nu_t: DVector<f64>,
    pub beta_t: f64,
    pub m_t: DVector<f64>,
}

fn stack(p: f64, v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(v.len() + 1);
    out[0] = p;
    out.rows_mut(1, v.len()).copy_from(v);
    out
}

impl SdftState {
    pub fn new(alpha_t: f64, nu_t: DVector<f64>, beta_t: f64, m_t: DVector<f64>) -> Result<Self> {
        check_prob("alpha_t", alpha_t)?;
        check_prob("beta_t", beta_t)?;
        if nu_t.len() != m_t.len() {
            return Err(Error::input("m_t", "teacher and student means differ in length"));
        }
        Ok(SdftState {
            alpha_t,
            nu_t,
            beta_t,
            m_t,
        })
    }

    /// Student placed exactly on the teacher.
    pub fn matched(alpha: f64, nu: DVector<f64>) -> Result<Self> {
        Self::new(alpha, nu.clone(), alpha, nu)
    }

    pub fn student(&self) -> DVector<f64> {
        stack(self.beta_t, &self.m_t)
    }

    pub fn teacher(&self) -> DVector<f64> {
        stack(self.alpha_t, &self.nu_t)
    }

    /// `‖m̃ − ν̃‖`.
    pub fn lag(&self) -> f64 {
        (self.student() - self.teacher()).norm()
    }
}

#[derive(Clone, Debug)]
pub struct SdftConfig {
    pub alpha_c: f64,
    pub nu_c: DVector<f64>,
    pub step_gamma: f64,
    pub ema_zeta: f64,
    pub demo_lambda: f64,
    pub mu_old: DVector<f64>,
    pub cov: CovarianceModel,
}

impl SdftConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.cov.dim();
        check_prob("alpha_c", self.alpha_c)?;
        if self.nu_c.len() != d || self.mu_old.len() != d {
            return Err(Error::input("nu_c", format!("means must have length {d}")));
        }
        if !(self.step_gamma > 0.0 && self.step_gamma.is_finite()) {
            return Err(Error::input("step_gamma", "must be positive"));
        }
        if !(self.ema_zeta > 0.0 && self.ema_zeta <= 1.0) {
            return Err(Error::input("ema_zeta", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.demo_lambda) {
            return Err(Error::input("demo_lambda", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn anchor(&self) -> DVector<f64> {
        stack(self.alpha_c, &self.nu_c)
    }

    fn target(&self, alpha: f64, nu: &DVector<f64>) -> Result<TargetSpec> {
        TargetSpec::new(alpha, self.mu_old.clone(), nu.clone(), self.cov.clone())
            .map_err(|e| Error::Precondition(format!("teacher state is degenerate: {e}")))
    }
}

/// Raw `(∂_β, ∇_m)` of `KL(q_{β,m} ‖ p_{α,ν})`.
pub fn phasewise_gradient(
    beta: f64,
    m: &DVector<f64>,
    alpha: f64,
    nu: &DVector<f64>,
    cfg: &SdftConfig,
    est: &EstimatorConfig,
) -> Result<DVector<f64>> {
    let spec = cfg.target(alpha, nu)?;
    let learner = spec.learner(beta, m.clone())?;
    let g = reverse_kl_gradients(&learner, &spec, est)?;
    Ok(stack(g.dbeta, &g.dm_new))
}

/// Hessian of the phasewise loss in raw `(β, m)` at `x`, for teacher `y`,
/// from central differences of the analytic gradient.
pub fn phasewise_hessian(
    x: &DVector<f64>,
    y: &DVector<f64>,
    cfg: &SdftConfig,
    est: &EstimatorConfig,
) -> Result<DMatrix<f64>> {
    let d = x.len() - 1;
    let nu = y.rows(1, d).into_owned();
    let mut failure = None;
    let j = fd::jacobian(
        |t| {
            let m = DVector::from_column_slice(&t[1..]);
            match phasewise_gradient(t[0], &m, y[0], &nu, cfg, est) {
                Ok(g) => g,
                Err(e) => {
                    failure = Some(e);
                    DVector::from_element(d + 1, f64::NAN)
                }
            }
        },
        x.as_slice(),
        1e-4,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((&j + j.transpose()) * 0.5)
}

/// One step plus whether a probability hit the clamp.
#[derive(Clone, Debug)]
pub struct SdftStep {
    pub state: SdftState,
    pub grad: DVector<f64>,
    pub clamped: bool,
}

fn clamp_prob(p: f64, hit: &mut bool) -> f64 {
    let c = p.clamp(CLAMP, 1.0 - CLAMP);
    if c != p {
        *hit = true;
    }
    c
}

pub fn sdft_step(state: &SdftState, cfg: &SdftConfig, est: &EstimatorConfig) -> Result<SdftStep> {
    let grad = phasewise_gradient(state.beta_t, &state.m_t, state.alpha_t, &state.nu_t, cfg, est)?;
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("phasewise gradient is not finite".into()));
    }
    let d = state.m_t.len();
    let student = state.student() - &grad * cfg.step_gamma;
    let lam = cfg.demo_lambda;
    let zeta = cfg.ema_zeta;
    let teacher = state.teacher() * (1.0 - zeta) + (&student * (1.0 - lam) + cfg.anchor() * lam) * zeta;
    let mut clamped = false;
    let next = SdftState {
        alpha_t: clamp_prob(teacher[0], &mut clamped),
        nu_t: teacher.rows(1, d).into_owned(),
        beta_t: clamp_prob(student[0], &mut clamped),
        m_t: student.rows(1, d).into_owned(),
    };
    Ok(SdftStep {
        state: next,
        grad,
        clamped,
    })
}

/// Trajectory and diagnostics of a multi-step run.
#[derive(Clone, Debug)]
pub struct SdftRun {
    /// States `0..=T`.
    pub states: Vec<SdftState>,
    /// `‖m̃_{t+1} − ν̃_t‖ / ‖m̃_t − ν̃_t‖`, skipped when the lag is below [`RATIO_FLOOR`].
    pub contraction_ratios: Vec<f64>,
    /// `‖m̃_t − ν̃_t‖` for `t = 0..=T`.
    pub lags: Vec<f64>,
    /// `‖ν̃_t − ν̃_c‖` for `t = 0..=T`.
    pub teacher_anchor_dists: Vec<f64>,
    /// Old-mean gradient norm against the moving teacher, `t = 0..=T`.
    pub old_grad_norms: Vec<f64>,
    pub old_grad_sum: f64,
    /// `‖(β_T, m_T) − target⋆‖`.
    pub limit_error: f64,
    /// `‖ν̃_c − target⋆‖`.
    pub anchor_error: f64,
    pub clamp_events: usize,
}

fn old_grad_norm(s: &SdftState, cfg: &SdftConfig, est: &EstimatorConfig) -> Result<f64> {
    let spec = cfg.target(s.alpha_t, &s.nu_t)?;
    let learner = spec.learner(s.beta_t, s.m_t.clone())?;
    Ok(oldmean_drift(&learner, &spec, est)?.grad.norm())
}

/// Run `steps` updates. `target_star` defaults to the anchor.
pub fn sdft_run(
    init: &SdftState,
    cfg: &SdftConfig,
    steps: usize,
    target_star: Option<(f64, &DVector<f64>)>,
    est: &EstimatorConfig,
) -> Result<SdftRun> {
    cfg.validate()?;
    if init.m_t.len() != cfg.cov.dim() {
        return Err(Error::input("init", "state dimension does not match the covariance"));
    }
    let anchor = cfg.anchor();
    let star = match target_star {
        Some((a, nu)) => stack(a, nu),
        None => anchor.clone(),
    };
    let mut states = vec![init.clone()];
    let mut ratios = Vec::new();
    let mut lags = vec![init.lag()];
    let mut dists = vec![(init.teacher() - &anchor).norm()];
    let mut norms = vec![old_grad_norm(init, cfg, est)?];
    let mut clamps = 0;
    for _ in 0..steps {
        let cur = states.last().expect("non-empty");
        let step = sdft_step(cur, cfg, est)?;
        let lag = cur.lag();
        if lag >= RATIO_FLOOR {
            ratios.push((step.state.student() - cur.teacher()).norm() / lag);
        }
        if step.clamped {
            clamps += 1;
        }
        let next = step.state;
        lags.push(next.lag());
        dists.push((next.teacher() - &anchor).norm());
        norms.push(old_grad_norm(&next, cfg, est)?);
        states.push(next);
    }
    let last = states.last().expect("non-empty");
    Ok(SdftRun {
        contraction_ratios: ratios,
        lags,
        teacher_anchor_dists: dists,
        old_grad_sum: norms.iter().sum(),
        old_grad_norms: norms,
        limit_error: (last.student() - &star).norm(),
        anchor_error: (&anchor - &star).norm(),
        clamp_events: clamps,
        states,
    })
}

/// Probed curvature of the phasewise loss along a trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvatureProbe {
    /// Smallest eigenvalue of `∇²F_y(y)` over the probed teachers.
    pub mu_est: f64,
    /// Largest eigenvalue of `∇²F_y(x)` over probed teachers and students.
    pub m_est: f64,
}

/// Probe every `stride`-th state (and the last one).
pub fn sdft_curvature(
    states: &[SdftState],
    cfg: &SdftConfig,
    stride: usize,
    est: &EstimatorConfig,
) -> Result<CurvatureProbe> {
    let mut mu = f64::INFINITY;
    let mut big = 0.0f64;
    let n = states.len();
    let stride = stride.max(1);
    for (i, s) in states.iter().enumerate() {
        if i % stride != 0 && i + 1 != n {
            continue;
        }
        let y = s.teacher();
        let (lo, hi) = sym_eig_range(&phasewise_hessian(&y, &y, cfg, est)?);
        mu = mu.min(lo);
        big = big.max(hi);
        let (_, hi) = sym_eig_range(&phasewise_hessian(&s.student(), &y, cfg, est)?);
        big = big.max(hi);
    }
    Ok(CurvatureProbe { mu_est: mu, m_est: big })
}

/// Geometric envelope `v_t ≤ C κ^t` fitted to a decaying sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricFit {
    pub c: f64,
    pub kappa: f64,
    /// Every value satisfies `v_t ≤ C κ^t + floor`.
    pub dominated: bool,
    /// `C / (1 − κ)`.
    pub sum_bound: f64,
}

/// Least-squares slope of `log v_t` over the entries above `floor`, then the
/// smallest `C` that dominates them.
pub fn fit_geometric(values: &[f64], floor: f64) -> Option<GeometricFit> {
    let pts: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > floor)
        .map(|(t, v)| (t as f64, v.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    let kappa = (sxy / sxx).exp();
    if !(kappa < 1.0) {
        return None;
    }
    let c = pts.iter().map(|(t, l)| (l - t * kappa.ln()).exp()).fold(0.0, f64::max);
    let dominated = values
        .iter()
        .enumerate()
        .all(|(t, v)| *v <= c * kappa.powi(t as i32) * (1.0 + 1e-12) + floor);
    Some(GeometricFit {
        c,
        kappa,
        dominated,
        sum_bound: c / (1.0 - kappa),
    })
}

/// Old-gradient size relative to the overlap factor `e^{−δ_eff²/8}` times the lag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeparationProfile {
    /// `min_t ‖ν_t − μ_o‖_{Σ⁻¹}`.
    pub delta_min: f64,
    /// Largest lag along the run.
    pub tube: f64,
    /// `δ_min − ‖Σ^{−1/2}‖₂ · tube`.
    pub delta_eff: f64,
    /// `max_t ‖∇_{m_o}‖ / (e^{−δ_eff²/8} lag_t)`.
    pub ratio_max: f64,
    pub max_old_grad: f64,
}

pub fn separation_profile(run: &SdftRun, cfg: &SdftConfig) -> SeparationProfile {
    let delta_min = run
        .states
        .iter()
        .map(|s| cfg.cov.mahalanobis(&(&s.nu_t - &cfg.mu_old)))
        .fold(f64::INFINITY, f64::min);
    let tube = run.lags.iter().cloned().fold(0.0, f64::max);
    let delta_eff = delta_min - tube / cfg.cov.eig_min().sqrt();
    let gate = (-delta_eff * delta_eff / 8.0).exp();
    let ratio_max = run
        .old_grad_norms
        .iter()
        .zip(&run.lags)
        .filter(|(_, l)| **l >= RATIO_FLOOR)
        .map(|(g, l)| g / (gate * l))
        .fold(0.0, f64::max);
    SeparationProfile {
        delta_min,
        tube,
        delta_eff,
        ratio_max,
        max_old_grad: run.old_grad_norms.iter().cloned().fold(0.0, f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn cfg(lambda: f64, delta: f64) -> SdftConfig {
        SdftConfig {
            alpha_c: 0.5,
            nu_c: v(&[delta]),
            step_gamma: 0.2,
            ema_zeta: 0.5,
            demo_lambda: lambda,
            mu_old: v(&[0.0]),
            cov: CovarianceModel::identity(1),
        }
    }

    fn est() -> EstimatorConfig {
        EstimatorConfig {
            quad_order: 120,
            ..Default::default()
        }
    }

    #[test]
    fn matched_state_moves_only_the_teacher() {
        let c = cfg(0.5, 4.0);
        let s = SdftState::matched(0.4, v(&[3.5])).unwrap();
        let step = sdft_step(&s, &c, &est()).unwrap();
        assert!(step.grad.amax() < 1e-10);
        assert!((step.state.beta_t - 0.4).abs() < 1e-11);
        let before = (s.teacher() - c.anchor()).norm();
        let after = (step.state.teacher() - c.anchor()).norm();
        assert!((after - (1.0 - 0.25) * before).abs() < 1e-10);
    }

    #[test]
    fn no_demonstrator_is_a_fixed_point() {
        let c = cfg(0.0, 4.0);
        let s = SdftState::matched(0.3, v(&[4.2])).unwrap();
        let step = sdft_step(&s, &c, &est()).unwrap();
        assert!((step.state.student() - s.student()).amax() < 1e-10);
        assert!((step.state.teacher() - s.teacher()).amax() < 1e-10);
    }

    #[test]
    fn run_converges_to_anchor() {
        let c = cfg(0.5, 4.0);
        let init = SdftState::new(0.45, v(&[3.7]), 0.4, v(&[3.5])).unwrap();
        let run = sdft_run(&init, &c, 300, None, &est()).unwrap();
        assert!(run.limit_error < 1e-3, "{}", run.limit_error);
        assert!(run.contraction_ratios.iter().all(|r| *r < 1.0));
        let fit = fit_geometric(&run.old_grad_norms, 1e-13).unwrap();
        assert!(fit.dominated && fit.kappa < 1.0);
        assert!(run.old_grad_sum <= fit.sum_bound + 1e-9);
    }

    #[test]
    fn clamp_is_reported() {
        let mut c = cfg(0.5, 4.0);
        c.step_gamma = 50.0;
        let s = SdftState::new(0.5, v(&[4.0]), 0.05, v(&[4.0])).unwrap();
        let step = sdft_step(&s, &c, &est()).unwrap();
        assert!(step.clamped);
        assert!(step.state.beta_t >= CLAMP && step.state.beta_t <= 1.0 - CLAMP);
    }

    #[test]
    fn geometric_fit_recovers_rate() {
        let vals: Vec<f64> = (0..40).map(|t| 3.0 * 0.8f64.powi(t)).collect();
        let f = fit_geometric(&vals, 1e-14).unwrap();
        assert!((f.kappa - 0.8).abs() < 1e-12);
        assert!((f.c - 3.0).abs() < 1e-9);
        assert!(f.dominated);
    }
}
