//! Gradient flows and the local PL certificate.
//!
//! Flows integrate `θ̇ = −∇L(θ)` with classical RK4. For the new-only
//! forward KL the state is the logit `φ` alone; for the reverse KL it is
//! `θ = (φ, m_n)` with the old mean held at `μ_o`. A step whose loss ends
//! above its start is retried at half the step, up to 20 times.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{fd, EstimatorConfig};
use crate::mixture::LearnerParams;
use crate::objectives::{reverse_kl_gradients, reverse_kl_loss, SftProblem, TargetSpec};
use crate::rng::CounterRng;
use crate::special::{sigmoid, sym_eig_range};

pub const LOGIT_CLIP: f64 = 30.0;
/// `β` outside `(COLLAPSE, 1 − COLLAPSE)` counts as numerically collapsed.
pub const COLLAPSE: f64 = 1e-13;
const MAX_HALVINGS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowObjective {
    /// `KL(p_n ‖ q_β)` in the logit.
    SftLogit,
    /// `KL(q_{φ, μ_o, m_n} ‖ p_α)` in `(φ, m_n)`.
    ReverseKl,
}

/// Recorded states of one flow.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<LearnerParams>,
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// Some state left `(1e-13, 1 − 1e-13)` in `β`.
    pub collapsed: bool,
    /// Number of step halvings performed.
    pub halvings: usize,
    /// Nominal steps taken because every halving still raised the loss.
    pub uphill_steps: usize,
}

impl Trajectory {
    pub fn betas(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.beta()).collect()
    }

    pub fn final_state(&self) -> &LearnerParams {
        self.states.last().expect("non-empty trajectory")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("non-empty trajectory")
    }

    /// Largest increase of the loss between consecutive records.
    pub fn max_loss_increase(&self) -> f64 {
        self.losses
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Integration controls beyond step and horizon.
#[derive(Clone, Debug)]
pub struct FlowOptions {
    pub dt: f64,
    pub t_max: f64,
    /// Stop once `β` falls below this value.
    pub stop_beta: Option<f64>,
    /// Stop once the loss falls below this value.
    pub stop_loss: Option<f64>,
    /// Record every step instead of every `ceil(0.1/dt)`-th.
    pub record_all: bool,
    /// Sign applied to the forward-KL logit gradient (mutation hook).
    pub sft_gradient_sign: f64,
}

impl FlowOptions {
    pub fn new(dt: f64, t_max: f64) -> Self {
        FlowOptions {
            dt,
            t_max,
            stop_beta: None,
            stop_loss: None,
            record_all: false,
            sft_gradient_sign: 1.0,
        }
    }
}

enum Field<'a> {
    Sft(SftProblem),
    Rkl {
        spec: &'a TargetSpec,
        m_old: DVector<f64>,
        cfg: &'a EstimatorConfig,
    },
}

impl Field<'_> {
    fn params(&self, theta: &[f64], init: &LearnerParams) -> LearnerParams {
        match self {
            Field::Sft(_) => LearnerParams {
                logit: theta[0],
                m_old: init.m_old.clone(),
                m_new: init.m_new.clone(),
            },
            Field::Rkl { m_old, .. } => LearnerParams {
                logit: theta[0],
                m_old: m_old.clone(),
                m_new: DVector::from_column_slice(&theta[1..]),
            },
        }
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        match self {
            Field::Sft(p) => Ok(p.loss_logit(theta[0])),
            Field::Rkl { spec, m_old, cfg } => {
                let l = LearnerParams {
                    logit: theta[0],
                    m_old: m_old.clone(),
                    m_new: DVector::from_column_slice(&theta[1..]),
                };
                reverse_kl_loss(&l, spec, cfg)
            }
        }
    }

    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        match self {
            Field::Sft(p) => Ok(vec![p.logit_grad(theta[0])]),
            Field::Rkl { spec, m_old, cfg } => {
                let l = LearnerParams {
                    logit: theta[0],
                    m_old: m_old.clone(),
                    m_new: DVector::from_column_slice(&theta[1..]),
                };
                let g = reverse_kl_gradients(&l, spec, cfg)?;
                let mut out = vec![g.dphi(l.beta())];
                out.extend(g.dm_new.iter());
                Ok(out)
            }
        }
    }
}

fn clip(theta: &mut [f64]) {
    theta[0] = theta[0].clamp(-LOGIT_CLIP, LOGIT_CLIP);
}

fn axpy(theta: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = theta.iter().zip(k).map(|(x, v)| x + a * v).collect();
    clip(&mut out);
    out
}

fn rk4(field: &Field, theta: &[f64], g0: &[f64], dt: f64) -> Result<Vec<f64>> {
    let k1: Vec<f64> = g0.iter().map(|g| -g).collect();
    let k2: Vec<f64> = field.grad(&axpy(theta, 0.5 * dt, &k1))?.iter().map(|g| -g).collect();
    let k3: Vec<f64> = field.grad(&axpy(theta, 0.5 * dt, &k2))?.iter().map(|g| -g).collect();
    let k4: Vec<f64> = field.grad(&axpy(theta, dt, &k3))?.iter().map(|g| -g).collect();
    let mut next: Vec<f64> = (0..theta.len())
        .map(|i| theta[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    clip(&mut next);
    Ok(next)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Integrate the gradient flow of `objective` from `init` with step `dt` up
/// to `t_max`.
pub fn integrate_flow(
    objective: FlowObjective,
    init: &LearnerParams,
    spec: &TargetSpec,
    dt: f64,
    t_max: f64,
    cfg: &EstimatorConfig,
) -> Result<Trajectory> {
    integrate_flow_with(objective, init, spec, &FlowOptions::new(dt, t_max), cfg)
}

pub fn integrate_flow_with(
    objective: FlowObjective,
    init: &LearnerParams,
    spec: &TargetSpec,
    opts: &FlowOptions,
    cfg: &EstimatorConfig,
) -> Result<Trajectory> {
    if !(opts.dt > 0.0 && opts.dt <= 0.5) {
        return Err(Error::input("dt", format!("{} is not in (0, 0.5]", opts.dt)));
    }
    if !(opts.t_max > 0.0 && opts.t_max.is_finite()) {
        return Err(Error::input("t_max", "must be positive and finite"));
    }
    if !init.logit.is_finite() {
        return Err(Error::input("init.logit", "must be finite"));
    }
    let field = match objective {
        FlowObjective::SftLogit => Field::Sft(SftProblem::new(spec, cfg).with_gradient_sign(opts.sft_gradient_sign)),
        FlowObjective::ReverseKl => {
            if init.m_new.len() != spec.dim() || init.m_old.len() != spec.dim() {
                return Err(Error::input("init.m_new", format!("must have length {}", spec.dim())));
            }
            Field::Rkl {
                spec,
                m_old: init.m_old.clone(),
                cfg,
            }
        }
    };
    let mut theta: Vec<f64> = match objective {
        FlowObjective::SftLogit => vec![init.logit],
        FlowObjective::ReverseKl => std::iter::once(init.logit).chain(init.m_new.iter().cloned()).collect(),
    };
    clip(&mut theta);
    let stride = if opts.record_all {
        1
    } else {
        (0.1 / opts.dt).ceil().max(1.0) as usize
    };

    let mut t = 0.0;
    let mut loss = field.loss(&theta)?;
    let mut grad = field.grad(&theta)?;
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![field.params(&theta, init)],
        losses: vec![loss],
        grad_norms: vec![norm(&grad)],
        collapsed: false,
        halvings: 0,
        uphill_steps: 0,
    };
    let collapsed = |phi: f64| {
        let b = sigmoid(phi);
        !(b > COLLAPSE && b < 1.0 - COLLAPSE)
    };
    traj.collapsed = collapsed(theta[0]);
    let mut step = 0usize;
    loop {
        let done_beta = opts.stop_beta.is_some_and(|b| sigmoid(theta[0]) < b);
        let done_loss = opts.stop_loss.is_some_and(|l| loss < l);
        if t >= opts.t_max * (1.0 - 1e-14) || done_beta || done_loss {
            break;
        }
        let nominal = opts.dt.min(opts.t_max - t);
        let mut h = nominal;
        let mut accepted = None;
        let mut first = None;
        for k in 0..=MAX_HALVINGS {
            let cand = rk4(&field, &theta, &grad, h)?;
            if cand.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite state at t = {t}")));
            }
            let l = field.loss(&cand)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at t = {t}")));
            }
            if l <= loss {
                accepted = Some((cand, l));
                break;
            }
            if k == 0 {
                first = Some((cand, l));
            }
            if k == MAX_HALVINGS {
                break;
            }
            traj.halvings += 1;
            h *= 0.5;
        }
        // No halving descends (the field is not a descent direction): take
        // the nominal step.
        let (cand, l) = match accepted {
            Some(a) => a,
            None => {
                traj.uphill_steps += 1;
                h = nominal;
                first.expect("first attempt recorded")
            }
        };
        theta = cand;
        loss = l;
        t += h;
        if h == nominal && nominal < opts.dt {
            t = opts.t_max.min(t);
        }
        grad = field.grad(&theta)?;
        step += 1;
        traj.collapsed |= collapsed(theta[0]);
        let last = t >= opts.t_max * (1.0 - 1e-14)
            || opts.stop_beta.is_some_and(|b| sigmoid(theta[0]) < b)
            || opts.stop_loss.is_some_and(|s| loss < s);
        if step.is_multiple_of(stride) || last {
            traj.times.push(t);
            traj.states.push(field.params(&theta, init));
            traj.losses.push(loss);
            traj.grad_norms.push(norm(&grad));
        }
    }
    Ok(traj)
}

// ---------------------------------------------------------------------------
// Local PL certificate

/// Controls for [`local_pl_certificate`].
#[derive(Clone, Debug)]
pub struct PlOptions {
    /// Radius of the ball on which the Hessian-Lipschitz constant is probed.
    pub r0: f64,
    pub lipschitz_pairs: usize,
    pub probes: usize,
    /// Step of the finite-difference Hessian at the optimum.
    pub fd_step: f64,
    /// Quadrature order for the many Hessians of the Lipschitz probe.
    pub probe_quad_order: usize,
    pub seed: u64,
}

impl Default for PlOptions {
    fn default() -> Self {
        PlOptions {
            r0: 0.5,
            lipschitz_pairs: 200,
            probes: 100,
            fd_step: 1e-3,
            probe_quad_order: 64,
            seed: 7,
        }
    }
}

/// Curvature of the reverse KL at `θ⋆ = (logit α, μ_n)` and the ball on
/// which it certifies a PL inequality.
#[derive(Clone, Debug)]
pub struct PLCertificate {
    /// Fisher form `E_{p_α}[s sᵀ]`.
    pub hessian: DMatrix<f64>,
    /// Central-difference Hessian of the loss at `θ⋆`.
    pub fd_hessian: DMatrix<f64>,
    /// `max|H_fisher − H_fd| / max|H_fisher|`.
    pub hessian_rel_diff: f64,
    pub mu_star: f64,
    pub mu_max: f64,
    /// Probed Hessian-Lipschitz constant on the `r0` ball.
    pub l_h_est: f64,
    pub r0: f64,
    pub rho: f64,
    pub eps_loc: f64,
    /// `min ‖∇L‖² / (μ⋆ L)` over the probes.
    pub min_pl_ratio: f64,
    /// `min (L − μ⋆/4 ‖θ − θ⋆‖²)` over the probes.
    pub min_growth_slack: f64,
    pub rate_ok: bool,
}

/// `θ⋆ = (logit α, μ_n)` as a flat vector.
pub fn theta_star(spec: &TargetSpec) -> Vec<f64> {
    std::iter::once(crate::special::logit(spec.alpha))
        .chain(spec.mu_new.iter().cloned())
        .collect()
}

fn learner_at(spec: &TargetSpec, theta: &[f64]) -> LearnerParams {
    LearnerParams {
        logit: theta[0],
        m_old: spec.mu_old.clone(),
        m_new: DVector::from_column_slice(&theta[1..]),
    }
}

/// Reverse-KL loss in `θ = (φ, m_n)`.
pub fn rkl_loss_theta(spec: &TargetSpec, theta: &[f64], cfg: &EstimatorConfig) -> Result<f64> {
    reverse_kl_loss(&learner_at(spec, theta), spec, cfg)
}

/// Reverse-KL gradient in `θ = (φ, m_n)`.
pub fn rkl_grad_theta(spec: &TargetSpec, theta: &[f64], cfg: &EstimatorConfig) -> Result<DVector<f64>> {
    let l = learner_at(spec, theta);
    let g = reverse_kl_gradients(&l, spec, cfg)?;
    let mut out = DVector::zeros(theta.len());
    out[0] = g.dphi(l.beta());
    out.rows_mut(1, theta.len() - 1).copy_from(&g.dm_new);
    Ok(out)
}

/// Hessian at `θ` as the symmetrized difference Jacobian of the gradient.
pub fn rkl_hessian_theta(spec: &TargetSpec, theta: &[f64], cfg: &EstimatorConfig) -> Result<DMatrix<f64>> {
    let mut err = None;
    let j = fd::jacobian(
        |x| match rkl_grad_theta(spec, x, cfg) {
            Ok(g) => g,
            Err(e) => {
                err = Some(e);
                DVector::from_element(x.len(), f64::NAN)
            }
        },
        theta,
        1e-4,
    );
    if let Some(e) = err {
        return Err(e);
    }
    let j = j?;
    Ok((&j + j.transpose()) * 0.5)
}

/// Fisher information of `(φ, m_n)` at the optimum, `E_{p_α}[s sᵀ]` with
/// `s = (r_o − α, r_n Σ⁻¹(Y − μ_n))`.
pub fn fisher_at_optimum(spec: &TargetSpec, cfg: &EstimatorConfig) -> DMatrix<f64> {
    use crate::estimators::{ReducedMixture, ReducedSpace};
    let d = spec.dim();
    let space = ReducedSpace::new(&spec.cov, &[&spec.mu_old, &spec.mu_new]);
    let r = space.rank();
    let a_n = space.point(&spec.mu_new);
    let mix = ReducedMixture::two(spec.alpha, space.point(&spec.mu_old), a_n.clone());
    let alpha = spec.alpha;
    // Layout: [E(r_o−α)², E r_n², E(r_o−α) r_n (u−a_n) (r), E r_n² (u−a_n)(u−a_n)ᵀ (r×r)].
    let m = 2 + r + r * r;
    let mut resp = [0.0; 2];
    let v = cfg.quadrature().expect_mixture(&mix, None, m, |u, out| {
        mix.responsibilities(u, &mut resp);
        let (ro, rn) = (resp[0], resp[1]);
        out[0] = (ro - alpha) * (ro - alpha);
        out[1] = rn * rn;
        for k in 0..r {
            out[2 + k] = (ro - alpha) * rn * (u[k] - a_n[k]);
            for l in 0..r {
                out[2 + r + k * r + l] = rn * rn * (u[k] - a_n[k]) * (u[l] - a_n[l]);
            }
        }
    });
    let u = &space.basis.basis;
    let mut inner = DMatrix::from_row_slice(r, r, &v[2 + r..]);
    inner = (&inner + inner.transpose()) * 0.5;
    let whitened = u.transpose() * inner * u + (DMatrix::identity(d, d) - u.transpose() * u) * v[1];
    let linv_t = spec
        .cov
        .chol()
        .clone()
        .try_inverse()
        .expect("Cholesky factor is invertible")
        .transpose();
    let block = &linv_t * whitened * linv_t.transpose();
    let cross = space.score_map(&v[2..2 + r]);
    let mut h = DMatrix::zeros(d + 1, d + 1);
    h[(0, 0)] = v[0];
    for i in 0..d {
        h[(0, 1 + i)] = cross[i];
        h[(1 + i, 0)] = cross[i];
        for j in 0..d {
            h[(1 + i, 1 + j)] = block[(i, j)];
        }
    }
    h
}

fn uniform_in_ball<R: Rng + ?Sized>(r: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
    let n = norm(&v);
    let scale = radius * r.random::<f64>().powf(1.0 / dim as f64) / n;
    v.iter().map(|x| x * scale).collect()
}

fn max_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / a.amax().max(1e-300)
}

/// Fisher and difference Hessians at the optimum, a probed Lipschitz
/// constant, the certified radius and the PL probes.
pub fn local_pl_certificate(spec: &TargetSpec, cfg: &EstimatorConfig, opts: &PlOptions) -> Result<PLCertificate> {
    let ts = theta_star(spec);
    let n = ts.len();
    let fisher = fisher_at_optimum(spec, cfg);
    let mut ferr = None;
    let fd_h = fd::hessian(
        |x| match rkl_loss_theta(spec, x, cfg) {
            Ok(v) => v,
            Err(e) => {
                ferr = Some(e);
                f64::NAN
            }
        },
        &ts,
        opts.fd_step,
    );
    if let Some(e) = ferr {
        return Err(e);
    }
    let fd_h = fd_h?;
    let rel = max_rel(&fisher, &fd_h);
    if rel > 1e-2 {
        return Err(Error::Consistency(format!(
            "Fisher and difference Hessians disagree at the optimum (relative {rel:.3e})"
        )));
    }
    let (mu_star, mu_max) = sym_eig_range(&fisher);
    if !(mu_star > 0.0) {
        return Err(Error::Consistency(format!(
            "Hessian at the optimum is not positive definite ({mu_star:e})"
        )));
    }

    let probe_cfg = EstimatorConfig {
        quad_order: opts.probe_quad_order.min(cfg.quad_order),
        ..cfg.clone()
    };
    let rng = CounterRng::new(opts.seed);
    let lh: Vec<f64> = (0..opts.lipschitz_pairs)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut r = rng.stream(i as u64);
            let a: Vec<f64> = uniform_in_ball(&mut r, n, opts.r0)
                .iter()
                .zip(&ts)
                .map(|(x, t)| x + t)
                .collect();
            let b: Vec<f64> = uniform_in_ball(&mut r, n, opts.r0)
                .iter()
                .zip(&ts)
                .map(|(x, t)| x + t)
                .collect();
            let ha = rkl_hessian_theta(spec, &a, &probe_cfg)?;
            let hb = rkl_hessian_theta(spec, &b, &probe_cfg)?;
            let dist = norm(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>());
            Ok(crate::special::sym_spectral_norm(&(ha - hb)) / dist)
        })
        .collect::<Result<Vec<f64>>>()?;
    let l_h_est = lh.iter().cloned().fold(0.0, f64::max);
    let rho = opts.r0.min(mu_star / (2.0 * l_h_est));
    let eps_loc = mu_star * rho * rho / 8.0;

    let probe_rng = CounterRng::new(crate::rng::derive_seed(opts.seed, "pl-probes"));
    let probes: Vec<(f64, f64)> = (0..opts.probes)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let mut r = probe_rng.stream(i as u64);
            let off = uniform_in_ball(&mut r, n, rho);
            let th: Vec<f64> = off.iter().zip(&ts).map(|(x, t)| x + t).collect();
            let l = rkl_loss_theta(spec, &th, cfg)?;
            let g = rkl_grad_theta(spec, &th, cfg)?;
            let ratio = g.norm_squared() / (mu_star * l).max(1e-300);
            let growth = l - 0.25 * mu_star * norm(&off).powi(2);
            Ok((ratio, growth))
        })
        .collect::<Result<Vec<_>>>()?;
    let min_pl_ratio = probes.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let min_growth_slack = probes.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    Ok(PLCertificate {
        hessian: fisher,
        fd_hessian: fd_h,
        hessian_rel_diff: rel,
        mu_star,
        mu_max,
        l_h_est,
        r0: opts.r0,
        rho,
        eps_loc,
        min_pl_ratio,
        min_growth_slack,
        rate_ok: min_pl_ratio >= 1.0 && min_growth_slack >= -1e-6,
    })
}

/// Worst envelope excess of one near-optimum flow.
#[derive(Clone, Debug)]
pub struct EnvelopeRun {
    pub loss0: f64,
    pub dist0: f64,
    /// `max_t [log L(t) − log L(0) + μ⋆ t]`; the envelope allows `log 1.05`.
    pub max_log_excess: f64,
    /// `max_t ‖θ(t) − θ⋆‖ / ((2/√μ⋆) √L(0) e^{−μ⋆ t/2})`; allowed up to 1.05.
    pub max_param_ratio: f64,
    /// Largest distance from `θ⋆` along the run.
    pub max_dist: f64,
    pub records: usize,
}

#[derive(Clone, Debug)]
pub struct EnvelopeReport {
    pub runs: Vec<EnvelopeRun>,
    pub loss_ok: bool,
    pub param_ok: bool,
    pub stayed_in_ball: bool,
}

/// Run `n_runs` flows from random starts in the certified region and
/// compare them with the exponential loss and parameter envelopes.
pub fn check_rate_envelopes(
    spec: &TargetSpec,
    cert: &PLCertificate,
    n_runs: usize,
    seed: u64,
    cfg: &EstimatorConfig,
) -> Result<EnvelopeReport> {
    let ts = theta_star(spec);
    let n = ts.len();
    let mu = cert.mu_star;
    let rng = CounterRng::new(seed);
    let t_max = (4.0 / mu).min(400.0);
    let runs = (0..n_runs)
        .into_par_iter()
        .map(|i| -> Result<EnvelopeRun> {
            let mut r = rng.stream(i as u64);
            let mut off = uniform_in_ball(&mut r, n, cert.rho);
            let mut th: Vec<f64> = off.iter().zip(&ts).map(|(x, t)| x + t).collect();
            let mut l0 = rkl_loss_theta(spec, &th, cfg)?;
            while l0 > cert.eps_loc {
                off.iter_mut().for_each(|x| *x *= 0.7);
                th = off.iter().zip(&ts).map(|(x, t)| x + t).collect();
                l0 = rkl_loss_theta(spec, &th, cfg)?;
            }
            let init = learner_at(spec, &th);
            let mut opts = FlowOptions::new(0.05, t_max);
            opts.record_all = true;
            opts.stop_loss = Some((1e-9 * l0).max(1e-13));
            let traj = integrate_flow_with(FlowObjective::ReverseKl, &init, spec, &opts, cfg)?;
            let mut max_log_excess = f64::NEG_INFINITY;
            let mut max_param_ratio: f64 = 0.0;
            let mut max_dist: f64 = 0.0;
            for ((t, l), s) in traj.times.iter().zip(&traj.losses).zip(&traj.states) {
                let theta: Vec<f64> = std::iter::once(s.logit).chain(s.m_new.iter().cloned()).collect();
                let dist = norm(&theta.iter().zip(&ts).map(|(a, b)| a - b).collect::<Vec<_>>());
                max_dist = max_dist.max(dist);
                if *t > 0.0 {
                    max_log_excess = max_log_excess.max(l.max(1e-300).ln() - l0.ln() + mu * t);
                }
                let env = 2.0 / mu.sqrt() * l0.sqrt() * (-0.5 * mu * t).exp();
                max_param_ratio = max_param_ratio.max(dist / env);
            }
            Ok(EnvelopeRun {
                loss0: l0,
                dist0: norm(&off),
                max_log_excess,
                max_param_ratio,
                max_dist,
                records: traj.times.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let loss_ok = runs.iter().all(|r| r.max_log_excess <= 1.05f64.ln());
    let param_ok = runs.iter().all(|r| r.max_param_ratio <= 1.05);
    let stayed_in_ball = runs.iter().all(|r| r.max_dist <= cert.rho * (1.0 + 1e-9));
    Ok(EnvelopeReport {
        runs,
        loss_ok,
        param_ok,
        stayed_in_ball,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sft_flow_decreases_beta() {
        let spec = TargetSpec::canonical(0.5, 4.0, 1).unwrap();
        let init = spec.learner(0.5, spec.mu_new.clone()).unwrap();
        let traj = integrate_flow(
            FlowObjective::SftLogit,
            &init,
            &spec,
            0.02,
            5.0,
            &EstimatorConfig::default(),
        )
        .unwrap();
        let b = traj.betas();
        assert!(b.windows(2).all(|w| w[1] < w[0]));
        assert!(traj.max_loss_increase() <= 0.0);
        assert_eq!(traj.times.len(), 51);
        assert!((traj.final_time() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn optimum_is_stationary() {
        let spec = TargetSpec::canonical(0.4, 3.0, 2).unwrap();
        let traj = integrate_flow(
            FlowObjective::ReverseKl,
            &spec.optimum(),
            &spec,
            0.1,
            2.0,
            &EstimatorConfig::default(),
        )
        .unwrap();
        assert!(traj.losses.iter().all(|l| l.abs() < 1e-10));
    }

    #[test]
    fn fisher_matches_difference_hessian() {
        let spec = TargetSpec::new(
            0.4,
            DVector::from_column_slice(&[0.0, 0.5]),
            DVector::from_column_slice(&[2.0, -0.5]),
            crate::mixture::CovarianceModel::diagonal(&[1.0, 1.5]).unwrap(),
        )
        .unwrap();
        let cfg = EstimatorConfig::default();
        let f = fisher_at_optimum(&spec, &cfg);
        let h = rkl_hessian_theta(&spec, &theta_star(&spec), &cfg).unwrap();
        assert!(max_rel(&f, &h) < 1e-6, "{f} {h}");
    }

    #[test]
    fn bad_step_is_rejected() {
        let spec = TargetSpec::canonical(0.5, 2.0, 1).unwrap();
        let init = spec.optimum();
        let r = integrate_flow(
            FlowObjective::SftLogit,
            &init,
            &spec,
            0.6,
            1.0,
            &EstimatorConfig::default(),
        );
        assert!(matches!(r, Err(Error::Input { .. })));
    }
}
