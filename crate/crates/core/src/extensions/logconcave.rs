//! One-dimensional strongly log-concave location families `ρ_μ(y) ∝ e^{−V(y − μ)}`.
//!
//! All integrals are composite Gauss-Legendre sums over a window wide enough
//! that the truncated mass is below double precision.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::estimators::quadrature::gauss_legendre;
use crate::special::{logaddexp, logsumexp};

type Scalar = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

const PANEL_NODES: usize = 24;
const BETA_GRID: usize = 101;

/// Potential `V` with its first two derivatives and curvature bounds.
#[derive(Clone)]
pub struct LocationFamily1D {
    pub name: String,
    pub v: Scalar,
    pub v1: Scalar,
    pub v2: Scalar,
    pub m_strong: f64,
    pub l_smooth: f64,
    /// `log ∫ e^{−V}`.
    pub log_z: f64,
}

impl fmt::Debug for LocationFamily1D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocationFamily1D")
            .field("name", &self.name)
            .field("m_strong", &self.m_strong)
            .field("l_smooth", &self.l_smooth)
            .field("log_z", &self.log_z)
            .finish()
    }
}

fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Composite Gauss-Legendre rule on `[lo, hi]` with unit-width panels.
struct Line {
    x: Vec<f64>,
    w: Vec<f64>,
}

impl Line {
    fn new(lo: f64, hi: f64, panel: f64) -> Self {
        let (gx, gw) = gauss_legendre(PANEL_NODES);
        let n = ((hi - lo) / panel).ceil().max(1.0) as usize;
        let h = (hi - lo) / n as f64;
        let mut x = Vec::with_capacity(n * PANEL_NODES);
        let mut w = Vec::with_capacity(n * PANEL_NODES);
        for p in 0..n {
            let a = lo + p as f64 * h;
            for (xi, wi) in gx.iter().zip(&gw) {
                x.push(a + 0.5 * h * (xi + 1.0));
                w.push(0.5 * h * wi);
            }
        }
        Line { x, w }
    }

    fn sum<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.x.iter().zip(&self.w).map(|(x, w)| w * f(*x)).sum()
    }

    fn log_sum<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        let t: Vec<f64> = self.x.iter().zip(&self.w).map(|(x, w)| w.ln() + f(*x)).collect();
        logsumexp(&t)
    }
}

impl LocationFamily1D {
    pub fn new(
        name: impl Into<String>,
        v: Scalar,
        v1: Scalar,
        v2: Scalar,
        m_strong: f64,
        l_smooth: f64,
    ) -> Result<Self> {
        if !(m_strong > 0.0 && l_smooth >= m_strong && l_smooth.is_finite()) {
            return Err(Error::input(
                "family",
                format!("need 0 < m_strong = {m_strong} <= l_smooth = {l_smooth}"),
            ));
        }
        let mut fam = LocationFamily1D {
            name: name.into(),
            v,
            v1,
            v2,
            m_strong,
            l_smooth,
            log_z: 0.0,
        };
        let line = fam.line(0.0, 0.0, 1.0);
        fam.log_z = line.log_sum(|x| -(fam.v)(x));
        Ok(fam)
    }

    /// `V(x) = x²/2`.
    pub fn gaussian() -> Self {
        Self::new(
            "gaussian",
            Arc::new(|x| 0.5 * x * x),
            Arc::new(|x| x),
            Arc::new(|_| 1.0),
            1.0,
            1.0,
        )
        .expect("valid constants")
    }

    /// `V(x) = x²/2 + a log cosh x`, with `m = 1` and `L = 1 + a`.
    pub fn log_cosh(a: f64) -> Result<Self> {
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::input("family.a", format!("{a} is not in (0, 1]")));
        }
        Self::new(
            format!("log_cosh({a})"),
            Arc::new(move |x| 0.5 * x * x + a * log_cosh(x)),
            Arc::new(move |x| x + a * x.tanh()),
            Arc::new(move |x| {
                let s = 1.0 / x.cosh();
                1.0 + a * s * s
            }),
            1.0,
            1.0 + a,
        )
    }

    /// Integration window covering shifts `lo..hi` with negligible tails.
    fn line(&self, lo: f64, hi: f64, panel_scale: f64) -> Line {
        let half = 14.0 / self.m_strong.sqrt();
        Line::new(lo - half, hi + half, 0.5 * panel_scale / self.m_strong.sqrt().max(1.0))
    }

    /// `log ρ_μ(y)`.
    pub fn log_density(&self, y: f64, mu: f64) -> f64 {
        -(self.v)(y - mu) - self.log_z
    }

    /// `u(y; μ) = −V′(y − μ)`.
    pub fn score(&self, y: f64, mu: f64) -> f64 {
        -(self.v1)(y - mu)
    }

    /// Minimum and maximum of `V″` on a wide grid, and `∫ρ` on a finer rule.
    pub fn validate(&self) -> Result<()> {
        let half = 14.0 / self.m_strong.sqrt();
        for i in 0..=4000 {
            let x = -half + 2.0 * half * i as f64 / 4000.0;
            let c = (self.v2)(x);
            if !(c >= self.m_strong - 1e-9 && c <= self.l_smooth + 1e-9) {
                return Err(Error::input("family", format!("V''({x}) = {c} outside [m, L]")));
            }
        }
        let fine = self.line(0.0, 0.0, 0.5);
        let mass = fine.sum(|x| self.log_density(x, 0.0).exp());
        if (mass - 1.0).abs() > 1e-8 {
            return Err(Error::Numeric(format!("density integrates to {mass}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogconcaveReport {
    pub bc: f64,
    pub bc_bound: f64,
    /// `|E[V′(X)²] − E[V″(X)]|` under `ρ`.
    pub fisher_residual: f64,
    pub sft_losses: Vec<f64>,
    pub sft_monotone: bool,
    /// Central difference of `KL(q ‖ p_α)` in the old learner location.
    pub drift_grad: f64,
    /// `β E_{ρ_{μ_o}}[∂_y log(q/p_α)]`, the integration-by-parts form.
    pub drift_grad_ibp: f64,
    pub eps_q: f64,
    pub eps_p: f64,
    /// `β L (ε_q |m_n − μ_o| + ε_p |μ_n − μ_o|)`.
    pub drift_bound: f64,
}

/// Reject anything but one dimension.
pub fn check_scope(dim: usize) -> Result<()> {
    if dim != 1 {
        return Err(Error::Method(format!(
            "log-concave checks are one-dimensional, got d = {dim}"
        )));
    }
    Ok(())
}

fn log_mix(fam: &LocationFamily1D, y: f64, w: f64, a: f64, b: f64) -> f64 {
    let la = if w > 0.0 {
        w.ln() + fam.log_density(y, a)
    } else {
        f64::NEG_INFINITY
    };
    let lb = if w < 1.0 {
        (-w).ln_1p() + fam.log_density(y, b)
    } else {
        f64::NEG_INFINITY
    };
    logaddexp(la, lb)
}

/// `KL(ρ_{μ_n} ‖ β ρ_{μ_o} + (1 − β) ρ_{μ_n})`.
pub fn sft_loss(fam: &LocationFamily1D, mu_o: f64, mu_n: f64, beta: f64) -> f64 {
    let line = fam.line(mu_o.min(mu_n), mu_o.max(mu_n), 1.0);
    line.sum(|y| {
        let lp = fam.log_density(y, mu_n);
        lp.exp() * (lp - log_mix(fam, y, beta, mu_o, mu_n))
    })
}

/// `KL(β ρ_{m_o} + (1 − β) ρ_{m_n} ‖ α ρ_{μ_o} + (1 − α) ρ_{μ_n})`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_kl(fam: &LocationFamily1D, m_o: f64, m_n: f64, beta: f64, mu_o: f64, mu_n: f64, alpha: f64) -> f64 {
    let lo = m_o.min(m_n).min(mu_o).min(mu_n);
    let hi = m_o.max(m_n).max(mu_o).max(mu_n);
    let line = fam.line(lo, hi, 1.0);
    line.sum(|y| {
        let lq = log_mix(fam, y, beta, m_o, m_n);
        lq.exp() * (lq - log_mix(fam, y, alpha, mu_o, mu_n))
    })
}

#[allow(clippy::too_many_arguments)]
pub fn logconcave_checks(
    fam: &LocationFamily1D,
    mu1: f64,
    mu2: f64,
    alpha: f64,
    beta: f64,
    m_new: f64,
    fd_step: f64,
) -> Result<LogconcaveReport> {
    for (name, p) in [("alpha", alpha), ("beta", beta)] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::input(name, format!("{p} is not in (0, 1)")));
        }
    }
    if ![mu1, mu2, m_new].iter().all(|x| x.is_finite()) {
        return Err(Error::input("mu_old", "locations must be finite"));
    }
    let lo = mu1.min(mu2).min(m_new);
    let hi = mu1.max(mu2).max(m_new);
    let line = fam.line(lo, hi, 1.0);

    let bc = line.sum(|y| (0.5 * (fam.log_density(y, mu1) + fam.log_density(y, mu2))).exp());
    let gap = mu1 - mu2;
    let bc_bound = (-fam.m_strong * gap * gap / 8.0).exp();

    let base = fam.line(0.0, 0.0, 1.0);
    let e_sq = base.sum(|x| fam.log_density(x, 0.0).exp() * (fam.v1)(x).powi(2));
    let e_curv = base.sum(|x| fam.log_density(x, 0.0).exp() * (fam.v2)(x));
    let fisher_residual = (e_sq - e_curv).abs();

    let sft_losses: Vec<f64> = (0..BETA_GRID)
        .map(|i| {
            let b = i as f64 / (BETA_GRID - 1) as f64;
            sft_loss(fam, mu1, mu2, b)
        })
        .collect();
    let sft_monotone = sft_losses.windows(2).all(|w| w[1] > w[0]);

    // Old mode at μ_o = mu1, new target mode at μ_n = mu2.
    let (mu_o, mu_n) = (mu1, mu2);
    let f = |m_o: f64| reverse_kl(fam, m_o, m_new, beta, mu_o, mu_n, alpha);
    let drift_grad = (f(mu_o + fd_step) - f(mu_o - fd_step)) / (2.0 * fd_step);

    let mut eps = [0.0; 2];
    let mut ibp = 0.0;
    for (y, w) in line.x.iter().zip(&line.w) {
        let lo_d = fam.log_density(*y, mu_o);
        let rho = lo_d.exp();
        if rho == 0.0 {
            continue;
        }
        let lq = log_mix(fam, *y, beta, mu_o, m_new);
        let lp = log_mix(fam, *y, alpha, mu_o, mu_n);
        let r_o = (beta.ln() + lo_d - lq).exp();
        let s_o = (alpha.ln() + lo_d - lp).exp();
        let (u_o, u_q, u_p) = (fam.score(*y, mu_o), fam.score(*y, m_new), fam.score(*y, mu_n));
        let dq = r_o * u_o + (1.0 - r_o) * u_q;
        let dp = s_o * u_o + (1.0 - s_o) * u_p;
        ibp += w * rho * (dq - dp);
        eps[0] += w * rho * (1.0 - r_o);
        eps[1] += w * rho * (1.0 - s_o);
    }
    let drift_grad_ibp = beta * ibp;
    let drift_bound = beta * fam.l_smooth * (eps[0] * (m_new - mu_o).abs() + eps[1] * (mu_n - mu_o).abs());
    Ok(LogconcaveReport {
        bc,
        bc_bound,
        fisher_residual,
        sft_losses,
        sft_monotone,
        drift_grad,
        drift_grad_ibp,
        eps_q: eps[0],
        eps_p: eps[1],
        drift_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_are_valid() {
        LocationFamily1D::gaussian().validate().unwrap();
        for a in [0.25, 0.5, 1.0] {
            LocationFamily1D::log_cosh(a).unwrap().validate().unwrap();
        }
        assert!(LocationFamily1D::log_cosh(0.0).is_err());
        let g = LocationFamily1D::gaussian();
        assert!((g.log_z - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-13);
    }

    #[test]
    fn gaussian_overlap_is_tight() {
        let g = LocationFamily1D::gaussian();
        let r = logconcave_checks(&g, 0.0, 3.0, 0.4, 0.3, 2.5, 1e-4).unwrap();
        assert!((r.bc - r.bc_bound).abs() < 1e-12);
        assert!(r.fisher_residual < 1e-12);
        let same = logconcave_checks(&g, 1.0, 1.0, 0.4, 0.3, 2.5, 1e-4).unwrap();
        assert!((same.bc - 1.0).abs() < 1e-12 && same.bc_bound == 1.0);
    }

    #[test]
    fn gaussian_sft_matches_closed_form_endpoint() {
        let g = LocationFamily1D::gaussian();
        let l = sft_loss(&g, 0.0, 2.0, 1.0);
        assert!((l - 2.0).abs() < 1e-12);
        assert!(sft_loss(&g, 0.0, 2.0, 0.0).abs() < 1e-14);
    }

    #[test]
    fn log_cosh_checks_pass() {
        let fam = LocationFamily1D::log_cosh(0.5).unwrap();
        for sep in [2.0, 4.0, 6.0] {
            let r = logconcave_checks(&fam, 0.0, sep, 0.5, 0.4, sep - 0.5, 1e-4).unwrap();
            assert!(r.bc <= r.bc_bound + 1e-8);
            assert!(r.fisher_residual <= 1e-6);
            assert!(r.sft_monotone, "sep {sep}");
            assert!(r.drift_grad.abs() <= r.drift_bound + 1e-6);
            assert!(
                (r.drift_grad - r.drift_grad_ibp).abs() < 1e-7,
                "{} vs {}",
                r.drift_grad,
                r.drift_grad_ibp
            );
        }
    }

    #[test]
    fn scope_is_one_dimensional() {
        assert!(check_scope(1).is_ok());
        assert_eq!(check_scope(2).unwrap_err().exit_code(), 2);
    }
}
