//! K-mode mixtures: SFT on a subset of modes and drift of matched modes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::{mc_mean, EstimatorConfig, Method, ReducedSpace};
use crate::mixture::{bhattacharyya_equal_cov, MixtureDensity};
use crate::rng::derive_seed;
use crate::special::logsumexp;

pub const MAX_MODES: usize = 8;
/// Projected-gradient stopping tolerance on `‖P(β − g) − β‖_∞`.
pub const SIMPLEX_TOL: f64 = 1e-10;
const MAX_ITERS: usize = 20_000;
/// Largest reduced rank integrated by tensor quadrature.
const MAX_QUAD_RANK: usize = 3;

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut tau = 0.0;
    for (i, x) in u.iter().enumerate() {
        css += x;
        let t = (css - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

/// Nodes for the equal-weight mixture `ν` of all `K` components.
///
/// `E_{p_T}[h] = E_ν[(p_T/ν) h]` with `p_T/ν ≤ K`, so both the objective
/// `−E_{p_T}[log q_β]` and its gradient `−E_{p_T}[f_j/q_β]` have bounded
/// integrands and the gradient is the exact derivative of the discrete
/// objective.
struct PointSet {
    /// `ν` weight times `p_T/ν` at each node.
    weights: Vec<f64>,
    /// Row-major `n × K` log component densities.
    log_f: Vec<f64>,
    k: usize,
}

impl PointSet {
    fn new(alpha_t: &[f64], nu_weights: Vec<f64>, log_f: Vec<f64>) -> Self {
        let k = alpha_t.len();
        let la: Vec<f64> = alpha_t
            .iter()
            .map(|a| if *a > 0.0 { a.ln() } else { f64::NEG_INFINITY })
            .collect();
        let ln_k = (k as f64).ln();
        let mut t = vec![0.0; k];
        let weights = log_f
            .chunks(k)
            .zip(&nu_weights)
            .map(|(row, w)| {
                for j in 0..k {
                    t[j] = la[j] + row[j];
                }
                let lp = logsumexp(&t);
                let lnu = logsumexp(row) - ln_k;
                w * (lp - lnu).exp()
            })
            .collect();
        PointSet { weights, log_f, k }
    }

    /// `−E_{p_T}[log q_β]` (up to a constant), its gradient and the
    /// Hessian diagonal `E_{p_T}[f_j²/q_β²]`.
    fn objective(&self, beta: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let lb: Vec<f64> = beta
            .iter()
            .map(|b| if *b > 0.0 { b.ln() } else { f64::NEG_INFINITY })
            .collect();
        let mut val = 0.0;
        let mut g = vec![0.0; self.k];
        let mut h = vec![0.0; self.k];
        let mut t = vec![0.0; self.k];
        for (row, w) in self.log_f.chunks(self.k).zip(&self.weights) {
            for j in 0..self.k {
                t[j] = lb[j] + row[j];
            }
            let lq = logsumexp(&t);
            val -= w * lq;
            for j in 0..self.k {
                let r = (row[j] - lq).exp();
                g[j] -= w * r;
                h[j] += w * r * r;
            }
        }
        (val, g, h)
    }
}

fn subset_weights(target: &MixtureDensity, subset: &[usize]) -> Vec<f64> {
    let s: f64 = subset.iter().map(|&k| target.weights()[k]).sum();
    let mut w = vec![0.0; target.n_components()];
    for &k in subset {
        w[k] = target.weights()[k] / s;
    }
    w
}

fn point_set(target: &MixtureDensity, alpha_t: &[f64], cfg: &EstimatorConfig) -> Result<(PointSet, Method)> {
    let k = target.n_components();
    let pts: Vec<&DVector<f64>> = target.means().iter().collect();
    let space = ReducedSpace::new(target.cov(), &pts);
    let mut weights = Vec::new();
    let mut log_f = Vec::new();
    if cfg.method == Method::ProjectedQuadrature && space.rank() <= MAX_QUAD_RANK {
        let red = space.reduce(target);
        let r = space.rank();
        let quad = cfg.quadrature();
        for a in &red.means {
            let (x, w) = quad.gaussian_nodes(a, None);
            weights.extend(w.iter().map(|wi| wi / k as f64));
            log_f.extend(x.chunks(r).flat_map(|u| (0..k).map(|j| red.component_log(j, u))));
        }
        return Ok((PointSet::new(alpha_t, weights, log_f), Method::ProjectedQuadrature));
    }
    let nu = MixtureDensity::new(vec![1.0 / k as f64; k], target.means().to_vec(), target.cov().clone())?;
    let (ys, _) = nu.sample(cfg.mc_samples, derive_seed(cfg.seed, "kmode-simplex"));
    let n = ys.len();
    for y in &ys {
        weights.push(1.0 / n as f64);
        log_f.extend(target.means().iter().map(|mu| target.cov().log_normal(y, mu)));
    }
    Ok((PointSet::new(alpha_t, weights, log_f), Method::MonteCarlo))
}

fn pg_residual(beta: &[f64], g: &[f64]) -> f64 {
    let step: Vec<f64> = beta.iter().zip(g).map(|(b, gj)| b - gj).collect();
    project_simplex(&step)
        .iter()
        .zip(beta)
        .map(|(p, b)| (p - b).abs())
        .fold(0.0, f64::max)
}

/// Projection onto the simplex in the metric `Σ_j d_j (x_j − z_j)²`:
/// `x_j = max(0, z_j − τ/d_j)` with `τ` found by bisection.
pub fn project_simplex_scaled(z: &[f64], d: &[f64]) -> Vec<f64> {
    let at = |tau: f64| -> f64 { z.iter().zip(d).map(|(zj, dj)| (zj - tau / dj).max(0.0)).sum() };
    let dmax = d.iter().cloned().fold(0.0, f64::max);
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let zmin = z.iter().cloned().fold(f64::INFINITY, f64::min);
    // Σ(z − τ/d)_+ is nonincreasing in τ; bracket the root.
    let mut hi = zmax * dmax + dmax;
    let mut lo = (zmin - 1.0) * dmax;
    while at(lo) < 1.0 {
        lo = 2.0 * lo - 1.0;
    }
    while at(hi) > 1.0 {
        hi = 2.0 * hi + 1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if at(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x: Vec<f64> = z.iter().zip(d).map(|(zj, dj)| (zj - hi / dj).max(0.0)).collect();
    let s: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= s);
    x
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimplexFit {
    pub beta: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub method: Method,
}

/// Minimize `KL(p_T ‖ q_β)` over the simplex with the component means fixed
/// at the target means.
///
/// Projected gradient in the metric of the Hessian diagonal, with Armijo
/// backtracking along the projection arc. Modes outside `T` carry
/// curvature of order `exp(δ²)`, so an unscaled step would stall on them.
/// Convergence is declared on the unscaled residual `‖P(β − g) − β‖_∞`.
pub fn fit_subset_weights(target: &MixtureDensity, subset: &[usize], cfg: &EstimatorConfig) -> Result<SimplexFit> {
    let alpha_t = subset_weights(target, subset);
    let (set, method) = point_set(target, &alpha_t, cfg)?;
    let k = target.n_components();
    let mut beta = vec![1.0 / k as f64; k];
    let (mut f, mut g, mut h) = set.objective(&beta);
    let mut step: f64 = 1.0;
    for it in 0..MAX_ITERS {
        let res = pg_residual(&beta, &g);
        if res <= SIMPLEX_TOL {
            return Ok(SimplexFit {
                beta,
                residual: res,
                iterations: it,
                method,
            });
        }
        let d: Vec<f64> = h.iter().map(|x| x.clamp(1e-6, 1e300)).collect();
        let slack = 1e-15 * (1.0 + f.abs());
        let mut s = (2.0 * step).min(1.0);
        let (x, fx, gx, hx) = loop {
            let z: Vec<f64> = beta
                .iter()
                .zip(&g)
                .zip(&d)
                .map(|((b, gj), dj)| b - s * gj / dj)
                .collect();
            let x = project_simplex_scaled(&z, &d);
            let slope: f64 = x.iter().zip(&beta).zip(&g).map(|((a, b), gj)| (a - b) * gj).sum();
            let (fx, gx, hx) = set.objective(&x);
            if fx <= f + 1e-4 * slope + slack {
                break (x, fx, gx, hx);
            }
            s *= 0.5;
            if s < 1e-16 {
                return Err(Error::Numeric(format!(
                    "simplex line search stalled at residual {res:.3e} after {it} iterations"
                )));
            }
        };
        step = s;
        beta = x;
        f = fx;
        g = gx;
        h = hx;
    }
    Err(Error::Numeric(format!(
        "simplex fit did not converge in {MAX_ITERS} iterations"
    )))
}

/// `β⋆_k = α_k / Σ_{j∈T} α_j` on `T`, zero elsewhere.
pub fn subset_weights_closed_form(target: &MixtureDensity, subset: &[usize]) -> Vec<f64> {
    subset_weights(target, subset)
}

#[derive(Clone, Debug)]
pub struct KmodeReport {
    pub beta_star: Vec<f64>,
    pub beta_closed: Vec<f64>,
    pub beta_max_err: f64,
    pub fit: SimplexFit,
    /// `∇_{m_k} KL(q ‖ p)` from the misassignment decomposition.
    pub old_grad: DVector<f64>,
    /// `β_k ‖Σ⁻¹‖₂ Σ_j (ε̄^q_{k→j} ‖m_j − μ_k‖ + ε̄^p_{k→j} ‖μ_j − μ_k‖)` with the
    /// overlap bounds `ε̄`.
    pub grad_bound: f64,
    /// `(i, j)`: `E_{N(m_i)}[r_j]` under the model.
    pub eps_q: DMatrix<f64>,
    pub eps_q_se: DMatrix<f64>,
    /// `½ √(β_j/β_i) BC(N(m_j), N(m_i))`.
    pub eps_q_bound: DMatrix<f64>,
    /// `(i, j)`: `E_{N(μ_i)}[s_j]` under the target.
    pub eps_p: DMatrix<f64>,
    pub eps_p_se: DMatrix<f64>,
    pub eps_p_bound: DMatrix<f64>,
    pub bounds_ok: bool,
}

/// `E_{N(c_i)}[resp_j]` for every source component `i` of `mix`, by MC.
fn responsibility_matrix(mix: &MixtureDensity, n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = mix.n_components();
    let mut mean = DMatrix::zeros(k, k);
    let mut se = DMatrix::zeros(k, k);
    for i in 0..k {
        let e = mc_mean(n, derive_seed(seed, &format!("row{i}")), k, |r, _, out| {
            let y = mix.draw_component(i, r);
            match mix.responsibilities(&y) {
                Ok(v) => out.copy_from_slice(&v),
                Err(_) => out.iter_mut().for_each(|o| *o = f64::NAN),
            }
        });
        for j in 0..k {
            mean[(i, j)] = e.mean[j];
            se[(i, j)] = e.std_err[j];
        }
    }
    (mean, se)
}

fn overlap_bounds(mix: &MixtureDensity) -> DMatrix<f64> {
    let k = mix.n_components();
    let w = mix.weights();
    DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            return f64::NAN;
        }
        0.5 * (w[j] / w[i]).sqrt() * bhattacharyya_equal_cov(mix.cov(), &mix.means()[j], &mix.means()[i])
    })
}

fn check_modes(target: &MixtureDensity) -> Result<()> {
    let k = target.n_components();
    if !(2..=MAX_MODES).contains(&k) {
        return Err(Error::input(
            "target.means",
            format!("need 2 to {MAX_MODES} modes, got {k}"),
        ));
    }
    if target.weights().iter().any(|w| *w <= 0.0) {
        return Err(Error::input("target.weights", "target weights must be positive"));
    }
    for i in 0..k {
        for j in 0..i {
            if target.means()[i] == target.means()[j] {
                return Err(Error::input(
                    format!("target.means[{i}]"),
                    format!("coincides with mode {j}"),
                ));
            }
        }
    }
    Ok(())
}

/// SFT on a subset `T` of the target modes, and the drift of mode `k` of
/// `model` (which must sit on its target mean).
pub fn kmode_analysis(
    target: &MixtureDensity,
    subset: &[usize],
    k: usize,
    model: &MixtureDensity,
    cfg: &EstimatorConfig,
) -> Result<KmodeReport> {
    check_modes(target)?;
    let kk = target.n_components();
    if subset.is_empty() || subset.iter().any(|&t| t >= kk) {
        return Err(Error::input(
            "subset",
            format!("indices must be a nonempty subset of 0..{kk}"),
        ));
    }
    if k >= kk {
        return Err(Error::input("mode", format!("{k} is not below {kk}")));
    }
    if model.n_components() != kk || model.dim() != target.dim() {
        return Err(Error::input("model", "model must have the target's shape"));
    }
    if model.weights().iter().any(|w| *w <= 0.0) {
        return Err(Error::input("model.weights", "model weights must be positive"));
    }
    let mu_k = &target.means()[k];
    if (&model.means()[k] - mu_k).amax() > 1e-12 * mu_k.amax().max(1.0) {
        return Err(Error::Precondition(format!(
            "model mode {k} must sit on its target mean"
        )));
    }

    let fit = fit_subset_weights(target, subset, cfg)?;
    let beta_closed = subset_weights_closed_form(target, subset);
    let beta_max_err = fit
        .beta
        .iter()
        .zip(&beta_closed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let n = cfg.mc_samples;
    let (eps_q, eps_q_se) = responsibility_matrix(model, n, derive_seed(cfg.seed, "kmode-q"));
    let (eps_p, eps_p_se) = responsibility_matrix(target, n, derive_seed(cfg.seed, "kmode-p"));
    let eps_q_bound = overlap_bounds(model);
    let eps_p_bound = overlap_bounds(target);

    let beta_k = model.weights()[k];
    let mut v = DVector::zeros(target.dim());
    let mut explicit = 0.0;
    for j in (0..kk).filter(|&j| j != k) {
        let dq = &model.means()[j] - mu_k;
        let dp = &target.means()[j] - mu_k;
        v += &dq * eps_q[(k, j)] - &dp * eps_p[(k, j)];
        explicit += eps_q_bound[(k, j)] * dq.norm() + eps_p_bound[(k, j)] * dp.norm();
    }
    let inv = target.cov().inv_op_norm();
    let old_grad = target.cov().solve(&v) * beta_k;
    let grad_bound = beta_k * inv * explicit;

    // Four standard errors of slack for the MC estimates.
    let mut ok = true;
    for i in 0..kk {
        for j in (0..kk).filter(|&j| j != i) {
            ok &= eps_q[(i, j)] - 4.0 * eps_q_se[(i, j)] <= eps_q_bound[(i, j)];
            ok &= eps_p[(i, j)] - 4.0 * eps_p_se[(i, j)] <= eps_p_bound[(i, j)];
        }
    }
    let mut noise = 0.0;
    for j in (0..kk).filter(|&j| j != k) {
        noise += 4.0
            * (eps_q_se[(k, j)] * (&model.means()[j] - mu_k).norm()
                + eps_p_se[(k, j)] * (&target.means()[j] - mu_k).norm());
    }
    ok &= old_grad.norm() <= grad_bound + beta_k * inv * noise;

    Ok(KmodeReport {
        beta_star: fit.beta.clone(),
        beta_closed,
        beta_max_err,
        fit,
        old_grad,
        grad_bound,
        eps_q,
        eps_q_se,
        eps_q_bound,
        eps_p,
        eps_p_se,
        eps_p_bound,
        bounds_ok: ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{divergence, fd, FGenerator};
    use crate::mixture::CovarianceModel;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn three_modes(scale: f64) -> MixtureDensity {
        MixtureDensity::new(
            vec![0.2, 0.3, 0.5],
            vec![v(&[0.0, 0.0]), v(&[scale, 0.0]), v(&[0.3 * scale, 0.9 * scale])],
            CovarianceModel::identity(2),
        )
        .unwrap()
    }

    fn cfg() -> EstimatorConfig {
        EstimatorConfig {
            quad_order: 80,
            mc_samples: 200_000,
            ..Default::default()
        }
    }

    #[test]
    fn projection_lands_on_simplex() {
        let p = project_simplex(&[0.5, 2.0, -1.0, 0.1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(p, vec![0.0, 1.0, 0.0, 0.0]);
        let q = project_simplex(&[0.2, 0.3, 0.5]);
        assert!(q.iter().zip([0.2, 0.3, 0.5]).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn subset_fit_matches_closed_form() {
        let t = three_modes(2.5);
        let fit = fit_subset_weights(&t, &[0, 1], &cfg()).unwrap();
        let want = [0.4, 0.6, 0.0];
        for (a, b) in fit.beta.iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{:?}", fit.beta);
        }
        assert!(fit.residual <= SIMPLEX_TOL);
        let all = fit_subset_weights(&t, &[0, 1, 2], &cfg()).unwrap();
        for (a, b) in all.beta.iter().zip(t.weights()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn decomposition_matches_fd_of_reverse_kl() {
        let t = three_modes(2.0);
        let model = MixtureDensity::new(
            vec![0.3, 0.3, 0.4],
            vec![v(&[0.0, 0.0]), v(&[1.5, 0.4]), v(&[0.9, 2.2])],
            CovarianceModel::identity(2),
        )
        .unwrap();
        let c = EstimatorConfig {
            quad_order: 80,
            mc_samples: 400_000,
            ..Default::default()
        };
        let rep = kmode_analysis(&t, &[0, 1], 0, &model, &c).unwrap();
        let kl = FGenerator::kl();
        let num = fd::gradient(
            |x| {
                let mut means = model.means().to_vec();
                means[0] = v(x);
                let q = MixtureDensity::new(model.weights().to_vec(), means, model.cov().clone()).unwrap();
                divergence(&q, &t, &kl, &c).unwrap()
            },
            &[0.0, 0.0],
            1e-4,
        )
        .unwrap();
        let tol = 5.0 * (rep.eps_q_se.max() + rep.eps_p_se.max()) * 3.0 + 1e-6;
        assert!((&rep.old_grad - &num).amax() < tol, "{} vs {}", rep.old_grad, num);
        assert!(rep.bounds_ok);
    }

    #[test]
    fn separated_modes_barely_drift() {
        let t = three_modes(10.0);
        let model = MixtureDensity::new(
            vec![0.3, 0.3, 0.4],
            vec![v(&[0.0, 0.0]), v(&[9.5, 0.3]), v(&[3.2, 8.6])],
            CovarianceModel::identity(2),
        )
        .unwrap();
        let rep = kmode_analysis(&t, &[0, 1], 0, &model, &cfg()).unwrap();
        assert!(rep.bounds_ok);
        assert!(rep.old_grad.norm() < 1e-4);
        assert!(rep.grad_bound < 1e-2);
    }
}
