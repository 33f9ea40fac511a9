//! One runner per scenario kind. Each returns a CSV table and a JSON
//! summary; nothing here depends on wall-clock time, so identical configs
//! give identical files.
//!
//! CSV columns by kind (`<d>` expands to one column per coordinate):
//!
//! | kind | columns |
//! |------|---------|
//! | flow | `t, beta, m_new_<d>, loss, grad_norm` |
//! | replay | `beta, loss_denominator, loss_numerator` |
//! | sdft | `step, alpha_t, beta_t, nu_t_<d>, m_t_<d>, lag, teacher_anchor_dist, old_grad_norm` |
//! | ttt | `beta, j, kl_anchor, objective` |
//! | oapl | `beta, regression_value` |
//! | fdiv | `generator, beta, loss` |
//! | kmode | `component, target_weight, beta_star, beta_closed` |
//! | logconcave | `beta, sft_loss` |

use nalgebra::DVector;
use serde_json::{json, Value};

use super::config::{resolve, FamilyName, Params, ScenarioConfig};
use super::report::{Cell, Table};
use crate::error::{Error, Result};
use crate::estimators::EstimatorConfig;
use crate::extensions::fdiv::{fdiv_oldmean_grad, fdiv_sft_scan};
use crate::extensions::kmode::kmode_analysis;
use crate::extensions::logconcave::{logconcave_checks, LocationFamily1D};
use crate::flows::{integrate_flow_with, FlowObjective, FlowOptions};
use crate::mixture::MixtureDensity;
use crate::near_on_policy::oapl::oapl_regression_value;
use crate::near_on_policy::sdft::{fit_geometric, sdft_curvature, separation_profile};
use crate::near_on_policy::ttt::grid_argmax;
use crate::near_on_policy::{
    oapl_regression_grad, oapl_sampling_oracle, oapl_target, sdft_run, ttt_analysis, ttt_oldmean_gradient, ModePair,
    OaplConfig, RewardPartition, SdftConfig, SdftState, StepReward, TttConfig,
};
use crate::objectives::{replay_forward_kl, replay_grid_argmin, replay_population_minimizer, ReplayMode, TargetSpec};
use crate::replay::{max_weight, old_sample_statistics, starvation_contrast, ReplayBehavior};
use crate::rng::derive_seed;

/// Result of one non-check scenario.
#[derive(Clone, Debug)]
pub struct ScenarioOutput {
    pub table: Table,
    pub summary: Value,
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.as_slice().to_vec()
}

fn indexed(prefix: &str, d: usize) -> impl Iterator<Item = String> + '_ {
    (0..d).map(move |i| format!("{prefix}_{i}"))
}

fn spec_of(cfg: &ScenarioConfig, alpha: f64) -> Result<TargetSpec> {
    let g = cfg.geometry()?;
    let (o, n) = g.pair()?;
    TargetSpec::new(alpha, o, n, g.cov.clone())
}

pub fn run(cfg: &ScenarioConfig) -> Result<ScenarioOutput> {
    let est = &cfg.estimator;
    match &cfg.params {
        Params::Flow(p) => flow(cfg, p, est),
        Params::Replay(p) => replay(cfg, p, est),
        Params::Sdft(p) => sdft(cfg, p, est),
        Params::Ttt(p) => ttt(cfg, p, est),
        Params::Oapl(p) => oapl(cfg, p, est),
        Params::Fdiv(p) => fdiv(cfg, p, est),
        Params::Kmode(p) => kmode(cfg, p, est),
        Params::Logconcave(p) => logconcave(cfg, p),
        Params::Check(_) => Err(Error::Precondition("check scenarios are run by the check suite".into())),
    }
}

fn flow(cfg: &ScenarioConfig, p: &super::config::FlowParams, est: &EstimatorConfig) -> Result<ScenarioOutput> {
    let spec = spec_of(cfg, p.alpha)?;
    let d = spec.dim();
    if p.objective == FlowObjective::SftLogit && p.m_new.is_some() {
        return Err(Error::input(
            "params.m_new",
            "the sft_logit flow keeps both means at their true values",
        ));
    }
    let m_new = resolve("params.m_new", &p.m_new, d, &spec.mu_new)?;
    let init = spec.learner(p.beta, m_new)?;
    let mut opts = FlowOptions::new(p.dt, p.t_max);
    opts.stop_beta = p.stop_beta;
    let traj = integrate_flow_with(p.objective, &init, &spec, &opts, est)?;
    let mut table = Table::new(
        ["t".to_string(), "beta".to_string()]
            .into_iter()
            .chain(indexed("m_new", d))
            .chain(["loss".to_string(), "grad_norm".to_string()]),
    );
    for (((t, s), l), g) in traj
        .times
        .iter()
        .zip(&traj.states)
        .zip(&traj.losses)
        .zip(&traj.grad_norms)
    {
        let mut row: Vec<Cell> = vec![(*t).into(), s.beta().into()];
        row.extend(s.m_new.iter().map(|x| Cell::Num(*x)));
        row.push((*l).into());
        row.push((*g).into());
        table.push(row);
    }
    let betas = traj.betas();
    let last = traj.final_state();
    let summary = json!({
        "objective": p.objective,
        "records": traj.times.len(),
        "final_time": traj.final_time(),
        "final_beta": last.beta(),
        "final_m_new": vec_of(&last.m_new),
        "final_loss": traj.losses.last(),
        "beta_strictly_decreasing": betas.windows(2).all(|w| w[1] < w[0]),
        "max_loss_increase": traj.max_loss_increase(),
        "collapsed": traj.collapsed,
        "halvings": traj.halvings,
        "uphill_steps": traj.uphill_steps,
    });
    Ok(ScenarioOutput { table, summary })
}

fn replay(cfg: &ScenarioConfig, p: &super::config::ReplayParams, est: &EstimatorConfig) -> Result<ScenarioOutput> {
    let spec = spec_of(cfg, p.alpha)?;
    let mut table = Table::new(["beta", "loss_denominator", "loss_numerator"]);
    for i in 0..=100 {
        let b = i as f64 / 100.0;
        table.push(vec![
            b.into(),
            replay_forward_kl(b, p.lambda, ReplayMode::Denominator, &spec, est).into(),
            replay_forward_kl(b, p.lambda, ReplayMode::Numerator, &spec, est).into(),
        ]);
    }
    let mode = |m: ReplayMode| -> Result<Value> {
        let (b, deployed) = replay_population_minimizer(p.lambda, m)?;
        Ok(json!({
            "population_minimizer": b,
            "deployed_old_mass": deployed,
            "grid_argmin": replay_grid_argmin(p.lambda, m, &spec, est),
        }))
    };
    let m_new = resolve("params.m_new", &p.m_new, spec.dim(), &spec.mu_new)?;
    let rb = ReplayBehavior::new(p.lambda, spec.learner(p.beta, m_new)?, &spec.mu_old, &spec.cov)?;
    let seed = est.seed;
    let w = max_weight(&rb, p.weight_probes, derive_seed(seed, "weights"))?;
    let st = old_sample_statistics(p.lambda, p.beta, p.batch_size, p.trials, derive_seed(seed, "batches"))?;
    let sc = starvation_contrast(
        p.lambda,
        p.beta,
        p.batch_size,
        p.trials,
        derive_seed(seed, "starvation"),
    )?;
    let summary = json!({
        "forward_kl": {
            "denominator": mode(ReplayMode::Denominator)?,
            "numerator": mode(ReplayMode::Numerator)?,
        },
        "reverse_kl_sampling": {
            "behavior_old_weight": rb.beta_tilde,
            "max_weight": w,
            "weight_bound": rb.weight_bound(),
            "p_none_exact": st.p_none_exact,
            "p_none_empirical": st.p_none_emp,
            "p_none_std_err": st.p_none_se,
            "chernoff_bound": st.chernoff,
            "tail_empirical": st.tail_emp,
            "no_old_without_replay": sc.without_replay,
            "no_old_with_replay": sc.with_replay,
            "replay_ceiling": sc.replay_ceiling,
        },
    });
    Ok(ScenarioOutput { table, summary })
}

fn sdft(cfg: &ScenarioConfig, p: &super::config::SdftParams, est: &EstimatorConfig) -> Result<ScenarioOutput> {
    let g = cfg.geometry()?;
    let (mu_o, mu_n) = g.pair()?;
    let d = g.dim;
    let nu_c = resolve("params.nu_c", &p.nu_c, d, &mu_n)?;
    let mut sc = SdftConfig {
        alpha_c: p.alpha_c,
        nu_c: nu_c.clone(),
        step_gamma: 1.0,
        ema_zeta: p.ema_zeta,
        demo_lambda: p.demo_lambda,
        mu_old: mu_o,
        cov: g.cov.clone(),
    };
    let init_alpha = p.init_alpha.unwrap_or(p.alpha_c);
    let init_nu = resolve("params.init_nu", &p.init_nu, d, &nu_c)?;
    let init_m = resolve("params.init_m", &p.init_m, d, &init_nu)?;
    let init = SdftState::new(init_alpha, init_nu, p.init_beta.unwrap_or(init_alpha), init_m)?;
    sc.step_gamma = match p.step_gamma {
        Some(s) => s,
        None => 0.5 / sdft_curvature(std::slice::from_ref(&init), &sc, 1, est)?.m_est,
    };
    let run = sdft_run(&init, &sc, p.steps, None, est)?;
    let probe = sdft_curvature(&run.states, &sc, (p.steps / 30).max(1), est)?;
    let mut table = Table::new(
        ["step", "alpha_t", "beta_t"]
            .into_iter()
            .map(String::from)
            .chain(indexed("nu_t", d))
            .chain(indexed("m_t", d))
            .chain(
                ["lag", "teacher_anchor_dist", "old_grad_norm"]
                    .into_iter()
                    .map(String::from),
            ),
    );
    for (t, s) in run.states.iter().enumerate() {
        let mut row: Vec<Cell> = vec![(t as f64).into(), s.alpha_t.into(), s.beta_t.into()];
        row.extend(s.nu_t.iter().chain(s.m_t.iter()).map(|x| Cell::Num(*x)));
        row.push(run.lags[t].into());
        row.push(run.teacher_anchor_dists[t].into());
        row.push(run.old_grad_norms[t].into());
        table.push(row);
    }
    let fit = fit_geometric(&run.old_grad_norms, 1e-14);
    let sep = separation_profile(&run, &sc);
    let summary = json!({
        "step_gamma": sc.step_gamma,
        "probed_mu": probe.mu_est,
        "probed_m": probe.m_est,
        "contraction_allowance": 1.0 - sc.step_gamma * probe.mu_est / 2.0,
        "max_contraction_ratio": run.contraction_ratios.iter().cloned().fold(f64::NAN, f64::max),
        "limit_error": run.limit_error,
        "anchor_error": run.anchor_error,
        "old_grad_sum": run.old_grad_sum,
        "old_grad_fit": fit.map(|f| json!({"c": f.c, "kappa": f.kappa, "dominated": f.dominated, "sum_bound": f.sum_bound})),
        "separation": {
            "delta_min": sep.delta_min,
            "tube": sep.tube,
            "delta_eff": sep.delta_eff,
            "ratio_max": sep.ratio_max,
            "max_old_grad": sep.max_old_grad,
        },
        "clamp_events": run.clamp_events,
    });
    Ok(ScenarioOutput { table, summary })
}

fn pair(cfg: &ScenarioConfig) -> Result<ModePair> {
    let g = cfg.geometry()?;
    let (o, n) = g.pair()?;
    ModePair::new(o, n, g.cov.clone())
}

fn ttt(cfg: &ScenarioConfig, p: &super::config::TttParams, est: &EstimatorConfig) -> Result<ScenarioOutput> {
    let geometry = pair(cfg)?;
    let mu_n = geometry.mu_new.clone();
    let tc = TttConfig {
        eta: p.eta,
        lambda_ref: p.lambda_ref,
        beta0: p.beta0,
        reward: StepReward {
            u_old: p.u_old,
            u_new: p.u_new,
            partition: p.partition,
        },
        geometry,
    };
    let a = ttt_analysis(&tc, est)?;
    let mut table = Table::new(["beta", "j", "kl_anchor", "objective"]);
    for i in 0..=200 {
        let b = i as f64 / 200.0;
        table.push(vec![
            b.into(),
            a.model.j(b).into(),
            a.model.d(b).into(),
            a.model.objective(b).into(),
        ]);
    }
    let (arg, curv) = grid_argmax(&a.model, 2001);
    let drift = if p.partition == RewardPartition::BayesHalfspace {
        let m_new = resolve("params.m_new", &p.m_new, mu_n.len(), &mu_n)?;
        let r = ttt_oldmean_gradient(p.beta.unwrap_or(p.beta0), &m_new, &tc, est)?;
        json!({
            "grad": vec_of(&r.grad),
            "grad_norm": r.grad.norm(),
            "bound": r.bound,
            "anchor_grad_norm": r.anchor_grad.norm(),
        })
    } else {
        Value::Null
    };
    let summary = json!({
        "case": a.case,
        "beta_star": a.beta_star,
        "lambda_crit_new": a.lambda_crit_new,
        "lambda_crit_old": a.lambda_crit_old,
        "grid_argmax": arg,
        "grid_max_second_difference": curv,
        "old_mean_gradient": drift,
    });
    Ok(ScenarioOutput { table, summary })
}

fn oapl(cfg: &ScenarioConfig, p: &super::config::OaplParams, est: &EstimatorConfig) -> Result<ScenarioOutput> {
    let geometry = pair(cfg)?;
    let mu_n = geometry.mu_new.clone();
    let oc = OaplConfig {
        tau: p.tau,
        beta0: p.beta0,
        reward: StepReward {
            u_old: p.r_old,
            u_new: p.r_new,
            partition: p.partition,
        },
        geometry,
    };
    let t = oapl_target(&oc)?;
    let (b, e) = oapl_sampling_oracle(&oc, p.samples, derive_seed(est.seed, "oapl"))?;
    let mut table = Table::new(["beta", "regression_value"]);
    let mut regression = Value::Null;
    if p.partition == RewardPartition::BayesHalfspace {
        let m_new = resolve("params.m_new", &p.m_new, mu_n.len(), &mu_n)?;
        for i in 1..100 {
            let beta = i as f64 / 100.0;
            table.push(vec![beta.into(), oapl_regression_value(beta, &m_new, &oc, est)?.into()]);
        }
        let r = oapl_regression_grad(p.beta.unwrap_or(p.beta0), &m_new, &oc, est)?;
        regression = json!({
            "value": r.j_value,
            "grad_m": vec_of(&r.grad_m),
            "oldmode_term_norm": r.oldmode_term.norm(),
            "oldmode_bound": r.oldmode_bound,
            "eps_ref": r.eps_ref,
            "eps_ref_bound": r.eps_ref_bound,
        });
    }
    let summary = json!({
        "v_star": t.v_star,
        "log_partition": t.z.ln(),
        "gamma": t.gamma,
        "beta_star_disjoint": t.beta_star_disjoint,
        "beta_star_sampled": b.value,
        "beta_star_sampled_std_err": b.std_err,
        "expected_old_resp": t.expected_old_resp,
        "expected_old_resp_sampled": e.value,
        "expected_old_resp_sampled_std_err": e.std_err,
        "regression": regression,
    });
    Ok(ScenarioOutput { table, summary })
}

fn fdiv(cfg: &ScenarioConfig, p: &super::config::FdivParams, est: &EstimatorConfig) -> Result<ScenarioOutput> {
    let spec = spec_of(cfg, p.alpha)?;
    let m_new = resolve("params.m_new", &p.m_new, spec.dim(), &spec.mu_new)?;
    let mut table = Table::new(["generator", "beta", "loss"]);
    let mut per = Vec::new();
    for g in p.generators()? {
        let name = g.name();
        let scan = fdiv_sft_scan(&g, &spec, est)?;
        for (b, l) in scan.betas.iter().zip(&scan.losses) {
            table.push(vec![name.clone().into(), (*b).into(), (*l).into()]);
        }
        let drift = fdiv_oldmean_grad(&g, p.beta, &m_new, &spec, est)?;
        per.push(json!({
            "generator": name,
            "sft_monotone": scan.monotone,
            "kappa_sup": g.kappa_sup(),
            "drift_grad": vec_of(&drift.grad),
            "drift_grad_norm": drift.grad.norm(),
            "drift_bound": drift.bound,
            "a_f": drift.a_f,
            "b_f": drift.b_f,
            "eps_q": drift.eps_q,
            "eps_p": drift.eps_p,
        }));
    }
    Ok(ScenarioOutput {
        table,
        summary: json!({ "generators": per }),
    })
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

fn kmode(cfg: &ScenarioConfig, p: &super::config::KmodeParams, est: &EstimatorConfig) -> Result<ScenarioOutput> {
    let g = cfg.geometry()?;
    let means = g
        .means
        .clone()
        .ok_or_else(|| Error::input("geometry.means", "required for kmode"))?;
    let k = means.len();
    let target = MixtureDensity::new(p.weights.clone(), means.clone(), g.cov.clone())?;
    let model_means = match &p.model_means {
        Some(ms) => ms.iter().map(|m| DVector::from_column_slice(m)).collect(),
        None => means,
    };
    let model_weights = p.model_weights.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
    let model = MixtureDensity::new(model_weights, model_means, g.cov.clone())?;
    let r = kmode_analysis(&target, &p.subset, p.mode, &model, est)?;
    let mut table = Table::new(["component", "target_weight", "beta_star", "beta_closed"]);
    for i in 0..k {
        table.push(vec![
            (i as f64).into(),
            p.weights[i].into(),
            r.beta_star[i].into(),
            r.beta_closed[i].into(),
        ]);
    }
    let summary = json!({
        "beta_star": r.beta_star,
        "beta_closed": r.beta_closed,
        "beta_max_err": r.beta_max_err,
        "fit_iterations": r.fit.iterations,
        "fit_residual": r.fit.residual,
        "old_grad": vec_of(&r.old_grad),
        "old_grad_norm": r.old_grad.norm(),
        "grad_bound": r.grad_bound,
        "eps_q": rows(&r.eps_q),
        "eps_q_std_err": rows(&r.eps_q_se),
        "eps_q_bound": rows(&r.eps_q_bound),
        "eps_p": rows(&r.eps_p),
        "eps_p_std_err": rows(&r.eps_p_se),
        "eps_p_bound": rows(&r.eps_p_bound),
        "bounds_ok": r.bounds_ok,
    });
    Ok(ScenarioOutput { table, summary })
}

fn logconcave(cfg: &ScenarioConfig, p: &super::config::LogconcaveParams) -> Result<ScenarioOutput> {
    let g = cfg.geometry()?;
    let (o, n) = g.pair()?;
    let fam = match p.family {
        FamilyName::LogCosh => LocationFamily1D::log_cosh(p.a)?,
        FamilyName::Gaussian => LocationFamily1D::gaussian(),
    };
    let (mo, mn) = (o[0], n[0]);
    let r = logconcave_checks(&fam, mo, mn, p.alpha, p.beta, p.m_new.unwrap_or(mn), p.fd_step)?;
    let mut table = Table::new(["beta", "sft_loss"]);
    let n_pts = r.sft_losses.len();
    for (i, l) in r.sft_losses.iter().enumerate() {
        table.push(vec![(i as f64 / (n_pts - 1) as f64).into(), (*l).into()]);
    }
    let summary = json!({
        "family": fam.name,
        "m_strong": fam.m_strong,
        "l_smooth": fam.l_smooth,
        "bc": r.bc,
        "bc_bound": r.bc_bound,
        "fisher_residual": r.fisher_residual,
        "sft_monotone": r.sft_monotone,
        "drift_grad": r.drift_grad,
        "drift_grad_ibp": r.drift_grad_ibp,
        "eps_q": r.eps_q,
        "eps_p": r.eps_p,
        "drift_bound": r.drift_bound,
    });
    Ok(ScenarioOutput { table, summary })
}
