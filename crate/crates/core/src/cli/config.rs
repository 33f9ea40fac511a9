//! Scenario configuration files.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! schema = "forgetlab.scenario/1"
//! kind = "flow"
//! output_dir = "out"
//!
//! [geometry]
//! dim = 2
//! sigma_diag = [1.0, 2.0]      # or sigma = [[..], [..]]; identity when absent
//! mu_old = [0.0, 0.0]
//! mu_new = [4.0, 0.0]
//!
//! [params]
//! beta = 0.5
//!
//! [estimator]
//! quad_order = 200
//! ```
//!
//! Everything is parsed and validated before any computation starts; errors
//! carry the dotted path of the offending field.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, FGenerator};
use crate::extensions::kmode::MAX_MODES;
use crate::flows::FlowObjective;
use crate::mixture::CovarianceModel;
use crate::near_on_policy::RewardPartition;

pub const SCHEMA: &str = "forgetlab.scenario/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Flow,
    Replay,
    Sdft,
    Ttt,
    Oapl,
    Fdiv,
    Kmode,
    Logconcave,
    Check,
}

impl Kind {
    pub const ALL: [Kind; 9] = [
        Kind::Flow,
        Kind::Replay,
        Kind::Sdft,
        Kind::Ttt,
        Kind::Oapl,
        Kind::Fdiv,
        Kind::Kmode,
        Kind::Logconcave,
        Kind::Check,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Flow => "flow",
            Kind::Replay => "replay",
            Kind::Sdft => "sdft",
            Kind::Ttt => "ttt",
            Kind::Oapl => "oapl",
            Kind::Fdiv => "fdiv",
            Kind::Kmode => "kmode",
            Kind::Logconcave => "logconcave",
            Kind::Check => "check",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Kind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Kind::ALL.iter().map(|k| k.name()).collect();
            Error::input(
                "kind",
                format!("unknown kind `{s}`; expected one of {}", names.join(", ")),
            )
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema: String,
    kind: String,
    output_dir: Option<PathBuf>,
    geometry: Option<toml::Table>,
    params: Option<toml::Table>,
    estimator: Option<toml::Table>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeometry {
    dim: usize,
    sigma: Option<Vec<Vec<f64>>>,
    sigma_diag: Option<Vec<f64>>,
    mu_old: Option<Vec<f64>>,
    mu_new: Option<Vec<f64>>,
    means: Option<Vec<Vec<f64>>>,
}

/// Validated geometry block.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub dim: usize,
    pub cov: CovarianceModel,
    pub mu_old: Option<DVector<f64>>,
    pub mu_new: Option<DVector<f64>>,
    pub means: Option<Vec<DVector<f64>>>,
}

impl Geometry {
    /// `(μ_o, μ_n)`, required by every two-mode kind.
    pub fn pair(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let o = self
            .mu_old
            .clone()
            .ok_or_else(|| Error::input("geometry.mu_old", "required for this kind"))?;
        let n = self
            .mu_new
            .clone()
            .ok_or_else(|| Error::input("geometry.mu_new", "required for this kind"))?;
        if o == n {
            return Err(Error::input("geometry.mu_new", "must differ from mu_old"));
        }
        Ok((o, n))
    }
}

fn vector(path: &str, v: &[f64], d: usize) -> Result<DVector<f64>> {
    if v.len() != d {
        return Err(Error::input(path, format!("expected {d} entries, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::input(path, "entries must be finite"));
    }
    Ok(DVector::from_column_slice(v))
}

fn parse_geometry(t: toml::Table) -> Result<Geometry> {
    let g: RawGeometry = de(t, "geometry")?;
    let d = g.dim;
    if d == 0 {
        return Err(Error::input("geometry.dim", "must be at least 1"));
    }
    let cov = match (&g.sigma, &g.sigma_diag) {
        (Some(_), Some(_)) => {
            return Err(Error::input(
                "geometry.sigma",
                "give either sigma or sigma_diag, not both",
            ))
        }
        (Some(rows), None) => {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(Error::input("geometry.sigma", format!("must be a {d}x{d} matrix")));
            }
            let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
            CovarianceModel::new(DMatrix::from_row_slice(d, d, &flat)).map_err(|e| at("geometry.sigma", e))?
        }
        (None, Some(diag)) => {
            vector("geometry.sigma_diag", diag, d)?;
            CovarianceModel::diagonal(diag).map_err(|e| at("geometry.sigma_diag", e))?
        }
        (None, None) => CovarianceModel::identity(d),
    };
    let mu_old = g
        .mu_old
        .as_deref()
        .map(|v| vector("geometry.mu_old", v, d))
        .transpose()?;
    let mu_new = g
        .mu_new
        .as_deref()
        .map(|v| vector("geometry.mu_new", v, d))
        .transpose()?;
    let means = g
        .means
        .as_ref()
        .map(|ms| {
            ms.iter()
                .enumerate()
                .map(|(i, m)| vector(&format!("geometry.means[{i}]"), m, d))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(Geometry {
        dim: d,
        cov,
        mu_old,
        mu_new,
        means,
    })
}

/// Re-anchor an error at a config path, keeping its message.
fn at(path: &str, e: Error) -> Error {
    match e {
        Error::Input { msg, .. } => Error::input(path, msg),
        other => Error::input(path, other.to_string()),
    }
}

fn de<T: DeserializeOwned>(t: toml::Table, path: &str) -> Result<T> {
    T::deserialize(toml::Value::Table(t)).map_err(|e| Error::input(path, e.to_string().trim().to_string()))
}

fn open_prob(path: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::input(path, format!("{x} is not in (0, 1)")));
    }
    Ok(())
}

fn positive(path: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::input(path, format!("{x} must be positive and finite")));
    }
    Ok(())
}

fn finite(path: &str, x: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::input(path, "must be finite"));
    }
    Ok(())
}

/// An optional vector parameter, or `default` when absent.
pub(crate) fn resolve(path: &str, v: &Option<Vec<f64>>, d: usize, default: &DVector<f64>) -> Result<DVector<f64>> {
    match v {
        Some(v) => vector(path, v, d),
        None => Ok(default.clone()),
    }
}

// ---------------------------------------------------------------------------
// Kind-specific parameter blocks

fn default_half() -> f64 {
    0.5
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowParams {
    #[serde(default = "FlowParams::default_objective")]
    pub objective: FlowObjective,
    #[serde(default = "default_half")]
    pub alpha: f64,
    /// Initial old weight.
    pub beta: f64,
    /// Initial new mean; `mu_new` when absent.
    pub m_new: Option<Vec<f64>>,
    #[serde(default = "FlowParams::default_dt")]
    pub dt: f64,
    #[serde(default = "FlowParams::default_t_max")]
    pub t_max: f64,
    pub stop_beta: Option<f64>,
}

impl FlowParams {
    fn default_objective() -> FlowObjective {
        FlowObjective::SftLogit
    }
    fn default_dt() -> f64 {
        0.05
    }
    fn default_t_max() -> f64 {
        20.0
    }

    fn validate(&self, d: usize) -> Result<()> {
        open_prob("params.alpha", self.alpha)?;
        open_prob("params.beta", self.beta)?;
        if !(self.dt > 0.0 && self.dt <= 0.5) {
            return Err(Error::input("params.dt", format!("{} is not in (0, 0.5]", self.dt)));
        }
        positive("params.t_max", self.t_max)?;
        if self.t_max / self.dt > 1e7 {
            return Err(Error::input("params.t_max", "more than 1e7 steps"));
        }
        if let Some(b) = self.stop_beta {
            open_prob("params.stop_beta", b)?;
        }
        if let Some(m) = &self.m_new {
            vector("params.m_new", m, d)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayParams {
    pub lambda: f64,
    #[serde(default = "default_half")]
    pub alpha: f64,
    /// Learner old weight for the sampling statistics.
    #[serde(default = "ReplayParams::default_beta")]
    pub beta: f64,
    pub m_new: Option<Vec<f64>>,
    #[serde(default = "ReplayParams::default_batch")]
    pub batch_size: usize,
    #[serde(default = "ReplayParams::default_trials")]
    pub trials: usize,
    #[serde(default = "ReplayParams::default_probes")]
    pub weight_probes: usize,
}

impl ReplayParams {
    fn default_beta() -> f64 {
        0.05
    }
    fn default_batch() -> usize {
        50
    }
    fn default_trials() -> usize {
        100_000
    }
    fn default_probes() -> usize {
        100_000
    }

    fn validate(&self, d: usize) -> Result<()> {
        open_prob("params.lambda", self.lambda)?;
        open_prob("params.alpha", self.alpha)?;
        open_prob("params.beta", self.beta)?;
        if self.batch_size == 0 {
            return Err(Error::input("params.batch_size", "must be at least 1"));
        }
        if self.trials < 1000 {
            return Err(Error::input("params.trials", "must be at least 1000"));
        }
        if self.weight_probes == 0 {
            return Err(Error::input("params.weight_probes", "must be at least 1"));
        }
        if let Some(m) = &self.m_new {
            vector("params.m_new", m, d)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdftParams {
    #[serde(default = "default_half")]
    pub alpha_c: f64,
    /// Demonstration anchor mean; `mu_new` when absent.
    pub nu_c: Option<Vec<f64>>,
    /// Step size; `0.5 / M` with `M` probed at the initial state when absent.
    pub step_gamma: Option<f64>,
    #[serde(default = "SdftParams::default_zeta")]
    pub ema_zeta: f64,
    #[serde(default = "SdftParams::default_zeta")]
    pub demo_lambda: f64,
    pub init_alpha: Option<f64>,
    pub init_nu: Option<Vec<f64>>,
    pub init_beta: Option<f64>,
    pub init_m: Option<Vec<f64>>,
    #[serde(default = "SdftParams::default_steps")]
    pub steps: usize,
}

impl SdftParams {
    fn default_zeta() -> f64 {
        0.3
    }
    fn default_steps() -> usize {
        200
    }

    fn validate(&self, d: usize) -> Result<()> {
        open_prob("params.alpha_c", self.alpha_c)?;
        if let Some(g) = self.step_gamma {
            positive("params.step_gamma", g)?;
        }
        if !(self.ema_zeta > 0.0 && self.ema_zeta <= 1.0) {
            return Err(Error::input(
                "params.ema_zeta",
                format!("{} is not in (0, 1]", self.ema_zeta),
            ));
        }
        if !(0.0..=1.0).contains(&self.demo_lambda) {
            return Err(Error::input(
                "params.demo_lambda",
                format!("{} is not in [0, 1]", self.demo_lambda),
            ));
        }
        for (p, v) in [
            ("params.init_alpha", self.init_alpha),
            ("params.init_beta", self.init_beta),
        ] {
            if let Some(x) = v {
                open_prob(p, x)?;
            }
        }
        for (p, v) in [
            ("params.nu_c", &self.nu_c),
            ("params.init_nu", &self.init_nu),
            ("params.init_m", &self.init_m),
        ] {
            if let Some(v) = v {
                vector(p, v, d)?;
            }
        }
        if self.steps == 0 || self.steps > 1_000_000 {
            return Err(Error::input("params.steps", "must lie in 1..=1000000"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TttParams {
    #[serde(default = "TttParams::default_eta")]
    pub eta: f64,
    pub lambda_ref: f64,
    #[serde(default = "default_half")]
    pub beta0: f64,
    pub u_old: f64,
    pub u_new: f64,
    #[serde(default = "default_partition")]
    pub partition: RewardPartition,
    /// Learner weight for the old-mean gradient; `beta0` when absent.
    pub beta: Option<f64>,
    pub m_new: Option<Vec<f64>>,
}

fn default_partition() -> RewardPartition {
    RewardPartition::BayesHalfspace
}

impl TttParams {
    fn default_eta() -> f64 {
        1.0
    }

    fn validate(&self, d: usize) -> Result<()> {
        positive("params.eta", self.eta)?;
        if !(self.lambda_ref >= 0.0 && self.lambda_ref.is_finite()) {
            return Err(Error::input("params.lambda_ref", "must be nonnegative and finite"));
        }
        open_prob("params.beta0", self.beta0)?;
        finite("params.u_old", self.u_old)?;
        finite("params.u_new", self.u_new)?;
        if let Some(b) = self.beta {
            open_prob("params.beta", b)?;
        }
        if let Some(m) = &self.m_new {
            vector("params.m_new", m, d)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OaplParams {
    #[serde(default = "OaplParams::default_tau")]
    pub tau: f64,
    #[serde(default = "default_half")]
    pub beta0: f64,
    pub r_old: f64,
    pub r_new: f64,
    #[serde(default = "default_partition")]
    pub partition: RewardPartition,
    /// Learner weight for the regression gradient; `beta0` when absent.
    pub beta: Option<f64>,
    pub m_new: Option<Vec<f64>>,
    #[serde(default = "OaplParams::default_samples")]
    pub samples: usize,
}

impl OaplParams {
    fn default_tau() -> f64 {
        1.0
    }
    fn default_samples() -> usize {
        100_000
    }

    fn validate(&self, d: usize) -> Result<()> {
        positive("params.tau", self.tau)?;
        open_prob("params.beta0", self.beta0)?;
        finite("params.r_old", self.r_old)?;
        finite("params.r_new", self.r_new)?;
        if let Some(b) = self.beta {
            open_prob("params.beta", b)?;
        }
        if let Some(m) = &self.m_new {
            vector("params.m_new", m, d)?;
        }
        if self.samples < 1000 {
            return Err(Error::input("params.samples", "must be at least 1000"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdivParams {
    /// Generator names; the full catalogue when absent.
    pub generators: Option<Vec<String>>,
    #[serde(default = "default_half")]
    pub alpha: f64,
    #[serde(default = "default_half")]
    pub beta: f64,
    pub m_new: Option<Vec<f64>>,
}

impl FdivParams {
    pub fn generators(&self) -> Result<Vec<FGenerator>> {
        match &self.generators {
            None => Ok(FGenerator::catalogue()),
            Some(names) => names
                .iter()
                .enumerate()
                .map(|(i, n)| FGenerator::parse(n).map_err(|e| at(&format!("params.generators[{i}]"), e)))
                .collect(),
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        open_prob("params.alpha", self.alpha)?;
        open_prob("params.beta", self.beta)?;
        if let Some(m) = &self.m_new {
            vector("params.m_new", m, d)?;
        }
        if matches!(&self.generators, Some(g) if g.is_empty()) {
            return Err(Error::input("params.generators", "must not be empty"));
        }
        self.generators().map(|_| ())
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmodeParams {
    /// Target weights, one per `geometry.means` entry.
    pub weights: Vec<f64>,
    /// Trained subset of target modes (0-based).
    pub subset: Vec<usize>,
    /// Mode whose drift is analysed; the model keeps it on its target mean.
    #[serde(default)]
    pub mode: usize,
    /// Model weights; uniform when absent.
    pub model_weights: Option<Vec<f64>>,
    /// Model means; the target means when absent.
    pub model_means: Option<Vec<Vec<f64>>>,
}

impl KmodeParams {
    fn validate(&self, k: usize, d: usize) -> Result<()> {
        if !(2..=MAX_MODES).contains(&k) {
            return Err(Error::input(
                "geometry.means",
                format!("need 2 to {MAX_MODES} means, got {k}"),
            ));
        }
        simplex("params.weights", &self.weights, k)?;
        if self.subset.is_empty() {
            return Err(Error::input("params.subset", "must not be empty"));
        }
        for (i, &s) in self.subset.iter().enumerate() {
            if s >= k {
                return Err(Error::input(
                    format!("params.subset[{i}]"),
                    format!("{s} is not below {k}"),
                ));
            }
            if self.subset[..i].contains(&s) {
                return Err(Error::input(format!("params.subset[{i}]"), format!("{s} is repeated")));
            }
        }
        if self.mode >= k {
            return Err(Error::input("params.mode", format!("{} is not below {k}", self.mode)));
        }
        if let Some(w) = &self.model_weights {
            simplex("params.model_weights", w, k)?;
        }
        if let Some(ms) = &self.model_means {
            if ms.len() != k {
                return Err(Error::input("params.model_means", format!("expected {k} means")));
            }
            for (i, m) in ms.iter().enumerate() {
                vector(&format!("params.model_means[{i}]"), m, d)?;
            }
        }
        Ok(())
    }
}

fn simplex(path: &str, w: &[f64], k: usize) -> Result<()> {
    if w.len() != k {
        return Err(Error::input(path, format!("expected {k} entries, got {}", w.len())));
    }
    if w.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        return Err(Error::input(path, "entries must be positive"));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::input(path, format!("entries sum to {s}, not 1")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    LogCosh,
    Gaussian,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogconcaveParams {
    #[serde(default = "LogconcaveParams::default_family")]
    pub family: FamilyName,
    /// Log-cosh strength in `(0, 1]`.
    #[serde(default = "default_half")]
    pub a: f64,
    #[serde(default = "default_half")]
    pub alpha: f64,
    #[serde(default = "default_half")]
    pub beta: f64,
    pub m_new: Option<f64>,
    #[serde(default = "LogconcaveParams::default_step")]
    pub fd_step: f64,
}

impl LogconcaveParams {
    fn default_family() -> FamilyName {
        FamilyName::LogCosh
    }
    fn default_step() -> f64 {
        1e-4
    }

    fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a <= 1.0) {
            return Err(Error::input("params.a", format!("{} is not in (0, 1]", self.a)));
        }
        open_prob("params.alpha", self.alpha)?;
        open_prob("params.beta", self.beta)?;
        if let Some(m) = self.m_new {
            finite("params.m_new", m)?;
        }
        positive("params.fd_step", self.fd_step)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckParams {
    #[serde(default = "CheckParams::default_suite")]
    pub suite: String,
    pub mutate: Option<String>,
}

impl CheckParams {
    fn default_suite() -> String {
        "all".into()
    }
}

#[derive(Clone, Debug)]
pub enum Params {
    Flow(FlowParams),
    Replay(ReplayParams),
    Sdft(SdftParams),
    Ttt(TttParams),
    Oapl(OaplParams),
    Fdiv(FdivParams),
    Kmode(KmodeParams),
    Logconcave(LogconcaveParams),
    Check(CheckParams),
}

/// A fully validated scenario.
#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub kind: Kind,
    pub geometry: Option<Geometry>,
    pub params: Params,
    pub estimator: EstimatorConfig,
    pub output_dir: PathBuf,
}

impl ScenarioConfig {
    pub fn geometry(&self) -> Result<&Geometry> {
        self.geometry
            .as_ref()
            .ok_or_else(|| Error::input("geometry", "required for this kind"))
    }
}

/// Overrides applied after parsing (command line or environment).
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

pub fn load(path: &Path, ov: &Overrides) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse(&text, base, ov)
}

/// Parse and validate a scenario; a relative `output_dir` is resolved
/// against `base`.
pub fn parse(text: &str, base: &Path, ov: &Overrides) -> Result<ScenarioConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::input("config", e.message().to_string()))?;
    if raw.schema != SCHEMA {
        return Err(Error::input(
            "schema",
            format!("expected `{SCHEMA}`, got `{}`", raw.schema),
        ));
    }
    let kind = Kind::parse(&raw.kind)?;
    let mut estimator: EstimatorConfig = de(raw.estimator.unwrap_or_default(), "estimator")?;
    if let Some(s) = ov.seed {
        estimator.seed = s;
    }
    estimator.validate()?;
    let geometry = raw.geometry.map(parse_geometry).transpose()?;
    let table = raw.params.unwrap_or_default();
    let dim = geometry.as_ref().map(|g| g.dim);
    let need_pair = |g: &Option<Geometry>| -> Result<usize> {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::input("geometry", "required for this kind"))?;
        g.pair()?;
        Ok(g.dim)
    };
    let params = match kind {
        Kind::Flow => {
            let p: FlowParams = de(table, "params")?;
            p.validate(need_pair(&geometry)?)?;
            Params::Flow(p)
        }
        Kind::Replay => {
            let p: ReplayParams = de(table, "params")?;
            p.validate(need_pair(&geometry)?)?;
            Params::Replay(p)
        }
        Kind::Sdft => {
            let p: SdftParams = de(table, "params")?;
            p.validate(need_pair(&geometry)?)?;
            Params::Sdft(p)
        }
        Kind::Ttt => {
            let p: TttParams = de(table, "params")?;
            p.validate(need_pair(&geometry)?)?;
            Params::Ttt(p)
        }
        Kind::Oapl => {
            let p: OaplParams = de(table, "params")?;
            p.validate(need_pair(&geometry)?)?;
            Params::Oapl(p)
        }
        Kind::Fdiv => {
            let p: FdivParams = de(table, "params")?;
            p.validate(need_pair(&geometry)?)?;
            Params::Fdiv(p)
        }
        Kind::Kmode => {
            let p: KmodeParams = de(table, "params")?;
            let g = geometry
                .as_ref()
                .ok_or_else(|| Error::input("geometry", "required for this kind"))?;
            let k = g
                .means
                .as_ref()
                .map(|m| m.len())
                .ok_or_else(|| Error::input("geometry.means", "required for kmode"))?;
            p.validate(k, g.dim)?;
            Params::Kmode(p)
        }
        Kind::Logconcave => {
            let p: LogconcaveParams = de(table, "params")?;
            need_pair(&geometry)?;
            crate::extensions::logconcave::check_scope(dim.unwrap_or(0))?;
            p.validate()?;
            Params::Logconcave(p)
        }
        Kind::Check => {
            let p: CheckParams = de(table, "params")?;
            super::checks::Suite::parse(&p.suite).map_err(|e| at("params.suite", e))?;
            if let Some(m) = &p.mutate {
                super::checks::Mutation::parse(m).map_err(|e| at("params.mutate", e))?;
            }
            Params::Check(p)
        }
    };
    let out = ov
        .output_dir
        .clone()
        .or(raw.output_dir)
        .unwrap_or_else(|| PathBuf::from("."));
    let output_dir = if out.is_absolute() { out } else { base.join(out) };
    Ok(ScenarioConfig {
        kind,
        geometry,
        params,
        estimator,
        output_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(params: &str) -> String {
        format!(
            "schema = \"{SCHEMA}\"\nkind = \"flow\"\n[geometry]\ndim = 1\nmu_old = [0.0]\nmu_new = [4.0]\n[params]\n{params}\n"
        )
    }

    fn err_path(text: &str) -> String {
        match parse(text, Path::new("."), &Overrides::default()) {
            Err(Error::Input { path, .. }) => path,
            other => panic!("expected an input error, got {other:?}"),
        }
    }

    #[test]
    fn flow_config_parses() {
        let c = parse(&flow("beta = 0.3"), Path::new("/tmp"), &Overrides::default()).unwrap();
        assert_eq!(c.kind, Kind::Flow);
        assert_eq!(c.output_dir, PathBuf::from("/tmp/."));
        match c.params {
            Params::Flow(p) => assert_eq!((p.beta, p.dt, p.objective), (0.3, 0.05, FlowObjective::SftLogit)),
            _ => panic!(),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(err_path(&flow("beta = 1.5")), "params.beta");
        assert_eq!(err_path(&flow("beta = 0.5\ndt = 2.0")), "params.dt");
        assert_eq!(err_path(&flow("beta = 0.5\nbogus = 1")), "params");
        assert_eq!(err_path(&flow("beta = 0.5\nm_new = [1.0, 2.0]")), "params.m_new");
        assert_eq!(err_path(&flow("beta = 0.5").replace("flow", "spiral")), "kind");
        assert_eq!(
            err_path(&flow("beta = 0.5").replace("scenario/1", "scenario/9")),
            "schema"
        );
        assert_eq!(
            err_path(&flow("beta = 0.5").replace("mu_new = [4.0]", "mu_new = [0.0]")),
            "geometry.mu_new"
        );
        assert_eq!(
            err_path(&format!("{}[estimator]\nquad_order = 4\n", flow("beta = 0.5"))),
            "estimator.quad_order"
        );
    }

    #[test]
    fn logconcave_rejects_higher_dimensions() {
        let text = format!(
            "schema = \"{SCHEMA}\"\nkind = \"logconcave\"\n[geometry]\ndim = 2\nmu_old = [0.0, 0.0]\nmu_new = [3.0, 0.0]\n"
        );
        assert!(matches!(
            parse(&text, Path::new("."), &Overrides::default()),
            Err(Error::Method(_))
        ));
    }

    #[test]
    fn overrides_apply() {
        let ov = Overrides {
            seed: Some(5),
            output_dir: Some(PathBuf::from("/x")),
        };
        let c = parse(&flow("beta = 0.3"), Path::new("."), &ov).unwrap();
        assert_eq!(c.estimator.seed, 5);
        assert_eq!(c.output_dir, PathBuf::from("/x"));
    }

    #[test]
    fn kmode_subset_is_checked() {
        let text = format!(
            "schema = \"{SCHEMA}\"\nkind = \"kmode\"\n[geometry]\ndim = 1\nmeans = [[0.0], [3.0], [6.0]]\n[params]\nweights = [0.2, 0.3, 0.5]\nsubset = [0, 3]\n"
        );
        assert_eq!(err_path(&text), "params.subset[1]");
    }
}
