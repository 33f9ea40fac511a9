//! Near-on-policy update rules in the two-mode model.
//!
//! - [`sdft`]: student/teacher distillation with an EMA teacher pulled
//!   toward a demonstration anchor.
//! - [`ttt`]: entropic reward objective with a KL anchor to a reference
//!   mixture, and its optimal old weight.
//! - [`oapl`]: exponential tilt of a frozen reference and the squared
//!   advantage regression that fits it.

pub mod oapl;
pub mod sdft;
pub mod ttt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{bayes_partition_stats, BayesPartition, CovarianceModel, Region};

pub use oapl::{oapl_regression_grad, oapl_sampling_oracle, oapl_target, tilt_recovery_check, OaplConfig};
pub use sdft::{sdft_run, sdft_step, SdftConfig, SdftState};
pub use ttt::{ttt_analysis, ttt_oldmean_gradient, TttCase, TttConfig};

/// How the reward regions are laid out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardPartition {
    /// Components are treated as having disjoint supports.
    Disjoint,
    /// `A_n = {(μ_n − μ_o)ᵀΣ⁻¹(y − mid) ≥ 0}`.
    BayesHalfspace,
}

/// Two-level reward: `u_old` on the old region, `u_new` on the new one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReward {
    pub u_old: f64,
    pub u_new: f64,
    pub partition: RewardPartition,
}

impl StepReward {
    pub fn validate(&self) -> Result<()> {
        if !self.u_old.is_finite() || !self.u_new.is_finite() {
            return Err(Error::input("reward", "reward levels must be finite"));
        }
        Ok(())
    }

    /// `R = max(|u_o|, |u_n|)`.
    pub fn bound(&self) -> f64 {
        self.u_old.abs().max(self.u_new.abs())
    }

    pub fn level(&self, region: Region) -> f64 {
        match region {
            Region::Old => self.u_old,
            Region::New => self.u_new,
        }
    }
}

/// Shared geometry of the old and new modes.
#[derive(Clone, Debug)]
pub struct ModePair {
    pub mu_old: DVector<f64>,
    pub mu_new: DVector<f64>,
    pub cov: CovarianceModel,
}

impl ModePair {
    pub fn new(mu_old: DVector<f64>, mu_new: DVector<f64>, cov: CovarianceModel) -> Result<Self> {
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
        Ok(ModePair { mu_old, mu_new, cov })
    }

    pub fn canonical(delta: f64, d: usize) -> Result<Self> {
        let mut mu_new = DVector::zeros(d);
        mu_new[0] = delta;
        Self::new(DVector::zeros(d), mu_new, CovarianceModel::identity(d))
    }

    pub fn partition(&self) -> BayesPartition {
        bayes_partition_stats(&self.mu_old, &self.mu_new, &self.cov).expect("distinct means")
    }

    pub fn delta(&self) -> f64 {
        self.cov.mahalanobis(&(&self.mu_new - &self.mu_old))
    }
}

pub(crate) fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::input(name, format!("{p} is not in (0, 1)")));
    }
    Ok(())
}
