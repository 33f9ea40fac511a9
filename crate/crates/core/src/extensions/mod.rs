//! Beyond the Gaussian two-mode model: general f-divergences, K-mode
//! mixtures and 1D strongly log-concave location families.

pub mod fdiv;
pub mod kmode;
pub mod logconcave;

pub use fdiv::{fdiv_oldmean_grad, fdiv_sft_scan, FdivDrift, FdivScan};
pub use kmode::{kmode_analysis, KmodeReport};
pub use logconcave::{logconcave_checks, LocationFamily1D, LogconcaveReport};
